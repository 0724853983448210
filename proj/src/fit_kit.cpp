#include "nvmag/fit_kit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace nvmag {

namespace {

constexpr double kMHz = 1e6;

double median(std::vector<double> v) {
  if (v.empty())
    return 0.0;
  const auto mid = v.begin() + std::ptrdiff_t(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  double m = *mid;
  if (v.size() % 2 == 0)
    m = 0.5 * (m + *std::max_element(v.begin(), mid));
  return m;
}

// Robust per-point noise from first differences (dips barely move the MAD).
double mad_noise(const Eigen::VectorXd &y) {
  if (y.size() < 3)
    return 0.0;
  std::vector<double> d(std::size_t(y.size() - 1));
  for (Eigen::Index k = 0; k + 1 < y.size(); ++k)
    d[std::size_t(k)] = y[k + 1] - y[k];
  const double m = median(d);
  for (double &v : d)
    v = std::abs(v - m);
  return 1.4826 * median(d) / std::numbers::sqrt2;
}

} // namespace

LorentzParams pack(const DipModel &d, double baseline) {
  LorentzParams x;
  x << d.amplitude, d.hwhm, d.center, baseline;
  return x;
}

DipModel unpack(const LorentzParams &x) {
  DipModel d;
  d.amplitude = x.segment<4>(0);
  d.hwhm = x.segment<4>(4);
  d.center = x.segment<4>(8);
  return d;
}

void four_lorentzian(const LorentzParams &x, const Eigen::VectorXd &nu, Eigen::VectorXd &value,
                     LorentzJacobian *jacobian) {
  const Eigen::Index n = nu.size();
  value.setConstant(n, x[12]);
  if (jacobian) {
    jacobian->resize(n, 13);
    jacobian->col(12).setOnes();
  }
  for (int i = 0; i < 4; ++i) {
    const double a = x[i];
    const double g = x[4 + i];
    const double g2 = g * g;
    for (Eigen::Index k = 0; k < n; ++k) {
      const double d = nu[k] - x[8 + i];
      const double q = d * d + g2;
      const double shape = g2 / q;
      value[k] += a * shape;
      if (jacobian) {
        const double q2 = q * q;
        (*jacobian)(k, i) = shape;
        (*jacobian)(k, 4 + i) = 2.0 * a * g * d * d / q2;
        (*jacobian)(k, 8 + i) = 2.0 * a * g2 * d / q2;
      }
    }
  }
}

InitialGuess initial_guess(const Eigen::VectorXd &nu, const Eigen::VectorXd &contrast,
                           double min_separation) {
  const Eigen::Index n = contrast.size();
  if (n < 12 || nu.size() != n)
    throw Error(Errc::TooSmall, "initial guess needs at least 12 spectral points");

  Eigen::VectorXd smooth(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index lo = std::max<Eigen::Index>(0, k - 2);
    const Eigen::Index hi = std::min<Eigen::Index>(n - 1, k + 2);
    smooth[k] = contrast.segment(lo, hi - lo + 1).mean();
  }
  const double baseline = median(std::vector<double>(contrast.data(), contrast.data() + n));
  const Eigen::VectorXd depth = smooth.array() - baseline;
  const double noise = mad_noise(contrast);
  const double deepest = depth.maxCoeff();
  if (!(deepest > 3.0 * noise))
    throw Error(Errc::NoPeaks, "no dip rises above three times the spectral noise");

  std::vector<Eigen::Index> maxima;
  for (Eigen::Index k = 0; k < n; ++k) {
    const bool left = k == 0 || depth[k] >= depth[k - 1];
    const bool right = k == n - 1 || depth[k] > depth[k + 1];
    if (left && right && depth[k] > 0)
      maxima.push_back(k);
  }
  std::stable_sort(maxima.begin(), maxima.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return depth[a] > depth[b]; });

  std::vector<Eigen::Index> chosen;
  for (Eigen::Index k : maxima) {
    if (chosen.size() == 4)
      break;
    const bool far = std::all_of(chosen.begin(), chosen.end(), [&](Eigen::Index c) {
      return std::abs(nu[k] - nu[c]) >= min_separation;
    });
    if (far)
      chosen.push_back(k);
  }

  InitialGuess g;
  g.baseline = baseline;
  g.n_found = int(chosen.size());
  g.dips.hwhm.setConstant(2.5e6);
  for (int i = 0; i < g.n_found; ++i) {
    g.dips.center[i] = nu[chosen[std::size_t(i)]];
    g.dips.amplitude[i] = depth[chosen[std::size_t(i)]];
  }
  const int missing = 4 - g.n_found;
  const double span = nu[n - 1] - nu[0];
  for (int j = 0; j < missing; ++j) {
    g.dips.center[g.n_found + j] = nu[0] + (j + 1) * span / (missing + 1);
    g.dips.amplitude[g.n_found + j] = 0.5 * deepest;
  }
  return g;
}

SpectrumFit fit_four_lorentzians(const Eigen::VectorXd &nu, const Eigen::VectorXd &contrast,
                                 const DipModel &guess, double baseline_guess,
                                 const FourLorentzOptions &opts) {
  const Eigen::Index n = contrast.size();
  if (n < 13 || nu.size() != n)
    throw Error(Errc::TooSmall, "four-Lorentzian fit needs at least 13 spectral points");
  const LorentzParams start = pack(guess, baseline_guess);
  if (!start.allFinite())
    throw Error(Errc::BadGuess, "initial guess is not finite");

  // Work in MHz relative to the sweep midpoint: shift-invariant and well scaled.
  const double origin = 0.5 * (nu[0] + nu[n - 1]);
  const Eigen::VectorXd f = (nu.array() - origin) / kMHz;
  const double f_lo = f.minCoeff();
  const double f_hi = f.maxCoeff();
  const double data_scale = std::max(contrast.cwiseAbs().maxCoeff(), 1e-300);

  LorentzParams x0 = start;
  x0.segment<4>(4) /= kMHz;
  x0.segment<4>(8) = (x0.segment<4>(8).array() - origin) / kMHz;

  LorentzParams lower, upper, typical;
  lower << Eigen::Vector4d::Zero(), Eigen::Vector4d::Constant(opts.gamma_min / kMHz),
      Eigen::Vector4d::Constant(f_lo - opts.center_margin / kMHz), -INFINITY;
  upper << Eigen::Vector4d::Ones(), Eigen::Vector4d::Constant(opts.gamma_max / kMHz),
      Eigen::Vector4d::Constant(f_hi + opts.center_margin / kMHz), INFINITY;
  typical << Eigen::Vector4d::Constant(1e-3 * data_scale), Eigen::Vector4d::Zero(),
      Eigen::Vector4d::Ones(), 1e-3 * data_scale;

  auto eval = [&](const LorentzParams &x, Eigen::VectorXd &r, LorentzJacobian &jac) {
    four_lorentzian(x, f, r, &jac);
    r -= contrast;
  };
  const auto lm = levenberg_marquardt<13>(eval, x0, lower, upper, typical, opts.lm);

  SpectrumFit fit;
  fit.amplitude = lm.params.segment<4>(0);
  fit.gamma_hwhm = lm.params.segment<4>(4) * kMHz;
  fit.nu = lm.params.segment<4>(8).array() * kMHz + origin;
  fit.baseline = lm.params[12];
  fit.rss = lm.rss;
  fit.converged = lm.converged;
  fit.n_iter = lm.iterations;
  fit.rss_trace = lm.rss_trace;
  return fit;
}

SpectrumFit fit_spectrum(const Eigen::VectorXd &nu, const Eigen::VectorXd &contrast,
                         const FourLorentzOptions &opts, double min_separation) {
  const InitialGuess g = initial_guess(nu, contrast, min_separation);
  SpectrumFit best = fit_four_lorentzians(nu, contrast, g.dips, g.baseline, opts);
  if (g.n_found >= 4 || g.n_found == 0)
    return best;

  // Unresolved pairs: re-seed the spare dips by splitting each located dip.
  const int missing = 4 - g.n_found;
  for (int host = 0; host < g.n_found; ++host) {
    DipModel seed = g.dips;
    const double c = seed.center[host];
    const double w = seed.hwhm[host];
    seed.amplitude[host] *= 0.6;
    seed.center[host] = c - w;
    for (int j = 0; j < missing; ++j) {
      seed.center[g.n_found + j] = c + w * (j + 1);
      seed.amplitude[g.n_found + j] = seed.amplitude[host];
    }
    SpectrumFit cand = fit_four_lorentzians(nu, contrast, seed, g.baseline, opts);
    if (cand.converged && (!best.converged || cand.rss < best.rss))
      best = std::move(cand);
  }
  return best;
}

FitQuality fit_quality(const SpectrumFit &fit, const Eigen::VectorXd &nu,
                       const Eigen::VectorXd &contrast) {
  Eigen::VectorXd model;
  four_lorentzian(pack(fit.dips(), fit.baseline), nu, model);
  const double rss = (model - contrast).squaredNorm();
  const double tss = (contrast.array() - contrast.mean()).matrix().squaredNorm();
  FitQuality q;
  q.r_squared = tss > 0 ? 1.0 - rss / tss : (rss == 0 ? 1.0 : -INFINITY);
  const Eigen::Index dof = contrast.size() > 13 ? contrast.size() - 13 : contrast.size();
  const double sigma = std::sqrt(rss / double(dof));
  q.per_dip_snr = fit.amplitude / sigma;
  return q;
}

OdmrCube moving_average_3x3(const OdmrCube &cube) {
  cube.validate();
  if (cube.width < 3 || cube.height < 3)
    throw Error(Errc::TooSmall, "3x3 moving average needs at least 3x3 pixels");
  const int w = cube.width;
  const int h = cube.height;
  OdmrCube out = cube;
  std::vector<double> rows(std::size_t(w) * std::size_t(h));
  for (std::size_t f = 0; f < cube.n_freq(); ++f) {
    const float *src = cube.contrast.data() + f * cube.plane();
    float *dst = out.contrast.data() + f * cube.plane();
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double s = 0;
        for (int xx = std::max(0, x - 1); xx <= std::min(w - 1, x + 1); ++xx)
          s += src[std::size_t(y) * w + xx];
        rows[std::size_t(y) * w + x] = s;
      }
    }
    for (int y = 0; y < h; ++y) {
      const int y0 = std::max(0, y - 1);
      const int y1 = std::min(h - 1, y + 1);
      for (int x = 0; x < w; ++x) {
        double s = 0;
        for (int yy = y0; yy <= y1; ++yy)
          s += rows[std::size_t(yy) * w + x];
        const int nx = std::min(w - 1, x + 1) - std::max(0, x - 1) + 1;
        dst[std::size_t(y) * w + x] = static_cast<float>(s / double(nx * (y1 - y0 + 1)));
      }
    }
  }
  return out;
}

Eigen::VectorXd region_mean_spectrum(const OdmrCube &cube, int x, int y, int w, int h) {
  if (w <= 0 || h <= 0 || x < 0 || y < 0 || x + w > cube.width || y + h > cube.height)
    throw Error(Errc::BadRegion, "region lies outside the image");
  Eigen::VectorXd s = Eigen::VectorXd::Zero(Eigen::Index(cube.n_freq()));
  for (std::size_t f = 0; f < cube.n_freq(); ++f) {
    double acc = 0;
    for (int yy = y; yy < y + h; ++yy)
      for (int xx = x; xx < x + w; ++xx)
        acc += cube.at(f, xx, yy);
    s[Eigen::Index(f)] = acc / double(w * h);
  }
  return s;
}

RabiFit fit_rabi(const std::vector<RabiSample> &trace, double guess_freq) {
  const std::size_t n = trace.size();
  if (n < 8 || !(guess_freq > 0))
    throw Error(Errc::TooSmall, "Rabi fit needs at least 8 samples and a positive frequency guess");
  const double span = trace.back().duration - trace.front().duration;
  if (span * guess_freq < 1.0)
    throw Error(Errc::TooSmall, "Rabi trace must span at least one oscillation period");

  // units: microseconds and MHz
  Eigen::VectorXd tau(static_cast<Eigen::Index>(n)), y(static_cast<Eigen::Index>(n));
  for (std::size_t k = 0; k < n; ++k) {
    tau[Eigen::Index(k)] = trace[k].duration * 1e6;
    y[Eigen::Index(k)] = trace[k].fluorescence;
  }
  using P4 = Eigen::Matrix<double, 4, 1>; // [F0, c, f, decay rate]
  using J4 = Eigen::Matrix<double, Eigen::Dynamic, 4>;
  auto eval = [&](const P4 &p, Eigen::VectorXd &r, J4 &jac) {
    r.resize(Eigen::Index(n));
    jac.resize(Eigen::Index(n), 4);
    for (Eigen::Index k = 0; k < Eigen::Index(n); ++k) {
      const double t = tau[k];
      const double e = std::exp(-p[3] * t);
      const double phase = 2.0 * std::numbers::pi * p[2] * t;
      const double c = std::cos(phase);
      const double s = std::sin(phase);
      const double shape = 1.0 - c * e;
      r[k] = p[0] * (1.0 - 0.5 * p[1] * shape) - y[k];
      jac(k, 0) = 1.0 - 0.5 * p[1] * shape;
      jac(k, 1) = -0.5 * p[0] * shape;
      jac(k, 2) = -0.5 * p[0] * p[1] * 2.0 * std::numbers::pi * t * s * e;
      jac(k, 3) = -0.5 * p[0] * p[1] * t * c * e;
    }
  };

  const double y_max = y.maxCoeff();
  const double y_min = y.minCoeff();
  const double f0_guess = std::max(y[0], 1e-300);
  const double guess_mhz = guess_freq / 1e6;
  P4 lower(0.0, -2.0, 0.2 * guess_mhz, 0.0);
  P4 upper(INFINITY, 2.0, 5.0 * guess_mhz, INFINITY);
  P4 typical(1e-3 * y_max, 1e-3, 1e-3 * guess_mhz, 1e-3 / std::max(span * 1e6, 1e-12));

  LmOptions lm_opts;
  lm_opts.freeze_active_bounds = true; // decay rate sits at zero for undamped traces
  LmResult<4> best;
  best.rss = INFINITY;
  for (double factor : {1.0, 0.8, 1.25, 0.65, 1.5}) {
    const P4 start(f0_guess, std::clamp((y_max - y_min) / f0_guess, 1e-3, 1.0), factor * guess_mhz, 0.0);
    auto lm = levenberg_marquardt<4>(eval, start, lower, upper, typical, lm_opts);
    if (lm.rss < best.rss)
      best = std::move(lm);
  }
  if (!best.converged)
    throw Error(Errc::NotConverged, "Rabi fit did not converge");

  RabiFit fit;
  fit.f0 = best.params[0];
  fit.contrast = best.params[1];
  fit.rabi_freq = best.params[2] * 1e6;
  fit.t_pi = 1.0 / (2.0 * fit.rabi_freq);
  fit.decay = best.params[3] > 0 ? 1e-6 / best.params[3] : INFINITY;
  fit.rss = best.rss;
  return fit;
}

} // namespace nvmag
