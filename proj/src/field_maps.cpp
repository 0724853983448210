#include "nvmag/field_maps.hpp"

#include "nvmag/parallel.hpp"

#include <algorithm>
#include <string>
#include <cmath>
#include <numbers>

namespace nvmag {

namespace {

void check_region(const OdmrCube &cube, const PixelRect &r) {
  if (r.w <= 0 || r.h <= 0 || r.x < 0 || r.y < 0 || r.x + r.w > cube.width || r.y + r.h > cube.height)
    throw Error(Errc::BadRegion, "region lies outside the image");
}

double mad_sigma(const Eigen::VectorXd &y) {
  if (y.size() < 3)
    return 0.0;
  std::vector<double> d(std::size_t(y.size() - 1));
  for (Eigen::Index k = 0; k + 1 < y.size(); ++k)
    d[std::size_t(k)] = y[k + 1] - y[k];
  auto med = [](std::vector<double> &v) {
    auto mid = v.begin() + std::ptrdiff_t(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
  };
  const double m = med(d);
  for (double &v : d)
    v = std::abs(v - m);
  return 1.4826 * med(d) / std::numbers::sqrt2;
}

/// Orders each pixel's fitted dips by orientation. Pixels are visited
/// breadth-first from the calibration region; each is matched to the mean
/// resonances of its already-labelled neighbours, preferring labellings whose
/// projections (with the bias signs) sum to zero. Sequential, so the result
/// does not depend on the fitting threads.
void label_dips(FrequencyMaps &maps, const BiasCalibration &calib, const FrequencyMapOptions &opts) {
  const int w = maps.width;
  const int h = maps.height;
  std::array<std::array<int, 4>, 24> perms;
  {
    std::array<int, 4> p{0, 1, 2, 3};
    std::size_t k = 0;
    do
      perms[k++] = p;
    while (std::next_permutation(p.begin(), p.end()));
  }
  const Eigen::Vector4d sign = calib.signs.cast<double>();
  const double gamma = opts.consts.gyromagnetic_ratio;
  const double d = opts.consts.zero_field_splitting;

  Mask labelled = Mask::Constant(h, w, false);
  Mask visited = Mask::Constant(h, w, false);
  std::vector<std::pair<int, int>> queue;
  queue.reserve(std::size_t(w) * std::size_t(h));
  const int x0 = std::clamp(calib.region.x + calib.region.w / 2, 0, w - 1);
  const int y0 = std::clamp(calib.region.y + calib.region.h / 2, 0, h - 1);
  queue.emplace_back(x0, y0);
  visited(y0, x0) = true;

  for (std::size_t head = 0; head < queue.size(); ++head) {
    const auto [x, y] = queue[head];
    for (auto [dx, dy] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
      const int xn = x + dx, yn = y + dy;
      if (xn >= 0 && yn >= 0 && xn < w && yn < h && !visited(yn, xn)) {
        visited(yn, xn) = true;
        queue.emplace_back(xn, yn);
      }
    }
    if (!maps.converged(y, x))
      continue;

    Eigen::Vector4d ref = Eigen::Vector4d::Zero();
    int n_ref = 0;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int xn = x + dx, yn = y + dy;
        if (xn < 0 || yn < 0 || xn >= w || yn >= h || !labelled(yn, xn) || !maps.assigned(yn, xn))
          continue;
        for (int i = 0; i < 4; ++i)
          ref[i] += maps.nu[std::size_t(i)](yn, xn);
        ++n_ref;
      }
    ref = n_ref ? Eigen::Vector4d(ref / n_ref) : calib.reference.nu_lower;

    Eigen::Vector4d nu, amp, gam;
    for (int j = 0; j < 4; ++j) {
      nu[j] = maps.nu[std::size_t(j)](y, x);
      amp[j] = maps.amplitude[std::size_t(j)](y, x);
      gam[j] = maps.gamma_hwhm[std::size_t(j)](y, x);
    }

    double best_cost = INFINITY;
    bool best_consistent = false;
    const std::array<int, 4> *best = &perms[0];
    for (const auto &p : perms) {
      double cost = 0, sum = 0;
      for (int i = 0; i < 4; ++i) {
        const double f = nu[p[std::size_t(i)]];
        cost += (f - ref[i]) * (f - ref[i]);
        sum += sign[i] * std::max(0.0, (d - f) / gamma);
      }
      const bool consistent = std::abs(sum) * std::numbers::sqrt3 / 4.0 <= opts.consistency_tolerance;
      if ((consistent && !best_consistent) || (consistent == best_consistent && cost < best_cost)) {
        best_cost = cost;
        best_consistent = consistent;
        best = &p;
      }
    }

    bool separated = true;
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b)
        separated = separated && std::abs(nu[a] - nu[b]) > opts.ambiguity_radius;
    maps.assigned(y, x) = separated;
    labelled(y, x) = true;
    for (int i = 0; i < 4; ++i) {
      const int j = (*best)[std::size_t(i)];
      maps.nu[std::size_t(i)](y, x) = nu[j];
      maps.amplitude[std::size_t(i)](y, x) = amp[j];
      maps.gamma_hwhm[std::size_t(i)](y, x) = gam[j];
    }
  }
}

} // namespace

std::array<int, 4> assign_dips(const Eigen::Vector4d &fitted, const Eigen::Vector4d &reference) {
  std::array<int, 4> out{-1, -1, -1, -1};
  std::array<bool, 4> used{false, false, false, false};
  for (int round = 0; round < 4; ++round) {
    double best = INFINITY;
    int bi = -1, bj = -1;
    for (int i = 0; i < 4; ++i) {
      if (out[std::size_t(i)] >= 0)
        continue;
      for (int j = 0; j < 4; ++j) {
        if (used[std::size_t(j)])
          continue;
        const double cost = std::abs(fitted[j] - reference[i]);
        if (cost < best) {
          best = cost;
          bi = i;
          bj = j;
        }
      }
    }
    out[std::size_t(bi)] = bj;
    used[std::size_t(bj)] = true;
  }
  return out;
}

BiasCalibration calibrate_bias(const OdmrCube &cube, const PixelRect &region,
                               const CalibrationOptions &opts) {
  cube.validate();
  check_region(cube, region);
  if (region.w < 10 || region.h < 10)
    throw Error(Errc::BadRegion, "calibration region must be at least 10x10 pixels");

  const Eigen::VectorXd spectrum = region_mean_spectrum(cube, region.x, region.y, region.w, region.h);
  const Eigen::VectorXd nu = cube.frequency_axis();
  const SpectrumFit fit = fit_spectrum(nu, spectrum, opts.fit);
  // Merged dips leave spare Lorentzians fitting noise: weak or pinned near the
  // linewidth floor. Signs of unresolved orientations cannot be assigned.
  int credible = 0;
  for (int i = 0; i < 4; ++i)
    credible += fit.amplitude[i] >= 0.1 * fit.amplitude.maxCoeff() &&
                fit.gamma_hwhm[i] > 2.0 * opts.fit.gamma_min;
  if (credible < 4)
    throw Error(Errc::AmbiguousSigns, "calibration spectrum resolves only " + std::to_string(credible) +
                                          " of four dips; orientation signs are undetermined");
  if (!fit.converged)
    throw Error(Errc::NotConverged, "calibration spectrum fit did not converge");

  const ResonanceQuad predicted = lower_resonances(opts.nominal_bias, opts.consts, OrientationSet::standard());
  const auto order = assign_dips(fit.nu, predicted.nu_lower);

  BiasCalibration calib;
  calib.region = region;
  for (int i = 0; i < 4; ++i) {
    const int j = order[std::size_t(i)];
    calib.reference.nu_lower[i] = fit.nu[j];
    calib.amplitude[i] = fit.amplitude[j];
    calib.gamma_hwhm[i] = fit.gamma_hwhm[j];
  }
  calib.baseline = fit.baseline;

  const SignResolution signs = resolve_bias_signs(calib.reference, opts.consts, opts.signs);
  calib.signs = signs.quad.signs;
  calib.bias_projection = signs.quad;
  calib.b0 = signs.b;
  calib.sign_residual = signs.residual;
  calib.runner_up_residual = signs.runner_up_residual;
  return calib;
}

double FrequencyMaps::converged_fraction() const {
  if (converged.size() == 0)
    return 0.0;
  return double(converged.count()) / double(converged.size());
}

FrequencyMaps frequency_maps(const OdmrCube &cube, const BiasCalibration &calib,
                             const FrequencyMapOptions &opts) {
  cube.validate();
  const int w = cube.width;
  const int h = cube.height;
  FrequencyMaps maps;
  maps.width = w;
  maps.height = h;
  for (int i = 0; i < 4; ++i) {
    maps.nu[std::size_t(i)] = Image::Constant(h, w, NAN);
    maps.amplitude[std::size_t(i)] = Image::Constant(h, w, NAN);
    maps.gamma_hwhm[std::size_t(i)] = Image::Constant(h, w, NAN);
  }
  maps.baseline = Image::Constant(h, w, NAN);
  maps.rss = Image::Constant(h, w, NAN);
  maps.n_iter = Image::Zero(h, w);
  maps.converged = Mask::Constant(h, w, false);
  maps.assigned = Mask::Constant(h, w, false);

  const Eigen::VectorXd nu = cube.frequency_axis();
  const DipModel calib_model{calib.amplitude, calib.gamma_hwhm, calib.reference.nu_lower};
  const int tile_rows = std::max(1, opts.tile_rows);
  const std::size_t tiles = std::size_t((h + tile_rows - 1) / tile_rows);

  parallel_for(tiles, [&](std::size_t tile) {
    DipModel seed = calib_model;
    double seed_baseline = calib.baseline;
    const int y_begin = int(tile) * tile_rows;
    const int y_end = std::min(h, y_begin + tile_rows);
    for (int y = y_begin; y < y_end; ++y) {
      for (int x = 0; x < w; ++x) {
        const Eigen::VectorXd spectrum = cube.spectrum(x, y);
        if (!spectrum.allFinite())
          continue;

        // An acceptable fit leaves residuals at the noise level.
        const double sigma = mad_sigma(spectrum);
        const double rss_budget = 2.0 * double(spectrum.size()) * sigma * sigma;
        auto good = [&](const SpectrumFit &f) { return f.converged && f.rss <= rss_budget; };
        auto better = [](const SpectrumFit &a, const SpectrumFit &b) {
          if (a.converged != b.converged)
            return a.converged;
          return a.rss < b.rss;
        };

        SpectrumFit fit;
        int iterations = 0;
        if (opts.warm_start) {
          fit = fit_four_lorentzians(nu, spectrum, seed, seed_baseline, opts.fit);
          iterations += fit.n_iter;
        }
        if (!opts.warm_start || !good(fit)) {
          SpectrumFit cand = fit_four_lorentzians(nu, spectrum, calib_model, calib.baseline, opts.fit);
          iterations += cand.n_iter;
          if (!opts.warm_start || better(cand, fit))
            fit = std::move(cand);
          if (!good(fit)) {
            try {
              SpectrumFit cold = fit_spectrum(nu, spectrum, opts.fit, opts.min_separation);
              iterations += cold.n_iter;
              if (better(cold, fit))
                fit = std::move(cold);
            } catch (const Error &) {
              // NoPeaks: keep what we have
            }
          }
        }

        maps.n_iter(y, x) = iterations;
        maps.rss(y, x) = fit.rss;
        maps.baseline(y, x) = fit.baseline;
        if (!fit.converged)
          continue;
        maps.converged(y, x) = true;
        seed = fit.dips();
        seed_baseline = fit.baseline;

        for (int j = 0; j < 4; ++j) {
          maps.nu[std::size_t(j)](y, x) = fit.nu[j];
          maps.amplitude[std::size_t(j)](y, x) = fit.amplitude[j];
          maps.gamma_hwhm[std::size_t(j)](y, x) = fit.gamma_hwhm[j];
        }
      }
    }
  });

  label_dips(maps, calib, opts);
  return maps;
}

double VectorMaps::valid_fraction() const {
  if (valid.size() == 0)
    return 0.0;
  return double(valid.count()) / double(valid.size());
}

VectorMaps vector_maps(const FrequencyMaps &fmaps, const BiasCalibration &calib,
                       const VectorMapOptions &opts) {
  const int w = fmaps.width;
  const int h = fmaps.height;
  VectorMaps vm;
  vm.width = w;
  vm.height = h;
  for (auto &img : vm.b)
    img = Image::Constant(h, w, NAN);
  vm.residual = Image::Constant(h, w, NAN);
  vm.valid = Mask::Constant(h, w, false);
  vm.sign_flip_suspect = Mask::Constant(h, w, false);
  vm.blended = Mask::Constant(h, w, false);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!fmaps.converged(y, x))
        continue;
      ResonanceQuad res;
      for (int i = 0; i < 4; ++i)
        res.nu_lower[i] = fmaps.nu[std::size_t(i)](y, x);
      if (!res.nu_lower.allFinite())
        continue;
      const SignedProjection sp = signed_projections(res, calib.bias_projection, opts.consts);
      const Reconstruction rec = reconstruct_vector(sp.quad);
      FieldVector b = rec.b;
      if (opts.subtract_bias)
        b -= calib.b0;
      for (int k = 0; k < 3; ++k)
        vm.b[std::size_t(k)](y, x) = b[k];
      vm.residual(y, x) = rec.residual;
      vm.sign_flip_suspect(y, x) = !sp.valid();
      bool blended = false;
      for (std::size_t i = 0; i < 4; ++i) {
        const double depth = fmaps.amplitude[i](y, x) / calib.amplitude[int(i)];
        const double width = fmaps.gamma_hwhm[i](y, x) / calib.gamma_hwhm[int(i)];
        blended = blended || !(depth >= opts.min_depth_ratio) || !(width >= opts.min_width_ratio) ||
                  !(width <= opts.max_width_ratio);
      }
      vm.blended(y, x) = blended;
      vm.valid(y, x) =
          fmaps.assigned(y, x) && sp.valid() && !blended && rec.residual <= opts.max_residual;
    }
  }
  return vm;
}

MagnitudeAngle magnitude_and_angle(const VectorMaps &vm, std::optional<double> noise_floor) {
  const int w = vm.width;
  const int h = vm.height;
  MagnitudeAngle out;
  out.magnitude = (vm.b[0].square() + vm.b[1].square() + vm.b[2].square()).sqrt();
  out.angle = Image::Constant(h, w, NAN);
  out.angle_defined = Mask::Constant(h, w, false);
  out.noise_floor = Image::Constant(h, w, noise_floor.value_or(NAN));

  std::vector<double> window;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!vm.valid(y, x))
        continue;
      if (!noise_floor) {
        window.clear();
        for (int yy = std::max(0, y - 2); yy <= std::min(h - 1, y + 2); ++yy)
          for (int xx = std::max(0, x - 2); xx <= std::min(w - 1, x + 2); ++xx)
            if (vm.valid(yy, xx))
              window.push_back(vm.residual(yy, xx));
        auto mid = window.begin() + std::ptrdiff_t(window.size() / 2);
        std::nth_element(window.begin(), mid, window.end());
        out.noise_floor(y, x) = *mid / 0.6745;
      }
      const double bx = vm.b[0](y, x);
      const double by = vm.b[1](y, x);
      if (std::hypot(bx, by) > 3.0 * out.noise_floor(y, x)) {
        out.angle(y, x) = std::atan2(by, bx);
        out.angle_defined(y, x) = true;
      }
    }
  }
  return out;
}

double t2star_from_linewidth(double gamma_fwhm) {
  if (!(gamma_fwhm > 0))
    throw Error(Errc::NonPositive, "linewidth must be positive");
  return 1.0 / (std::numbers::pi * gamma_fwhm);
}

namespace {

// Everything in the sensitivity except 1 / (C sqrt S).
double sensitivity_kernel(double gamma_fwhm, double overhead, const PhysicalConstants &consts) {
  const double t2 = t2star_from_linewidth(gamma_fwhm);
  const double prefactor = 8.0 / (3.0 * std::sqrt(3.0));
  return prefactor * consts.hbar_over_ge_muB * std::sqrt(overhead + t2) / t2;
}

} // namespace

double sensitivity(double contrast, double gamma_fwhm, double counts, double overhead,
                   const PhysicalConstants &consts) {
  if (!(contrast > 0) || !(gamma_fwhm > 0) || !(counts > 0) || !(overhead > 0))
    throw Error(Errc::NonPositive, "sensitivity inputs must be positive");
  return sensitivity_kernel(gamma_fwhm, overhead, consts) / (contrast * std::sqrt(counts));
}

double counts_for_sensitivity(double eta, double contrast, double gamma_fwhm, double overhead,
                              const PhysicalConstants &consts) {
  if (!(eta > 0) || !(contrast > 0) || !(gamma_fwhm > 0) || !(overhead > 0))
    throw Error(Errc::NonPositive, "sensitivity inputs must be positive");
  const double root = sensitivity_kernel(gamma_fwhm, overhead, consts) / (contrast * eta);
  return root * root;
}

std::array<PixelRect, 4> default_corners(int width, int height, int size) {
  const int s = std::min({size, width, height});
  return {PixelRect{0, 0, s, s}, PixelRect{width - s, 0, s, s}, PixelRect{0, height - s, s, s},
          PixelRect{width - s, height - s, s, s}};
}

std::array<SensitivityReport, 4> sensitivity_report(const OdmrCube &cube, const FrequencyMaps &fmaps,
                                                    const std::array<PixelRect, 4> &corners,
                                                    const PhysicalConstants &consts) {
  for (std::size_t a = 0; a < corners.size(); ++a) {
    check_region(cube, corners[a]);
    for (std::size_t b = a + 1; b < corners.size(); ++b) {
      const auto &p = corners[a];
      const auto &q = corners[b];
      const bool overlap = p.x < q.x + q.w && q.x < p.x + p.w && p.y < q.y + q.h && q.y < p.y + p.h;
      if (overlap)
        throw Error(Errc::BadRegion, "corner regions must be disjoint");
    }
  }

  std::array<SensitivityReport, 4> report;
  for (int i = 0; i < 4; ++i) {
    double c_sum = 0, g_sum = 0;
    int n = 0;
    for (const auto &r : corners)
      for (int y = r.y; y < r.y + r.h; ++y)
        for (int x = r.x; x < r.x + r.w; ++x)
          if (fmaps.ok(x, y)) {
            c_sum += fmaps.amplitude[std::size_t(i)](y, x);
            g_sum += fwhm_from_hwhm(fmaps.gamma_hwhm[std::size_t(i)](y, x));
            ++n;
          }
    if (n == 0)
      throw Error(Errc::AllInvalid, "no converged pixels in the corner regions");
    SensitivityReport &s = report[std::size_t(i)];
    s.contrast = c_sum / n;
    s.gamma_fwhm = g_sum / n;
    s.t2star = t2star_from_linewidth(s.gamma_fwhm);
    s.counts = cube.ref_counts_mean;
    s.overhead = cube.schedule.t_laser;
    s.eta = sensitivity(s.contrast, s.gamma_fwhm, s.counts, s.overhead, consts);
  }
  return report;
}

PipelineResult run_pipeline(const OdmrCube &cube, const PixelRect &calibration_region,
                            const PipelineOptions &opts) {
  PipelineResult out;
  out.calibration = calibrate_bias(cube, calibration_region, opts.calibration);
  const OdmrCube averaged = opts.pre_average ? moving_average_3x3(cube) : cube;
  out.frequency = frequency_maps(averaged, out.calibration, opts.frequency);
  out.vector = vector_maps(out.frequency, out.calibration, opts.vector);
  return out;
}

} // namespace nvmag
