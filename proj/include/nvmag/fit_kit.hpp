#pragma once

// Spatial pre-averaging, per-pixel four-Lorentzian least squares and Rabi
// calibration fits, all on top of one bounded Levenberg-Marquardt driver.

#include "nvmag/spectro_synth.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace nvmag {

struct LmOptions {
  int max_iterations = 200;
  double rss_tolerance = 1e-10;  ///< relative rss decrease on an accepted step
  double step_tolerance = 1e-8;  ///< relative parameter step
  bool record_trace = false;     ///< keep rss after every accepted step
  /// Hold parameters at a bound the gradient pushes against out of the step.
  /// Stops the slow creep along an active bound, but a parameter frozen there
  /// (a dip amplitude at zero, say) cannot come back.
  bool freeze_active_bounds = false;
};

template <int P> struct LmResult {
  Eigen::Matrix<double, P, 1> params = Eigen::Matrix<double, P, 1>::Zero();
  double rss = 0;
  bool converged = false;
  int iterations = 0;
  std::vector<double> rss_trace; ///< initial rss, then one entry per accepted step
};

/// Bounded damped least squares (Marquardt diagonal scaling, box constraints
/// by projection). `eval(x, r, J)` fills residuals r = model - data and the
/// Jacobian. Accepted steps never increase the rss. `typical` gives a
/// per-parameter magnitude for the relative step test.
template <int P, typename Eval>
LmResult<P> levenberg_marquardt(Eval &&eval, Eigen::Matrix<double, P, 1> x,
                                const Eigen::Matrix<double, P, 1> &lower,
                                const Eigen::Matrix<double, P, 1> &upper,
                                const Eigen::Matrix<double, P, 1> &typical,
                                const LmOptions &opts) {
  using Vec = Eigen::Matrix<double, P, 1>;
  using Mat = Eigen::Matrix<double, P, P>;
  using Jac = Eigen::Matrix<double, Eigen::Dynamic, P>;

  auto project = [&](const Vec &v) { return Vec(v.cwiseMax(lower).cwiseMin(upper)); };

  LmResult<P> out;
  x = project(x);
  Eigen::VectorXd r;
  Jac jac;
  eval(x, r, jac);
  double rss = r.squaredNorm();
  if (opts.record_trace)
    out.rss_trace.push_back(rss);

  const double rss_floor = 1e-30 * double(std::max<Eigen::Index>(1, r.size()));
  if (!(rss > rss_floor)) {
    out.params = x;
    out.rss = rss;
    out.converged = std::isfinite(rss);
    return out;
  }

  Mat jtj = jac.transpose() * jac;
  Vec grad = jac.transpose() * r;
  double lambda = 1e-3;
  double grow = 2.0;

  Eigen::VectorXd r_trial;
  Jac jac_trial;
  int it = 0;
  for (; it < opts.max_iterations; ++it) {
    Vec diag = jtj.diagonal().cwiseMax(1e-12 * jtj.diagonal().maxCoeff());
    if (!(diag.maxCoeff() > 0))
      diag.setOnes();
    Mat damped = jtj;
    damped.diagonal() += lambda * diag;
    Vec rhs = -grad;
    for (Eigen::Index i = 0; opts.freeze_active_bounds && i < x.size(); ++i) {
      const bool pinned = (x[i] <= lower[i] && grad[i] > 0) || (x[i] >= upper[i] && grad[i] < 0);
      if (pinned) {
        damped.row(i).setZero();
        damped.col(i).setZero();
        damped(i, i) = 1.0;
        rhs[i] = 0.0;
      }
    }
    const Vec delta = damped.ldlt().solve(rhs);
    const Vec trial = project(x + delta);
    const Vec step = trial - x;

    const bool tiny_step =
        ((step.cwiseAbs().array()) <= opts.step_tolerance * (x.cwiseAbs() + typical).array()).all();
    const bool small_step = tiny_step && lambda <= 1.0;
    if (small_step) {
      out.converged = true;
      break;
    }

    eval(trial, r_trial, jac_trial);
    const double rss_trial = r_trial.squaredNorm();
    if (std::isfinite(rss_trial) && rss_trial < rss) {
      const double predicted = -(step.dot(grad) + 0.5 * step.dot(jtj * step));
      const double rho = predicted > 0 ? (rss - rss_trial) / (2.0 * predicted) : 0.0;
      const double rel = (rss - rss_trial) / rss;
      x = trial;
      rss = rss_trial;
      r.swap(r_trial);
      jac.swap(jac_trial);
      jtj = jac.transpose() * jac;
      grad = jac.transpose() * r;
      if (opts.record_trace)
        out.rss_trace.push_back(rss);
      lambda *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
      grow = 2.0;
      if (rel < opts.rss_tolerance || rss <= rss_floor || small_step) {
        ++it;
        out.converged = true;
        break;
      }
    } else {
      lambda *= grow;
      grow *= 2.0;
      if (lambda > 1e16) {
        // no descent direction left at machine precision
        out.converged = tiny_step;
        break;
      }
    }
  }
  out.params = x;
  out.rss = rss;
  out.iterations = it;
  return out;
}

// ---------------------------------------------------------------------------

using LorentzParams = Eigen::Matrix<double, 13, 1>; ///< [A1..4, G1..4, nu1..4, baseline]
using LorentzJacobian = Eigen::Matrix<double, Eigen::Dynamic, 13>;

LorentzParams pack(const DipModel &d, double baseline);
DipModel unpack(const LorentzParams &x);

/// baseline + sum_i A_i G_i^2 / ((nu - nu_i)^2 + G_i^2) and its analytic
/// Jacobian, in whatever consistent frequency unit the caller uses.
void four_lorentzian(const LorentzParams &x, const Eigen::VectorXd &nu, Eigen::VectorXd &value,
                     LorentzJacobian *jacobian = nullptr);

struct SpectrumFit {
  Eigen::Vector4d amplitude = Eigen::Vector4d::Constant(NAN);
  Eigen::Vector4d gamma_hwhm = Eigen::Vector4d::Constant(NAN); ///< Hz
  Eigen::Vector4d nu = Eigen::Vector4d::Constant(NAN);         ///< Hz
  double baseline = NAN;
  double rss = NAN;
  bool converged = false;
  int n_iter = 0;
  std::vector<double> rss_trace;

  DipModel dips() const { return {amplitude, gamma_hwhm, nu}; }
};

struct InitialGuess {
  DipModel dips;
  double baseline = 0;
  int n_found = 0; ///< dips located from the data; the rest are seeded
};

/// Peak picking on the 5-point running mean of the dip depth. Throws NoPeaks
/// when the deepest point is within 3 sigma of the MAD noise estimate.
InitialGuess initial_guess(const Eigen::VectorXd &nu, const Eigen::VectorXd &contrast,
                           double min_separation = 8e6);

struct FourLorentzOptions {
  LmOptions lm;
  double gamma_min = 0.2e6;
  double gamma_max = 30e6;
  double center_margin = 20e6; ///< centres stay within the sweep +/- this
};

SpectrumFit fit_four_lorentzians(const Eigen::VectorXd &nu, const Eigen::VectorXd &contrast,
                                 const DipModel &guess, double baseline_guess = 0.0,
                                 const FourLorentzOptions &opts = {});

/// initial_guess + fit, with extra starts that split found dips when fewer
/// than four were located. Returns the lowest-rss result.
SpectrumFit fit_spectrum(const Eigen::VectorXd &nu, const Eigen::VectorXd &contrast,
                         const FourLorentzOptions &opts = {}, double min_separation = 8e6);

struct FitQuality {
  double r_squared = 0;
  Eigen::Vector4d per_dip_snr = Eigen::Vector4d::Zero();
};

FitQuality fit_quality(const SpectrumFit &fit, const Eigen::VectorXd &nu,
                       const Eigen::VectorXd &contrast);

/// 3x3 box mean per frequency slice; windows shrink (clamp) at the borders.
OdmrCube moving_average_3x3(const OdmrCube &cube);

/// Mean spectrum over a pixel rectangle.
Eigen::VectorXd region_mean_spectrum(const OdmrCube &cube, int x, int y, int w, int h);

struct RabiFit {
  double t_pi = 0;      ///< s
  double rabi_freq = 0; ///< Hz
  double decay = 0;     ///< s, infinite when no damping is resolved
  double contrast = 0;
  double f0 = 0;
  double rss = 0;
};

RabiFit fit_rabi(const std::vector<RabiSample> &trace, double guess_freq);

} // namespace nvmag
