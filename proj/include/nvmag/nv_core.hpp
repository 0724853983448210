#pragma once

// NV-axis geometry, linear Zeeman conversion and lab-frame vector
// reconstruction. Everything here is a pure function of its arguments and is
// templated on the scalar type; the double aliases at the bottom are what the
// rest of the library uses.

#include "nvmag/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <utility>
#include <vector>

namespace nvmag {

template <typename Scalar> using Field3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar> using Quad = Eigen::Matrix<Scalar, 4, 1>;
using SignPattern = Eigen::Vector4i;

template <typename Scalar = double> struct PhysicalConstantsT {
  Scalar zero_field_splitting = Scalar(2.87e9);   ///< D, Hz
  Scalar gyromagnetic_ratio = Scalar(28e9);       ///< gamma, Hz/T
  Scalar hbar_over_ge_muB = Scalar(1) / Scalar(1.7608596e11); ///< T*s

  void validate() const {
    const bool ok = zero_field_splitting >= Scalar(2.8e9) &&
                    zero_field_splitting <= Scalar(2.95e9) &&
                    std::abs(gyromagnetic_ratio - Scalar(28e9)) <= Scalar(0.05 * 28e9) &&
                    hbar_over_ge_muB > Scalar(0);
    if (!ok)
      throw Error(Errc::BadDims, "physical constants outside their admissible ranges");
  }

  /// Largest projection magnitude whose lower-branch resonance stays above 0 Hz.
  Scalar max_projection() const { return zero_field_splitting / gyromagnetic_ratio; }
};

/// The four <111> NV axes in the lab frame of a (100)-cut diamond, stored as
/// rows. Row order is [111], [1-1-1], [-11-1], [-1-11].
template <typename Scalar = double> struct OrientationSetT {
  Eigen::Matrix<Scalar, 4, 3> axes;

  static OrientationSetT standard() {
    const Scalar k = Scalar(1) / std::sqrt(Scalar(3));
    OrientationSetT o;
    o.axes << k, k, k,   //
        k, -k, -k,       //
        -k, k, -k,       //
        -k, -k, k;
    return o;
  }

  /// Tetrahedral checks: unit rows, rows summing to zero, pairwise dot -1/3.
  bool is_tetrahedral(Scalar tol = Scalar(1e-12)) const {
    for (int i = 0; i < 4; ++i) {
      if (std::abs(axes.row(i).norm() - Scalar(1)) > tol)
        return false;
      for (int j = i + 1; j < 4; ++j)
        if (std::abs(axes.row(i).dot(axes.row(j)) + Scalar(1) / Scalar(3)) > tol)
          return false;
    }
    return axes.colwise().sum().cwiseAbs().maxCoeff() <= tol;
  }
};

template <typename Scalar = double> struct ProjectionQuadT {
  Quad<Scalar> p = Quad<Scalar>::Zero(); ///< signed projections, tesla
  SignPattern signs = SignPattern::Ones();
};

/// Lower-branch (m_s = -1) resonance per orientation, Hz.
template <typename Scalar = double> struct ResonanceQuadT {
  Quad<Scalar> nu_lower = Quad<Scalar>::Zero();
};

template <typename Scalar = double> struct ReconstructionT {
  Field3<Scalar> b = Field3<Scalar>::Zero();
  Scalar residual = Scalar(0); ///< tesla, part of p no field vector explains
};

template <typename Scalar = double> struct SignedProjectionT {
  ProjectionQuadT<Scalar> quad;
  /// Set where the measured magnitude exceeds twice the bias magnitude on that
  /// axis, i.e. the structure field may have flipped the projection sign.
  std::array<bool, 4> sign_flip_suspect{false, false, false, false};

  bool valid() const {
    return std::none_of(sign_flip_suspect.begin(), sign_flip_suspect.end(),
                        [](bool f) { return f; });
  }
};

template <typename Scalar = double> struct SignCandidateT {
  SignPattern signs;
  Scalar residual; ///< |sum_i s_i m_i|, tesla
  Field3<Scalar> b;
};

template <typename Scalar = double> struct SignResolutionT {
  ProjectionQuadT<Scalar> quad;
  Field3<Scalar> b;
  Scalar residual;
  Scalar runner_up_residual;
};

struct SignResolveOptions {
  double relative_gap = 0.1; ///< best and runner-up must differ by more than this fraction
  double absolute_gap = 0.0; ///< ...and by more than this many tesla
};

/// Raised when no sign pattern is clearly better than the runner-up. Carries
/// both residuals and the full ranking (tie-break order applied).
class AmbiguousSignsError : public Error {
public:
  AmbiguousSignsError(double best, double runner_up,
                      std::vector<SignCandidateT<double>> ranked)
      : Error(Errc::AmbiguousSigns, message(best, runner_up)), best_(best),
        runner_up_(runner_up), ranked_(std::move(ranked)) {}

  double best_residual() const noexcept { return best_; }
  double runner_up_residual() const noexcept { return runner_up_; }
  const std::vector<SignCandidateT<double>> &ranked() const noexcept { return ranked_; }

private:
  static std::string message(double best, double runner_up) {
    std::ostringstream os;
    os << "ambiguous bias sign pattern: best residual " << best
       << " T, runner-up " << runner_up << " T";
    return os.str();
  }

  double best_;
  double runner_up_;
  std::vector<SignCandidateT<double>> ranked_;
};

// ---------------------------------------------------------------------------

template <typename Scalar>
ProjectionQuadT<Scalar> project_field(const Field3<Scalar> &b,
                                      const OrientationSetT<Scalar> &o) {
  ProjectionQuadT<Scalar> q;
  q.p = o.axes * b;
  for (int i = 0; i < 4; ++i)
    q.signs[i] = q.p[i] < Scalar(0) ? -1 : 1;
  return q;
}

template <typename Scalar>
ProjectionQuadT<Scalar> project_field(const Field3<Scalar> &b) {
  return project_field(b, OrientationSetT<Scalar>::standard());
}

/// (nu_minus, nu_plus) for a signed projection; the sign does not enter.
template <typename Scalar>
std::pair<Scalar, Scalar> resonance_pair(Scalar projection,
                                         const PhysicalConstantsT<Scalar> &c) {
  const Scalar shift = c.gyromagnetic_ratio * std::abs(projection);
  if (!(shift < c.zero_field_splitting))
    throw Error(Errc::OutOfBand, "projection pushes the lower resonance below 0 Hz");
  return {c.zero_field_splitting - shift, c.zero_field_splitting + shift};
}

/// B = delta_nu / (2 gamma).
template <typename Scalar>
Scalar field_from_split(Scalar delta_nu, const PhysicalConstantsT<Scalar> &c) {
  if (delta_nu < Scalar(0))
    throw Error(Errc::NegativeSplit, "Zeeman split must be non-negative");
  return delta_nu / (Scalar(2) * c.gyromagnetic_ratio);
}

/// Lower-branch resonances for a field vector (no band check).
template <typename Scalar>
ResonanceQuadT<Scalar> lower_resonances(const Field3<Scalar> &b,
                                        const PhysicalConstantsT<Scalar> &c,
                                        const OrientationSetT<Scalar> &o) {
  ResonanceQuadT<Scalar> r;
  for (int i = 0; i < 4; ++i)
    r.nu_lower[i] = resonance_pair(Scalar(o.axes.row(i).dot(b)), c).first;
  return r;
}

/// Projection magnitudes (D - nu)/gamma, clamped at zero for resonances that
/// sit above D.
template <typename Scalar>
Quad<Scalar> projection_magnitudes(const ResonanceQuadT<Scalar> &res,
                                   const PhysicalConstantsT<Scalar> &c) {
  return ((Quad<Scalar>::Constant(c.zero_field_splitting) - res.nu_lower) /
          c.gyromagnetic_ratio)
      .cwiseMax(Scalar(0));
}

/// Per-pixel projections inheriting the signs of a calibrated bias.
template <typename Scalar>
SignedProjectionT<Scalar> signed_projections(const ResonanceQuadT<Scalar> &res,
                                             const ProjectionQuadT<Scalar> &bias,
                                             const PhysicalConstantsT<Scalar> &c) {
  SignedProjectionT<Scalar> out;
  const Quad<Scalar> m = projection_magnitudes(res, c);
  for (int i = 0; i < 4; ++i) {
    const int s = bias.p[i] < Scalar(0) ? -1 : 1;
    out.quad.signs[i] = s;
    out.quad.p[i] = Scalar(s) * m[i];
    out.sign_flip_suspect[i] = m[i] > Scalar(2) * std::abs(bias.p[i]);
  }
  return out;
}

/// Lab-frame field from the four projections using the standard axes:
/// B = sqrt(3)/4 * S p with the +/- sign matrix of the tetrahedral frame.
template <typename Scalar>
ReconstructionT<Scalar> reconstruct_vector(const ProjectionQuadT<Scalar> &q) {
  const Scalar k = std::sqrt(Scalar(3)) / Scalar(4);
  const Quad<Scalar> &p = q.p;
  ReconstructionT<Scalar> r;
  r.b << k * (p[0] + p[1] - p[2] - p[3]), //
      k * (p[0] - p[1] + p[2] - p[3]),    //
      k * (p[0] - p[1] - p[2] + p[3]);
  r.residual = std::abs(p.sum()) * k;
  return r;
}

/// Same reconstruction for an arbitrary (relabelled) tetrahedral axis set:
/// B = 3/4 A^T p, the exact left inverse of A when A^T A = 4/3 I.
template <typename Scalar>
ReconstructionT<Scalar> reconstruct_vector(const ProjectionQuadT<Scalar> &q,
                                           const OrientationSetT<Scalar> &o) {
  ReconstructionT<Scalar> r;
  r.b = Scalar(0.75) * o.axes.transpose() * q.p;
  r.residual = std::abs(q.p.sum()) * std::sqrt(Scalar(3)) / Scalar(4);
  return r;
}

/// All 16 sign patterns applied to the projection magnitudes, ordered by
/// residual; exact ties prefer s_1 = +1 and then lexicographic order with +
/// before -.
template <typename Scalar>
std::vector<SignCandidateT<Scalar>> rank_sign_patterns(const ResonanceQuadT<Scalar> &res,
                                                       const PhysicalConstantsT<Scalar> &c) {
  const Quad<Scalar> m = projection_magnitudes(res, c);
  std::vector<SignCandidateT<Scalar>> all;
  all.reserve(16);
  // bit k set => s_{k+1} = -1, MSB first, so increasing index is the
  // lexicographic order with + before - and the s_1 = +1 half comes first.
  for (int code = 0; code < 16; ++code) {
    ProjectionQuadT<Scalar> q;
    for (int i = 0; i < 4; ++i) {
      q.signs[i] = (code >> (3 - i)) & 1 ? -1 : 1;
      q.p[i] = Scalar(q.signs[i]) * m[i];
    }
    const auto rec = reconstruct_vector(q);
    all.push_back({q.signs, std::abs(q.p.sum()), rec.b});
  }
  // Sort by residual, then regroup residuals equal up to rounding and order
  // each group by pattern code (the insertion order above).
  std::array<int, 16> order;
  for (int i = 0; i < 16; ++i)
    order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return all[a].residual < all[b].residual; });
  const Scalar tie = std::numeric_limits<Scalar>::epsilon() * Scalar(16) * m.sum();
  for (auto first = order.begin(); first != order.end();) {
    const Scalar base = all[*first].residual;
    auto last = std::find_if(first, order.end(),
                             [&](int k) { return all[k].residual > base + tie; });
    std::sort(first, last);
    first = last;
  }
  std::vector<SignCandidateT<Scalar>> ranked;
  ranked.reserve(16);
  for (int k : order)
    ranked.push_back(all[k]);
  return ranked;
}

/// Global sign recovery for the bias region. The b -> -b symmetry is fixed by
/// the s_1 = +1 convention; the runner-up is the best pattern that is not the
/// global negation of the winner.
template <typename Scalar>
SignResolutionT<Scalar> resolve_bias_signs(const ResonanceQuadT<Scalar> &res,
                                           const PhysicalConstantsT<Scalar> &c,
                                           const SignResolveOptions &opts = {}) {
  const auto ranked = rank_sign_patterns(res, c);
  const auto &best = ranked.front();
  const SignPattern negated = -best.signs;
  const auto runner = std::find_if(ranked.begin() + 1, ranked.end(), [&](const auto &cand) {
    return cand.signs != negated;
  });
  const Scalar r1 = best.residual;
  const Scalar r2 = runner->residual;
  if (r2 - r1 <= std::max(Scalar(opts.relative_gap) * r2, Scalar(opts.absolute_gap))) {
    std::vector<SignCandidateT<double>> payload;
    for (const auto &cand : ranked)
      payload.push_back({cand.signs, double(cand.residual), cand.b.template cast<double>()});
    throw AmbiguousSignsError(double(r1), double(r2), std::move(payload));
  }
  SignResolutionT<Scalar> out;
  out.quad.signs = best.signs;
  out.quad.p = best.signs.template cast<Scalar>().cwiseProduct(projection_magnitudes(res, c));
  out.b = best.b;
  out.residual = r1;
  out.runner_up_residual = r2;
  return out;
}

// Reported linewidths are FWHM; the Lorentzian in the spectral model is
// parameterised by its HWHM. These two are the only place the factor lives.
template <typename Scalar> constexpr Scalar fwhm_from_hwhm(Scalar hwhm) { return Scalar(2) * hwhm; }
template <typename Scalar> constexpr Scalar hwhm_from_fwhm(Scalar fwhm) { return fwhm / Scalar(2); }

using PhysicalConstants = PhysicalConstantsT<double>;
using OrientationSet = OrientationSetT<double>;
using FieldVector = Field3<double>;
using ProjectionQuad = ProjectionQuadT<double>;
using ResonanceQuad = ResonanceQuadT<double>;
using Reconstruction = ReconstructionT<double>;
using SignedProjection = SignedProjectionT<double>;
using SignCandidate = SignCandidateT<double>;
using SignResolution = SignResolutionT<double>;

} // namespace nvmag
