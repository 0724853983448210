#pragma once

// Inverse pipeline: contrast cube -> resonance maps -> signed projections ->
// lab-frame vector maps -> magnitude / in-plane angle, plus bias calibration
// and shot-noise sensitivity estimates.

#include "nvmag/fit_kit.hpp"
#include "nvmag/nv_core.hpp"
#include "nvmag/spectro_synth.hpp"

#include <Eigen/Dense>

#include <array>
#include <optional>
#include <vector>

namespace nvmag {

/// Row-major height x width images; (y, x) indexing.
using Image = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct PixelRect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
};

/// Bias magnet field of the reference setup, used to label dips by orientation.
inline FieldVector nominal_setup_bias() { return {4.1e-3, 0.72e-3, 1.1e-3}; }

struct BiasCalibration {
  PixelRect region;
  FieldVector b0 = FieldVector::Zero();
  SignPattern signs = SignPattern::Ones();
  ProjectionQuad bias_projection;
  ResonanceQuad reference;          ///< per-orientation lower-branch resonances, Hz
  Eigen::Vector4d amplitude = Eigen::Vector4d::Zero();
  Eigen::Vector4d gamma_hwhm = Eigen::Vector4d::Zero(); ///< Hz
  double baseline = 0;
  double sign_residual = 0;         ///< tesla
  double runner_up_residual = 0;    ///< tesla
};

struct CalibrationOptions {
  /// Approximate bias used only to decide which fitted dip belongs to which
  /// orientation (nearest predicted resonance).
  FieldVector nominal_bias = nominal_setup_bias();
  PhysicalConstants consts;
  SignResolveOptions signs{0.1, 5e-6};
  FourLorentzOptions fit;
};

BiasCalibration calibrate_bias(const OdmrCube &cube, const PixelRect &region,
                               const CalibrationOptions &opts = {});

/// Greedy minimum-distance matching over the 4x4 |fitted - reference| cost.
/// Result[i] is the fitted-dip index assigned to orientation i.
std::array<int, 4> assign_dips(const Eigen::Vector4d &fitted, const Eigen::Vector4d &reference);

struct FrequencyMaps {
  int width = 0;
  int height = 0;
  std::array<Image, 4> nu;         ///< Hz, per orientation
  std::array<Image, 4> amplitude;
  std::array<Image, 4> gamma_hwhm; ///< Hz
  Image baseline;
  Image rss;
  Image n_iter;
  Mask converged;
  Mask assigned; ///< false where two fitted dips are too close to tell apart

  bool ok(int x, int y) const { return converged(y, x) && assigned(y, x); }
  double converged_fraction() const;
};

struct FrequencyMapOptions {
  FourLorentzOptions fit;
  int tile_rows = 8;               ///< warm-start chains never cross tile boundaries
  bool warm_start = true;
  double ambiguity_radius = 2e6;   ///< Hz; closer dips leave the pixel unassigned
  double consistency_tolerance = 100e-6; ///< tesla, projection-sum check when labelling
  PhysicalConstants consts;
  double min_separation = 8e6;     ///< peak picking for cold starts
};

FrequencyMaps frequency_maps(const OdmrCube &cube, const BiasCalibration &calib,
                             const FrequencyMapOptions &opts = {});

struct VectorMaps {
  int width = 0;
  int height = 0;
  std::array<Image, 3> b; ///< bx, by, bz, tesla
  Image residual;         ///< tesla
  Mask valid;
  Mask sign_flip_suspect;
  Mask blended; ///< a dip's depth or width is inconsistent with the calibrated line

  FieldVector at(int x, int y) const { return {b[0](y, x), b[1](y, x), b[2](y, x)}; }
  double valid_fraction() const;
};

struct VectorMapOptions {
  bool subtract_bias = true;
  double max_residual = 100e-6; ///< tesla; larger projection inconsistency invalidates the pixel
  /// Field gradients inside the averaging window smear a dip into a shallow,
  /// broad line whose fitted centre is biased; a line much narrower than the
  /// calibrated one is a noise spike standing in for a merged or missing dip.
  /// Either invalidates the pixel.
  double min_depth_ratio = 0.5;
  double min_width_ratio = 0.5;
  double max_width_ratio = 2.0;
  PhysicalConstants consts;
};

VectorMaps vector_maps(const FrequencyMaps &fmaps, const BiasCalibration &calib,
                       const VectorMapOptions &opts = {});

struct MagnitudeAngle {
  Image magnitude;    ///< tesla
  Image angle;        ///< radians, atan2(by, bx); NaN where undefined
  Mask angle_defined;
  Image noise_floor;  ///< tesla, per pixel
};

/// The in-plane angle is defined only where hypot(bx, by) exceeds 3x the noise
/// floor. Without an explicit floor it is estimated per pixel from the residual
/// map (median over a 5x5 valid neighbourhood / 0.6745).
MagnitudeAngle magnitude_and_angle(const VectorMaps &vm,
                                   std::optional<double> noise_floor = std::nullopt);

// sensitivity ---------------------------------------------------------------

/// T2* = 1 / (pi Gamma_p), Gamma_p the FWHM linewidth.
double t2star_from_linewidth(double gamma_fwhm);

/// Shot-noise-limited pulsed-ODMR sensitivity in T/sqrt(Hz):
/// 8/(3 sqrt 3) * hbar/(g_e mu_B) * 1/(C sqrt S) * sqrt(t_o + T2*) / T2*.
double sensitivity(double contrast, double gamma_fwhm, double counts, double overhead,
                   const PhysicalConstants &consts = {});

/// Counts S that give sensitivity `eta` for the other parameters fixed.
double counts_for_sensitivity(double eta, double contrast, double gamma_fwhm, double overhead,
                              const PhysicalConstants &consts = {});

struct SensitivityReport {
  double contrast = 0;
  double gamma_fwhm = 0; ///< Hz
  double t2star = 0;     ///< s
  double counts = 0;     ///< S
  double overhead = 0;   ///< t_o, s
  double eta = 0;        ///< T/sqrt(Hz)
};

std::array<PixelRect, 4> default_corners(int width, int height, int size = 10);

std::array<SensitivityReport, 4> sensitivity_report(const OdmrCube &cube, const FrequencyMaps &fmaps,
                                                    const std::array<PixelRect, 4> &corners,
                                                    const PhysicalConstants &consts = {});

// end to end -----------------------------------------------------------------

struct PipelineOptions {
  bool pre_average = true;
  CalibrationOptions calibration;
  FrequencyMapOptions frequency;
  VectorMapOptions vector;
};

struct PipelineResult {
  BiasCalibration calibration;
  FrequencyMaps frequency;
  VectorMaps vector;
};

/// moving_average_3x3 -> calibrate_bias (on the raw cube region) ->
/// frequency_maps -> vector_maps.
PipelineResult run_pipeline(const OdmrCube &cube, const PixelRect &calibration_region,
                            const PipelineOptions &opts = {});

} // namespace nvmag
