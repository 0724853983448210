#pragma once

// Pulse-schedule arithmetic and synthetic pulsed-ODMR acquisition: contrast
// cubes with camera shot noise, half-spectrum mirroring and Rabi traces.

#include "nvmag/nv_core.hpp"
#include "nvmag/stray_field.hpp"

#include "json.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace nvmag {

struct ScheduleParams {
  double t_laser = 50e-6;    ///< initialization + readout pulse, s
  double t_mw = 110e-9;      ///< pi pulse, s
  double t_exposure = 20e-3; ///< camera exposure, s
  double sweep_start = 2.65e9;
  double sweep_stop = 2.88e9;
  double sweep_step = 1e6;
  int n_avg = 30;
};

struct PulseSchedule {
  double t_laser = 0;
  double t_mw = 0;
  double t_exposure = 0;
  int n_r = 0; ///< laser+MW repetitions per exposure, floor(t_exposure / (t_laser + t_mw))
  double sweep_start = 0;
  double sweep_stop = 0;
  double sweep_step = 0;
  int n_points = 0;
  int n_avg = 0;
  double total_time = 0; ///< n_points * 2 (signal + reference) * n_avg * t_exposure, s

  std::vector<double> frequencies() const;
};

PulseSchedule build_schedule(const ScheduleParams &params = {});
nlohmann::json schedule_to_json(const PulseSchedule &s);
PulseSchedule schedule_from_json(const nlohmann::json &doc);

/// Contrast cube, C = 1 - signal / reference, stored float32 in the same
/// frequency-major layout as the cube file: index = f*H*W + y*W + x.
struct OdmrCube {
  int width = 0;
  int height = 0;
  std::vector<double> frequencies; ///< Hz, strictly increasing
  std::vector<float> contrast;
  double ref_counts_mean = 0; ///< mean reference counts per pixel per exposure
  PulseSchedule schedule;
  std::optional<std::uint64_t> rng_seed;

  std::size_t n_freq() const { return frequencies.size(); }
  std::size_t plane() const { return std::size_t(width) * std::size_t(height); }
  float &at(std::size_t f, int x, int y) { return contrast[f * plane() + std::size_t(y) * width + x]; }
  float at(std::size_t f, int x, int y) const { return contrast[f * plane() + std::size_t(y) * width + x]; }
  Eigen::VectorXd spectrum(int x, int y) const;
  Eigen::Map<const Eigen::VectorXd> frequency_axis() const {
    return {frequencies.data(), Eigen::Index(frequencies.size())};
  }

  void validate() const;
};

/// Four-dip spectral model parameters. Linewidths are HWHM.
struct DipModel {
  Eigen::Vector4d amplitude = Eigen::Vector4d::Zero();
  Eigen::Vector4d hwhm = Eigen::Vector4d::Constant(2.5e6);
  Eigen::Vector4d center = Eigen::Vector4d::Zero();
};

/// Per-orientation dip amplitude and FWHM; defaults are the measured corner
/// averages for [111], [1-1-1], [-11-1], [-1-11].
struct ContrastProfile {
  Eigen::Vector4d amplitude{1.138e-2, 0.868e-2, 0.458e-2, 0.677e-2};
  Eigen::Vector4d fwhm{4.942e6, 5.312e6, 4.961e6, 5.169e6};
};

/// Dip depth sum_i A_i G_i^2 / ((nu - nu_i)^2 + G_i^2).
double spectrum_model(const DipModel &d, double nu);

struct DipPrediction {
  DipModel model;
  std::array<bool, 4> out_of_sweep{false, false, false, false};
};

DipPrediction dips_from_field(const FieldVector &b_total, const PulseSchedule &schedule,
                              const ContrastProfile &profile = {},
                              const PhysicalConstants &consts = {},
                              const OrientationSet &axes = OrientationSet::standard());

struct NoiseModel {
  double photons_per_pixel = 1.0e4; ///< mean reference counts per exposure
  std::uint64_t seed = 0;
  bool noiseless = false;      ///< counts replaced by their means
  bool frame_by_frame = false; ///< draw each of the n_avg exposures separately
};

struct SynthOptions {
  ContrastProfile profile;
  PhysicalConstants consts;
  OrientationSet axes = OrientationSet::standard();
  /// Optional per-pixel override of the dip model (e.g. spatially varying contrast).
  std::function<DipModel(int x, int y, const DipModel &)> modulation;
  int expected_width = 0; ///< 0 -> take from the field map
  int expected_height = 0;
};

/// Per-pixel noise streams are derived from (seed, pixel index), so output is
/// independent of thread count and scheduling.
OdmrCube synth_cube(const FieldMap &field, const FieldVector &bias, const PulseSchedule &schedule,
                    const NoiseModel &noise, const SynthOptions &opts = {});

/// Completes a half spectrum swept up to about D by appending 2D - nu for every
/// nu < D. Measured points win where a mirrored point lands on one. Throws
/// AlreadyMirrored when the input already extends at least as far above D as
/// below it.
OdmrCube mirror_half_spectrum(const OdmrCube &cube, const PhysicalConstants &consts = {});

struct RabiParams {
  double f0 = 1.0;       ///< fluorescence without MW (counts when noisy)
  double contrast = 0.1; ///< full-inversion fluorescence drop
  double t_pi = 110e-9;  ///< s; Rabi frequency is 1 / (2 t_pi)
  double decay = std::numeric_limits<double>::infinity(); ///< s
};

struct RabiSample {
  double duration;
  double fluorescence;
};

/// F(tau) = F0 (1 - c/2 (1 - cos(pi tau / t_pi) exp(-tau / decay))). With
/// `poisson_seed` set, each sample is replaced by a Poisson draw of that mean.
std::vector<RabiSample> rabi_trace(const RabiParams &params, std::span<const double> durations,
                                   std::optional<std::uint64_t> poisson_seed = std::nullopt);

/// Stateless 64-bit mixer used to derive independent per-item seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

} // namespace nvmag
