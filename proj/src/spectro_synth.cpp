#include "nvmag/spectro_synth.hpp"

#include "nvmag/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>

namespace nvmag {

namespace {

// floor() that tolerates quotients a few ulps below an integer.
int robust_floor(double x) { return static_cast<int>(std::floor(x * (1.0 + 1e-12) + 1e-12)); }

} // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 applied twice so neighbouring (seed, index) pairs decorrelate
  auto splitmix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return splitmix(splitmix(seed) ^ (index + 0x632be59bd9b4e019ULL));
}

std::vector<double> PulseSchedule::frequencies() const {
  std::vector<double> f(static_cast<std::size_t>(n_points));
  for (int k = 0; k < n_points; ++k)
    f[std::size_t(k)] = sweep_start + k * sweep_step;
  return f;
}

PulseSchedule build_schedule(const ScheduleParams &p) {
  if (!(p.t_laser > 0) || !(p.t_mw > 0) || !(p.t_exposure > 0) || p.n_avg <= 0)
    throw Error(Errc::BadTiming, "pulse durations and averages must be positive");
  if (p.t_exposure < (p.t_laser + p.t_mw) * (1 - 1e-12))
    throw Error(Errc::BadTiming, "exposure shorter than one laser + MW sequence");
  if (!(p.sweep_step > 0) || !(p.sweep_stop >= p.sweep_start) || !(p.sweep_start > 0))
    throw Error(Errc::BadSweep, "sweep needs start > 0, stop >= start and step > 0");

  PulseSchedule s;
  s.t_laser = p.t_laser;
  s.t_mw = p.t_mw;
  s.t_exposure = p.t_exposure;
  s.n_r = std::max(1, robust_floor(p.t_exposure / (p.t_laser + p.t_mw)));
  s.sweep_start = p.sweep_start;
  s.sweep_stop = p.sweep_stop;
  s.sweep_step = p.sweep_step;
  s.n_points = robust_floor((p.sweep_stop - p.sweep_start) / p.sweep_step) + 1;
  s.n_avg = p.n_avg;
  s.total_time = double(s.n_points) * 2.0 * double(s.n_avg) * s.t_exposure;
  return s;
}

nlohmann::json schedule_to_json(const PulseSchedule &s) {
  return {{"t_laser_s", s.t_laser},         {"t_mw_s", s.t_mw},
          {"t_exposure_s", s.t_exposure},   {"n_r", s.n_r},
          {"sweep_start_hz", s.sweep_start}, {"sweep_stop_hz", s.sweep_stop},
          {"sweep_step_hz", s.sweep_step},  {"n_points", s.n_points},
          {"n_avg", s.n_avg},               {"total_time_s", s.total_time}};
}

PulseSchedule schedule_from_json(const nlohmann::json &doc) {
  PulseSchedule s;
  s.t_laser = doc.at("t_laser_s").get<double>();
  s.t_mw = doc.at("t_mw_s").get<double>();
  s.t_exposure = doc.at("t_exposure_s").get<double>();
  s.n_r = doc.at("n_r").get<int>();
  s.sweep_start = doc.at("sweep_start_hz").get<double>();
  s.sweep_stop = doc.at("sweep_stop_hz").get<double>();
  s.sweep_step = doc.at("sweep_step_hz").get<double>();
  s.n_points = doc.at("n_points").get<int>();
  s.n_avg = doc.at("n_avg").get<int>();
  s.total_time = doc.at("total_time_s").get<double>();
  return s;
}

Eigen::VectorXd OdmrCube::spectrum(int x, int y) const {
  Eigen::VectorXd s(static_cast<Eigen::Index>(n_freq()));
  for (std::size_t f = 0; f < n_freq(); ++f)
    s[Eigen::Index(f)] = at(f, x, y);
  return s;
}

void OdmrCube::validate() const {
  if (width <= 0 || height <= 0 || frequencies.empty())
    throw Error(Errc::BadDims, "cube dimensions must be positive");
  if (contrast.size() != plane() * n_freq())
    throw Error(Errc::BadDims, "contrast payload does not match cube dimensions");
  for (std::size_t k = 1; k < frequencies.size(); ++k)
    if (!(frequencies[k] > frequencies[k - 1]))
      throw Error(Errc::BadDims, "frequency axis must be strictly increasing");
}

double spectrum_model(const DipModel &d, double nu) {
  double depth = 0;
  for (int i = 0; i < 4; ++i) {
    const double g2 = d.hwhm[i] * d.hwhm[i];
    const double dn = nu - d.center[i];
    depth += d.amplitude[i] * g2 / (dn * dn + g2);
  }
  return depth;
}

DipPrediction dips_from_field(const FieldVector &b_total, const PulseSchedule &schedule,
                              const ContrastProfile &profile, const PhysicalConstants &consts,
                              const OrientationSet &axes) {
  DipPrediction out;
  out.model.amplitude = profile.amplitude;
  for (int i = 0; i < 4; ++i)
    out.model.hwhm[i] = hwhm_from_fwhm(profile.fwhm[i]);
  const ResonanceQuad res = lower_resonances(b_total, consts, axes);
  out.model.center = res.nu_lower;
  for (int i = 0; i < 4; ++i) {
    const double nu = res.nu_lower[i];
    out.out_of_sweep[std::size_t(i)] =
        !(nu > schedule.sweep_start - 5.0 * out.model.hwhm[i] && nu < schedule.sweep_stop);
  }
  return out;
}

OdmrCube synth_cube(const FieldMap &field, const FieldVector &bias, const PulseSchedule &schedule,
                    const NoiseModel &noise, const SynthOptions &opts) {
  if (field.width_px <= 0 || field.height_px <= 0 ||
      field.data.cols() != Eigen::Index(field.width_px) * field.height_px)
    throw Error(Errc::BadDims, "field map is empty or inconsistent");
  if ((opts.expected_width && opts.expected_width != field.width_px) ||
      (opts.expected_height && opts.expected_height != field.height_px))
    throw Error(Errc::BadDims, "field map grid does not match requested cube dimensions");
  if (!noise.noiseless && !(noise.photons_per_pixel > 0))
    throw Error(Errc::BadDims, "photons_per_pixel must be positive");

  OdmrCube cube;
  cube.width = field.width_px;
  cube.height = field.height_px;
  cube.frequencies = schedule.frequencies();
  cube.schedule = schedule;
  cube.ref_counts_mean = noise.photons_per_pixel;
  if (!noise.noiseless)
    cube.rng_seed = noise.seed;
  cube.contrast.assign(cube.plane() * cube.n_freq(), 0.0f);

  const double lambda = noise.photons_per_pixel * schedule.n_avg;
  const std::size_t n_pixels = cube.plane();
  parallel_for(n_pixels, [&](std::size_t pixel) {
    const int x = int(pixel % std::size_t(cube.width));
    const int y = int(pixel / std::size_t(cube.width));
    DipModel dips = dips_from_field(bias + field.data.col(Eigen::Index(pixel)), schedule, opts.profile,
                                    opts.consts, opts.axes)
                        .model;
    if (opts.modulation)
      dips = opts.modulation(x, y, dips);

    std::mt19937_64 rng(mix_seed(noise.seed, pixel));
    auto draw = [&](double mean) -> double {
      if (noise.frame_by_frame) {
        const double per_frame = mean / schedule.n_avg;
        double total = 0;
        for (int k = 0; k < schedule.n_avg; ++k)
          total += double(std::poisson_distribution<long long>(per_frame)(rng));
        return total;
      }
      return double(std::poisson_distribution<long long>(mean)(rng));
    };

    for (std::size_t f = 0; f < cube.n_freq(); ++f) {
      const double dip = spectrum_model(dips, cube.frequencies[f]);
      double c = dip;
      if (!noise.noiseless) {
        const double reference = draw(lambda);
        const double signal = draw(lambda * std::max(0.0, 1.0 - dip));
        c = reference > 0 ? 1.0 - signal / reference : 0.0;
      }
      cube.contrast[f * n_pixels + pixel] = static_cast<float>(c);
    }
  });
  return cube;
}

OdmrCube mirror_half_spectrum(const OdmrCube &cube, const PhysicalConstants &consts) {
  cube.validate();
  const double d = consts.zero_field_splitting;
  const double below = d - cube.frequencies.front();
  const double above = cube.frequencies.back() - d;
  if (above > 0 && above >= below)
    throw Error(Errc::AlreadyMirrored, "spectrum already extends symmetrically past D");

  // frequency -> (source index, mirrored?) ; measured points are inserted first
  // and win on collisions. Keys are rounded to 1 mHz to merge float jitter.
  std::map<long long, std::pair<std::size_t, double>> axis;
  auto key = [](double nu) { return std::llround(nu * 1e3); };
  for (std::size_t f = 0; f < cube.n_freq(); ++f)
    axis.emplace(key(cube.frequencies[f]), std::pair{f, cube.frequencies[f]});
  for (std::size_t f = 0; f < cube.n_freq(); ++f) {
    if (cube.frequencies[f] < d) {
      const double nu = 2.0 * d - cube.frequencies[f];
      axis.emplace(key(nu), std::pair{f, nu});
    }
  }

  OdmrCube out = cube;
  out.frequencies.clear();
  out.contrast.assign(cube.plane() * axis.size(), 0.0f);
  std::size_t g = 0;
  for (const auto &[k, entry] : axis) {
    out.frequencies.push_back(entry.second);
    std::copy_n(cube.contrast.begin() + std::ptrdiff_t(entry.first * cube.plane()), cube.plane(),
                out.contrast.begin() + std::ptrdiff_t(g * cube.plane()));
    ++g;
  }
  return out;
}

std::vector<RabiSample> rabi_trace(const RabiParams &params, std::span<const double> durations,
                                   std::optional<std::uint64_t> poisson_seed) {
  for (std::size_t k = 0; k < durations.size(); ++k) {
    if (durations[k] < 0 || (k > 0 && durations[k] < durations[k - 1]))
      throw Error(Errc::BadTiming, "Rabi durations must be non-negative and sorted");
  }
  std::vector<RabiSample> trace;
  trace.reserve(durations.size());
  std::mt19937_64 rng(mix_seed(poisson_seed.value_or(0), 0x7261626900ULL));
  for (double tau : durations) {
    const double envelope = std::isinf(params.decay) ? 1.0 : std::exp(-tau / params.decay);
    const double osc = std::cos(std::numbers::pi * tau / params.t_pi) * envelope;
    double value = params.f0 * (1.0 - 0.5 * params.contrast * (1.0 - osc));
    if (poisson_seed)
      value = double(std::poisson_distribution<long long>(value)(rng));
    trace.push_back({tau, value});
  }
  return trace;
}

} // namespace nvmag
