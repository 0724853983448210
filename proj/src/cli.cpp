#include "nvmag/cli.hpp"

#include "nvmag/error.hpp"
#include "nvmag/field_maps.hpp"
#include "nvmag/fit_kit.hpp"
#include "nvmag/shell_io.hpp"
#include "nvmag/spectro_synth.hpp"
#include "nvmag/stray_field.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <ostream>

namespace nvmag::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised after outputs are written when too many pixels failed to converge.
struct NumericFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<double> parse_list(const std::string &text, std::size_t expected, char sep = ',') {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find(sep, start);
    if (end == std::string::npos)
      end = text.size();
    std::string_view item(text.data() + start, end - start);
    while (!item.empty() && item.front() == ' ')
      item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ')
      item.remove_suffix(1);
    double v = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc{} || ptr != item.data() + item.size())
      throw UsageError("cannot parse '" + text + "' as a list of numbers");
    out.push_back(v);
    start = end + 1;
  }
  if (expected && out.size() != expected)
    throw UsageError("expected " + std::to_string(expected) + " comma-separated values in '" + text + "'");
  return out;
}

FieldVector parse_vector3(const std::string &text) {
  const auto v = parse_list(text, 3);
  return {v[0], v[1], v[2]};
}

PixelRect parse_rect(const std::string &text) {
  const auto v = parse_list(text, 4);
  for (double c : v)
    if (c != std::floor(c))
      throw UsageError("region '" + text + "' must be integers x,y,w,h");
  return {int(v[0]), int(v[1]), int(v[2]), int(v[3])};
}

struct ScheduleFlags {
  ScheduleParams params;

  void add(CLI::App *app) {
    app->add_option("--t-laser", params.t_laser, "laser pulse, s");
    app->add_option("--t-mw", params.t_mw, "MW pi pulse, s");
    app->add_option("--exposure", params.t_exposure, "camera exposure, s");
    app->add_option("--start", params.sweep_start, "sweep start, Hz");
    app->add_option("--stop", params.sweep_stop, "sweep stop, Hz");
    app->add_option("--step", params.sweep_step, "sweep step, Hz");
    app->add_option("--n-avg", params.n_avg, "exposures averaged per point");
  }
};

void write_json(std::ostream &out, const json &doc) { out << doc.dump(2) << '\n'; }

int exit_code_for(Errc code) {
  switch (code) {
  case Errc::NotConverged:
  case Errc::NoPeaks:
  case Errc::AmbiguousSigns:
  case Errc::SingularPoint:
    return kNumeric;
  default:
    return kData;
  }
}

void report(std::ostream &err, std::string_view kind, std::string_view message) {
  err << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

void check_convergence(const FrequencyMaps &maps, double threshold) {
  const double bad = 1.0 - maps.converged_fraction();
  if (bad > threshold) {
    std::ostringstream msg;
    msg << std::setprecision(3) << 100.0 * bad << "% of pixels did not converge (threshold "
        << 100.0 * threshold << "%)";
    throw NumericFailure(msg.str());
  }
}

// subcommands ------------------------------------------------------------------

void cmd_schedule(const ScheduleFlags &flags, std::ostream &out) {
  const PulseSchedule s = build_schedule(flags.params);
  json doc = schedule_to_json(s);
  doc["total_time_min"] = std::round(s.total_time / 60.0 * 100.0) / 100.0;
  write_json(out, doc);
}

struct SimulateFlags {
  std::string scene;
  int state = 1;
  int grid = 0;
  std::string bias = "4.1e-3,0.72e-3,1.1e-3";
  double photons = 1e4;
  std::uint64_t seed = 0;
  std::string out;
  bool noiseless = false;
  bool frame_by_frame = false;
};

void cmd_simulate(const SimulateFlags &f, const ScheduleFlags &sf, std::ostream &out) {
  Scene scene;
  if (!f.scene.empty())
    scene = scene_from_json(read_json_file(f.scene));
  else
    scene = default_cross_scene(f.state);
  if (f.grid > 0) {
    const double fov = scene.grid.pixel_pitch * scene.grid.width_px;
    scene.grid = {f.grid, f.grid, fov / f.grid};
  }
  if (!(f.photons > 0))
    throw UsageError("--photons must be positive");
  const FieldMap field = field_map(scene);
  const PulseSchedule schedule = build_schedule(sf.params);
  NoiseModel noise;
  noise.photons_per_pixel = f.photons;
  noise.seed = f.seed;
  noise.noiseless = f.noiseless;
  noise.frame_by_frame = f.frame_by_frame;
  const OdmrCube cube = synth_cube(field, parse_vector3(f.bias), schedule, noise);
  write_cube(cube, f.out);
  write_json(out, {{"cube", f.out},
                   {"width", cube.width},
                   {"height", cube.height},
                   {"n_freq", cube.n_freq()},
                   {"payload_offset", cube_payload_offset(f.out)}});
}

struct RabiFlags {
  double t_pi = 110e-9;
  bool fit = false;
  std::optional<std::uint64_t> seed;
  double noise = 0.0;
  double contrast = 0.1;
  double t_max = 500e-9;
  int samples = 251;
  std::string trace;
};

std::vector<RabiSample> read_trace_csv(const fs::path &path) {
  std::ifstream is(path);
  if (!is)
    throw Error(Errc::IoError, "cannot open '" + path.string() + "'");
  std::vector<RabiSample> trace;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || !(std::isdigit(static_cast<unsigned char>(line[0])) || line[0] == '-' ||
                          line[0] == '.'))
      continue;
    const auto v = parse_list(line, 2);
    trace.push_back({v[0], v[1]});
  }
  return trace;
}

void cmd_rabi(const RabiFlags &f, std::ostream &out) {
  std::vector<RabiSample> trace;
  if (!f.trace.empty()) {
    trace = read_trace_csv(f.trace);
  } else {
    if (f.samples < 2 || !(f.t_max > 0))
      throw UsageError("--samples must be >= 2 and --t-max positive");
    if (f.noise < 0 || f.noise >= 1)
      throw UsageError("--noise must be in [0, 1)");
    RabiParams p;
    p.t_pi = f.t_pi;
    p.contrast = f.contrast;
    std::optional<std::uint64_t> seed;
    if (f.noise > 0) {
      // relative Poisson noise sigma/mean = 1/sqrt(F0)
      p.f0 = 1.0 / (f.noise * f.noise);
      seed = f.seed.value_or(0);
    }
    std::vector<double> tau(std::size_t(f.samples));
    for (int k = 0; k < f.samples; ++k)
      tau[std::size_t(k)] = f.t_max * k / (f.samples - 1);
    trace = rabi_trace(p, tau, seed);
  }

  if (!f.fit) {
    out << "duration_s,fluorescence\n";
    for (const auto &s : trace)
      out << s.duration << ',' << s.fluorescence << '\n';
    return;
  }
  const RabiFit fit = fit_rabi(trace, 1.0 / (2.0 * f.t_pi));
  write_json(out, {{"t_pi_s", fit.t_pi},
                   {"rabi_freq_hz", fit.rabi_freq},
                   {"contrast", fit.contrast},
                   {"f0", fit.f0},
                   {"decay_s", std::isfinite(fit.decay) ? json(fit.decay) : json(nullptr)},
                   {"rss", fit.rss}});
}

struct CubeFlags {
  std::string cube;
  std::string calib;
  std::string out;
  bool no_average = false;
  double max_unconverged = 0.05;
};

OdmrCube load_for_fit(const CubeFlags &f) {
  const OdmrCube cube = read_cube(f.cube);
  return f.no_average ? cube : moving_average_3x3(cube);
}

void cmd_calibrate(const std::string &cube_path, const std::string &region,
                   const std::string &nominal, std::ostream &out) {
  const OdmrCube cube = read_cube(cube_path);
  const PixelRect rect = region.empty() ? default_corners(cube.width, cube.height)[0] : parse_rect(region);
  CalibrationOptions opts;
  if (!nominal.empty())
    opts.nominal_bias = parse_vector3(nominal);
  write_json(out, calibration_to_json(calibrate_bias(cube, rect, opts)));
}

void cmd_fit(const CubeFlags &f, std::ostream &out) {
  const BiasCalibration calib = calibration_from_json(read_json_file(f.calib));
  const FrequencyMaps maps = frequency_maps(load_for_fit(f), calib);
  const fs::path dir(f.out);
  fs::create_directories(dir);
  write_fits_csv(maps, dir / "fits.csv");
  for (int i = 0; i < 4; ++i)
    write_map_csv(maps.nu[std::size_t(i)], &maps.converged, dir / ("nu_" + std::to_string(i) + ".csv"));
  write_json(out, {{"fits", (dir / "fits.csv").string()},
                   {"converged_fraction", maps.converged_fraction()}});
  check_convergence(maps, f.max_unconverged);
}

void cmd_reconstruct(const CubeFlags &f, const std::string &fits, bool subtract_bias,
                     std::optional<double> noise_floor, std::ostream &out) {
  const BiasCalibration calib = calibration_from_json(read_json_file(f.calib));
  FrequencyMaps maps;
  if (!fits.empty())
    maps = read_fits_csv(fits);
  else
    maps = frequency_maps(load_for_fit(f), calib);
  VectorMapOptions vopts;
  vopts.subtract_bias = subtract_bias;
  const VectorMaps vm = vector_maps(maps, calib, vopts);
  const MagnitudeAngle ma = magnitude_and_angle(vm, noise_floor);

  const fs::path dir(f.out);
  fs::create_directories(dir);
  static constexpr const char *names[3] = {"bx", "by", "bz"};
  for (std::size_t k = 0; k < 3; ++k)
    write_map_csv(vm.b[k], &vm.valid, dir / (std::string(names[k]) + ".csv"));
  write_map_csv(ma.magnitude, &vm.valid, dir / "magnitude.csv");
  const Mask angle_ok = vm.valid && ma.angle_defined;
  write_map_csv(ma.angle, &angle_ok, dir / "angle.csv");
  write_map_csv(vm.residual, nullptr, dir / "residual.csv");
  write_vector_csv(vm, dir / "vector.csv");
  write_json(out, {{"out", dir.string()},
                   {"converged_fraction", maps.converged_fraction()},
                   {"valid_fraction", vm.valid_fraction()}});
  check_convergence(maps, f.max_unconverged);
}

std::array<PixelRect, 4> parse_corners(const std::string &text, int w, int h) {
  if (text.empty())
    return default_corners(w, h);
  std::array<PixelRect, 4> out;
  std::size_t start = 0;
  for (int i = 0; i < 4; ++i) {
    const std::size_t end = text.find(';', start);
    if ((end == std::string::npos) != (i == 3))
      throw UsageError("--corners takes four x,y,w,h rectangles separated by ';'");
    out[std::size_t(i)] = parse_rect(text.substr(start, end == std::string::npos ? end : end - start));
    start = end + 1;
  }
  return out;
}

void cmd_sensitivity(const std::string &cube_path, const std::string &fits, const std::string &corners,
                     std::ostream &out) {
  const OdmrCube cube = read_cube(cube_path);
  const FrequencyMaps maps = read_fits_csv(fits);
  if (maps.width != cube.width || maps.height != cube.height)
    throw Error(Errc::BadDims, "fits table and cube have different dimensions");
  write_json(out, sensitivity_to_json(
                      sensitivity_report(cube, maps, parse_corners(corners, cube.width, cube.height))));
}

void cmd_render(const std::string &map, const std::string &out_path, const std::string &clip,
                const std::string &unit, std::ostream &out) {
  RenderOptions opts;
  if (!clip.empty()) {
    const auto v = parse_list(clip, 2);
    if (!(v[0] >= 0 && v[0] < v[1] && v[1] <= 100))
      throw UsageError("--clip must be low,high percentiles with 0 <= low < high <= 100");
    opts.clip_low = v[0];
    opts.clip_high = v[1];
  }
  opts.unit = unit;
  const RenderSidecar side = render_map(read_map_csv(map), out_path, opts);
  write_json(out, {{"pgm", out_path}, {"min", side.min}, {"max", side.max}, {"unit", side.unit}});
}

} // namespace

int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
  CLI::App app{"Widefield NV magnetometry: simulate, fit and reconstruct pulsed-ODMR cubes", "nvmag"};
  app.require_subcommand(1);

  ScheduleFlags sched;
  auto *schedule = app.add_subcommand("schedule", "print the pulse schedule for a sweep");
  sched.add(schedule);

  SimulateFlags sim;
  ScheduleFlags sim_sched;
  auto *simulate = app.add_subcommand("simulate", "forward model a scene into a contrast cube");
  simulate->add_option("--scene", sim.scene, "scene JSON (default: crossed ellipses)");
  simulate->add_option("--state", sim.state, "remanent state 1-4 of the default scene");
  simulate->add_option("--grid", sim.grid, "resample to an N x N grid over the same field of view");
  simulate->add_option("--bias", sim.bias, "bias field bx,by,bz in tesla");
  simulate->add_option("--photons", sim.photons, "mean reference counts per pixel per exposure");
  simulate->add_option("--seed", sim.seed, "noise seed");
  simulate->add_option("--out", sim.out, "output cube")->required();
  simulate->add_flag("--noiseless", sim.noiseless, "write expected contrast without noise");
  simulate->add_flag("--frame-by-frame", sim.frame_by_frame, "draw every exposure separately");
  sim_sched.add(simulate);

  RabiFlags rabi;
  auto *rabi_cmd = app.add_subcommand("rabi", "synthesize and/or fit a Rabi trace");
  rabi_cmd->add_option("--t-pi", rabi.t_pi, "pi-pulse duration, s (synthesis and fit seed)");
  rabi_cmd->add_flag("--fit", rabi.fit, "fit the trace and print t_pi");
  rabi_cmd->add_option("--seed", rabi.seed, "noise seed");
  rabi_cmd->add_option("--noise", rabi.noise, "relative Poisson noise, e.g. 0.05");
  rabi_cmd->add_option("--contrast", rabi.contrast, "full-inversion fluorescence drop");
  rabi_cmd->add_option("--t-max", rabi.t_max, "longest MW pulse, s");
  rabi_cmd->add_option("--samples", rabi.samples, "number of pulse durations");
  rabi_cmd->add_option("--trace", rabi.trace, "fit a duration_s,fluorescence CSV instead of synthesizing");

  std::string cal_cube, cal_region, cal_nominal;
  auto *calibrate = app.add_subcommand("calibrate", "fit the bias field in a sample-free region");
  calibrate->add_option("--cube", cal_cube, "input cube")->required();
  calibrate->add_option("--region", cal_region, "x,y,w,h (default: 10x10 top-left corner)");
  calibrate->add_option("--nominal-bias", cal_nominal, "approximate bias bx,by,bz for dip labelling");

  CubeFlags fitf;
  auto *fit = app.add_subcommand("fit", "per-pixel four-Lorentzian fits");
  fit->add_option("--cube", fitf.cube, "input cube")->required();
  fit->add_option("--calib", fitf.calib, "calibration JSON")->required();
  fit->add_option("--out", fitf.out, "output directory")->required();
  fit->add_flag("--no-average", fitf.no_average, "skip 3x3 spatial averaging");
  fit->add_option("--max-unconverged", fitf.max_unconverged, "tolerated unconverged pixel fraction");

  CubeFlags recf;
  std::string rec_fits;
  bool subtract_bias = false;
  std::optional<double> noise_floor;
  auto *reconstruct = app.add_subcommand("reconstruct", "vector, magnitude and angle maps");
  reconstruct->add_option("--cube", recf.cube, "input cube");
  reconstruct->add_option("--fits", rec_fits, "reuse a fits.csv instead of refitting");
  reconstruct->add_option("--calib", recf.calib, "calibration JSON")->required();
  reconstruct->add_option("--out", recf.out, "output directory")->required();
  reconstruct->add_flag("--subtract-bias", subtract_bias, "report the sample field only");
  reconstruct->add_flag("--no-average", recf.no_average, "skip 3x3 spatial averaging");
  reconstruct->add_option("--noise-floor", noise_floor, "angle noise floor, tesla");
  reconstruct->add_option("--max-unconverged", recf.max_unconverged, "tolerated unconverged pixel fraction");

  std::string sens_cube, sens_fits, sens_corners;
  auto *sens = app.add_subcommand("sensitivity", "shot-noise sensitivity from corner regions");
  sens->add_option("--cube", sens_cube, "input cube")->required();
  sens->add_option("--fits", sens_fits, "fits.csv from `fit`")->required();
  sens->add_option("--corners", sens_corners, "four x,y,w,h rectangles separated by ';'");

  std::string render_in, render_out, render_clip, render_unit = "T";
  auto *render = app.add_subcommand("render", "16-bit PGM render of a CSV map");
  render->add_option("--map", render_in, "x,y,value CSV")->required();
  render->add_option("--out", render_out, "output PGM")->required();
  render->add_option("--clip", render_clip, "low,high percentiles (default 1,99)");
  render->add_option("--unit", render_unit, "unit recorded in the sidecar");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp &) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp &) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError &e) {
    report(err, "Usage", e.what());
    return kUsage;
  }

  try {
    if (schedule->parsed())
      cmd_schedule(sched, out);
    else if (simulate->parsed())
      cmd_simulate(sim, sim_sched, out);
    else if (rabi_cmd->parsed())
      cmd_rabi(rabi, out);
    else if (calibrate->parsed())
      cmd_calibrate(cal_cube, cal_region, cal_nominal, out);
    else if (fit->parsed())
      cmd_fit(fitf, out);
    else if (reconstruct->parsed()) {
      if (recf.cube.empty() && rec_fits.empty())
        throw UsageError("reconstruct needs --cube or --fits");
      cmd_reconstruct(recf, rec_fits, subtract_bias, noise_floor, out);
    } else if (sens->parsed())
      cmd_sensitivity(sens_cube, sens_fits, sens_corners, out);
    else if (render->parsed())
      cmd_render(render_in, render_out, render_clip, render_unit, out);
  } catch (const UsageError &e) {
    report(err, "Usage", e.what());
    return kUsage;
  } catch (const NumericFailure &e) {
    report(err, "NotConverged", e.what());
    return kNumeric;
  } catch (const Error &e) {
    report(err, to_string(e.code()), e.what());
    return exit_code_for(e.code());
  } catch (const fs::filesystem_error &e) {
    report(err, "IoError", e.what());
    return kData;
  } catch (const std::exception &e) {
    report(err, "Internal", e.what());
    return kData;
  }
  return kOk;
}

} // namespace nvmag::cli
