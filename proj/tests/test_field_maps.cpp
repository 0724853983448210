#include "nvmag/field_maps.hpp"

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

using namespace nvmag;

namespace {

const FieldVector kBias = nominal_setup_bias();

template <typename F> void expect_error(Errc code, F &&f) {
  try {
    f();
    FAIL("expected " << to_string(code));
  } catch (const Error &e) {
    CHECK(e.code() == code);
  }
}

FieldMap uniform(int w, int h, const FieldVector &b = FieldVector::Zero()) {
  FieldMap m;
  m.width_px = w;
  m.height_px = h;
  m.pixel_pitch = 1e-6;
  m.data = b.replicate(1, Eigen::Index(w) * h);
  return m;
}

OdmrCube cube_of(const FieldMap &field, std::optional<std::uint64_t> seed, double photons = 1e4) {
  NoiseModel nm;
  nm.photons_per_pixel = photons;
  nm.noiseless = !seed;
  nm.seed = seed.value_or(0);
  return synth_cube(field, kBias, build_schedule(), nm);
}

double median(std::vector<double> v) {
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(v.size() / 2), v.end());
  return v[v.size() / 2];
}

} // namespace

TEST_CASE("calibrate_bias") {
  SUBCASE("uniform bias, no structure") {
    const OdmrCube cube = cube_of(uniform(12, 12), 21);
    const BiasCalibration c = calibrate_bias(cube, {1, 1, 10, 10});
    CHECK((c.b0 - kBias).cwiseAbs().maxCoeff() < 5e-6);
    CHECK(c.signs == SignPattern(1, 1, -1, -1));
    const Eigen::Vector4d want(2774.30e6, 2833.14e6, 2797.58e6, 2809.86e6);
    CHECK((c.reference.nu_lower - want).cwiseAbs().maxCoeff() < 0.3e6);
    CHECK(c.amplitude[0] == doctest::Approx(1.138e-2).epsilon(0.05));
    CHECK(c.runner_up_residual > 10 * c.sign_residual);
  }
  SUBCASE("noiseless calibration is exact") {
    const BiasCalibration c = calibrate_bias(cube_of(uniform(10, 10), std::nullopt), {0, 0, 10, 10});
    CHECK((c.b0 - kBias).norm() < 1e-8);
  }
  SUBCASE("zero field merges all dips") {
    NoiseModel nm;
    nm.seed = 4;
    const OdmrCube cube = synth_cube(uniform(10, 10), FieldVector::Zero(), build_schedule(), nm);
    expect_error(Errc::AmbiguousSigns, [&] { calibrate_bias(cube, {0, 0, 10, 10}); });
  }
  SUBCASE("region checks") {
    const OdmrCube cube = cube_of(uniform(12, 12), std::nullopt);
    expect_error(Errc::BadRegion, [&] { calibrate_bias(cube, {0, 0, 9, 10}); });
    expect_error(Errc::BadRegion, [&] { calibrate_bias(cube, {5, 5, 10, 10}); });
  }
  SUBCASE("crossed-ellipse scene: corner region tracks bias plus the local sample field") {
    Scene scene = default_cross_scene(1);
    const double fov = scene.grid.pixel_pitch * scene.grid.width_px;
    scene.grid = {64, 64, fov / 64};
    const FieldMap field = field_map(scene);
    FieldVector corner = FieldVector::Zero();
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 10; ++x)
        corner += field.at(x, y) / 100.0;
    MESSAGE("mean sample field over the calibration corner: " << corner.transpose() * 1e6 << " uT");
    const BiasCalibration c = calibrate_bias(cube_of(field, 3), {0, 0, 10, 10});
    CHECK((c.b0 - (kBias + corner)).cwiseAbs().maxCoeff() < 10e-6);
  }
}

TEST_CASE("assign_dips is a bijection for separated dips") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(2.65e9, 2.88e9);
  for (int trial = 0; trial < 2000; ++trial) {
    Eigen::Vector4d fitted, ref;
    for (Eigen::Vector4d *v : {&fitted, &ref}) {
      do {
        for (int i = 0; i < 4; ++i)
          (*v)[i] = u(rng);
      } while ([&] {
        for (int i = 0; i < 4; ++i)
          for (int j = i + 1; j < 4; ++j)
            if (std::abs((*v)[i] - (*v)[j]) <= 4e6)
              return true;
        return false;
      }());
    }
    const auto a = assign_dips(fitted, ref);
    const std::set<int> used(a.begin(), a.end());
    REQUIRE(used.size() == 4);
    REQUIRE(*used.begin() == 0);
    REQUIRE(*used.rbegin() == 3);
  }
  const auto id = assign_dips({1, 2, 3, 4}, {4.1, 2.9, 1.2, 2.2});
  CHECK(id == std::array<int, 4>{3, 2, 0, 1});
}

TEST_CASE("frequency_maps") {
  const BiasCalibration calib = calibrate_bias(cube_of(uniform(10, 10), std::nullopt), {0, 0, 10, 10});

  SUBCASE("uniform bias: maps flat within twice the Monte-Carlo scatter") {
    // reference scatter from independent 3x3-averaged single pixels
    std::array<std::vector<double>, 4> mc;
    for (int r = 0; r < 40; ++r) {
      const OdmrCube avg = moving_average_3x3(cube_of(uniform(3, 3), std::uint64_t(500 + r)));
      const FrequencyMaps m = frequency_maps(avg, calib);
      for (std::size_t i = 0; i < 4; ++i)
        mc[i].push_back(m.nu[i](1, 1));
    }
    const OdmrCube avg = moving_average_3x3(cube_of(uniform(16, 16), 77));
    const FrequencyMaps m = frequency_maps(avg, calib);
    CHECK(m.converged_fraction() == 1.0);
    CHECK(m.assigned.all());
    for (std::size_t i = 0; i < 4; ++i) {
      const Eigen::Map<const Eigen::VectorXd> ref(mc[i].data(), Eigen::Index(mc[i].size()));
      const double mc_sd = std::sqrt((ref.array() - ref.mean()).square().sum() / double(ref.size() - 1));
      const double map_sd = std::sqrt((m.nu[i] - m.nu[i].mean()).square().sum() / double(m.nu[i].size() - 1));
      CAPTURE(i);
      CHECK(map_sd <= 2 * mc_sd);
      CHECK(std::abs(m.nu[i].mean() - calib.reference.nu_lower[int(i)]) < 2 * mc_sd);
    }
  }
  SUBCASE("+0.28 mT z patch moves the first two orientations in opposite directions") {
    FieldMap field = uniform(20, 20);
    for (int y = 6; y < 14; ++y)
      for (int x = 6; x < 14; ++x)
        field.data.col(y * 20 + x) = FieldVector(0, 0, 0.28e-3);
    const FrequencyMaps m = frequency_maps(moving_average_3x3(cube_of(field, 5)), calib);
    const double shift0 = m.nu[0](10, 10) - m.nu[0](2, 2);
    const double shift1 = m.nu[1](10, 10) - m.nu[1](2, 2);
    CHECK(shift0 < -2e6);
    CHECK(shift1 > 2e6);
    // forward-model sizes: gamma * 0.28 mT / sqrt(3)
    CHECK(std::abs(shift0) == doctest::Approx(28e9 * 0.28e-3 / std::sqrt(3.0)).epsilon(0.1));
  }
  SUBCASE("a NaN spectrum leaves the pixel unconverged and empty") {
    OdmrCube cube = cube_of(uniform(4, 4), 8);
    for (std::size_t f = 0; f < cube.n_freq(); ++f)
      cube.at(f, 2, 1) = NAN;
    const FrequencyMaps m = frequency_maps(cube, calib);
    CHECK_FALSE(m.converged(1, 2));
    CHECK_FALSE(m.ok(2, 1));
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(std::isnan(m.nu[i](1, 2)));
    CHECK(m.converged(0, 0));
  }
  SUBCASE("result does not depend on the thread count") {
    const OdmrCube avg = moving_average_3x3(cube_of(uniform(9, 9), 12));
    FrequencyMapOptions a, b;
    b.tile_rows = 8;
    const FrequencyMaps ma = frequency_maps(avg, calib, a);
    const FrequencyMaps mb = frequency_maps(avg, calib, b);
    for (std::size_t i = 0; i < 4; ++i)
      CHECK((ma.nu[i] == mb.nu[i]).all());
  }
}

TEST_CASE("vector_maps") {
  const BiasCalibration calib = calibrate_bias(cube_of(uniform(10, 10), std::nullopt), {0, 0, 10, 10});

  SUBCASE("exact frequency maps reproduce the forward field to 1e-9 T") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(-0.5e-3, 0.5e-3);
    FieldMap field = uniform(8, 6);
    for (Eigen::Index k = 0; k < field.data.cols(); ++k)
      field.data.col(k) = FieldVector(u(rng), u(rng), u(rng));
    FrequencyMaps fm;
    fm.width = 8;
    fm.height = 6;
    for (std::size_t i = 0; i < 4; ++i) {
      fm.nu[i] = Image(6, 8);
      fm.amplitude[i] = Image::Constant(6, 8, calib.amplitude[int(i)]);
      fm.gamma_hwhm[i] = Image::Constant(6, 8, calib.gamma_hwhm[int(i)]);
    }
    fm.converged = Mask::Constant(6, 8, true);
    fm.assigned = Mask::Constant(6, 8, true);
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 8; ++x) {
        const ResonanceQuad r = lower_resonances(FieldVector(calib.b0 + field.at(x, y)), PhysicalConstants{}, OrientationSet::standard());
        for (std::size_t i = 0; i < 4; ++i)
          fm.nu[i](y, x) = r.nu_lower[int(i)];
      }
    const VectorMaps vm = vector_maps(fm, calib);
    CHECK(vm.valid.all());
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 8; ++x)
        CHECK((vm.at(x, y) - field.at(x, y)).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("bias only: zero-mean maps, and b0 back without subtraction") {
    const OdmrCube avg = moving_average_3x3(cube_of(uniform(20, 20), 41));
    const FrequencyMaps fm = frequency_maps(avg, calib);
    const VectorMaps vm = vector_maps(fm, calib);
    CHECK(vm.valid_fraction() > 0.98);
    const MagnitudeAngle ma = magnitude_and_angle(vm);
    std::array<std::vector<double>, 3> comp;
    std::vector<double> mag;
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 20; ++x)
        if (vm.valid(y, x)) {
          for (std::size_t k = 0; k < 3; ++k)
            comp[k].push_back(vm.b[k](y, x));
          mag.push_back(ma.magnitude(y, x));
        }
    double var_sum = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      const Eigen::Map<const Eigen::ArrayXd> v(comp[k].data(), Eigen::Index(comp[k].size()));
      const double mean = v.mean();
      const double sd = std::sqrt((v - mean).square().sum() / double(v.size() - 1));
      var_sum += sd * sd;
      // neighbouring pixels share 3x3 windows: 9 pixels per independent sample
      const double se = sd / std::sqrt(double(v.size()) / 9.0);
      CAPTURE(k);
      CHECK(std::abs(mean) < 3 * se);
    }
    // |b| of zero-mean noise: Maxwell mean sqrt(8 / (3 pi)) * rms for isotropic scatter
    const Eigen::Map<const Eigen::ArrayXd> m(mag.data(), Eigen::Index(mag.size()));
    const double noise_only = std::sqrt(8.0 / (3.0 * std::numbers::pi)) * std::sqrt(var_sum);
    MESSAGE("mean |b| over valid pixels " << m.mean() * 1e6 << " uT, noise-only prediction " << noise_only * 1e6);
    CHECK(m.mean() == doctest::Approx(noise_only).epsilon(0.15));

    VectorMapOptions keep;
    keep.subtract_bias = false;
    const VectorMaps raw = vector_maps(fm, calib, keep);
    FieldVector mean = FieldVector::Zero();
    int n = 0;
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 20; ++x)
        if (raw.valid(y, x)) {
          mean += raw.at(x, y);
          ++n;
        }
    mean /= n;
    CHECK((mean - calib.b0).cwiseAbs().maxCoeff() < 5e-6);
  }
  SUBCASE("region with (-0.24, 0.04, 0.28) mT recovered within 30 uT") {
    const FieldVector r2(-0.24e-3, 0.04e-3, 0.28e-3);
    FieldMap field = uniform(30, 30);
    for (int y = 12; y < 28; ++y)
      for (int x = 12; x < 28; ++x)
        field.data.col(y * 30 + x) = r2;
    const PipelineResult res = run_pipeline(cube_of(field, 17), {0, 0, 10, 10});
    FieldVector sum = FieldVector::Zero();
    int n = 0;
    for (int y = 14; y < 26; ++y)
      for (int x = 14; x < 26; ++x)
        if (res.vector.valid(y, x)) {
          sum += res.vector.at(x, y);
          ++n;
        }
    REQUIRE(n > 100);
    const FieldVector mean = sum / n;
    MESSAGE("region mean " << mean.transpose() * 1e3 << " mT");
    CHECK((mean - r2).cwiseAbs().maxCoeff() < 30e-6);
    CHECK(res.vector.at(20, 20).z() > 0);
  }
}

TEST_CASE("magnitude_and_angle") {
  VectorMaps vm;
  vm.width = 2;
  vm.height = 1;
  for (auto &img : vm.b)
    img = Image::Zero(1, 2);
  vm.residual = Image::Zero(1, 2);
  vm.valid = Mask::Constant(1, 2, true);
  vm.sign_flip_suspect = Mask::Constant(1, 2, false);
  vm.blended = Mask::Constant(1, 2, false);
  vm.b[0](0, 0) = 1e-3;
  vm.b[1](0, 0) = 1e-3;
  vm.b[2](0, 1) = 1e-3;
  const MagnitudeAngle ma = magnitude_and_angle(vm, 1e-6);
  CHECK(ma.magnitude(0, 0) == doctest::Approx(std::sqrt(2.0) * 1e-3));
  CHECK(ma.angle(0, 0) == doctest::Approx(std::numbers::pi / 4));
  CHECK(ma.angle_defined(0, 0));
  CHECK(ma.magnitude(0, 1) == doctest::Approx(1e-3));
  CHECK_FALSE(ma.angle_defined(0, 1));
  CHECK(std::isnan(ma.angle(0, 1)));
}

TEST_CASE("45 degree remanent state: in-plane angle over the overlap") {
  for (int state = 1; state <= 4; ++state) {
    Scene scene = default_cross_scene(state);
    const double fov = scene.grid.pixel_pitch * scene.grid.width_px;
    scene.grid = {64, 64, fov / 64};
    const FieldMap field = field_map(scene);

    // vector maps straight from the forward field, through the same angle logic
    VectorMaps vm;
    vm.width = vm.height = 64;
    for (std::size_t k = 0; k < 3; ++k)
      vm.b[k] = Image(64, 64);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        for (std::size_t k = 0; k < 3; ++k)
          vm.b[k](y, x) = field.at(x, y)[int(k)];
    vm.residual = Image::Zero(64, 64);
    vm.valid = Mask::Constant(64, 64, true);
    vm.sign_flip_suspect = vm.blended = Mask::Constant(64, 64, false);
    const MagnitudeAngle ma = magnitude_and_angle(vm, 10e-6);

    std::vector<double> angles;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const Vec2 c = scene.grid.pixel_center(x, y);
        if (std::abs(c.x()) < 2.5e-6 && std::abs(c.y()) < 2.5e-6 && ma.angle_defined(y, x))
          angles.push_back(ma.angle(y, x));
      }
    REQUIRE(angles.size() >= 4);
    const Vec3 m = scene.regions.back().magnetization;
    const double expect = std::atan2(m.y(), m.x());
    // circular median via deviations from the expected direction
    for (double &a : angles)
      a = std::remainder(a - expect, 2 * std::numbers::pi);
    CAPTURE(state);
    CHECK(std::abs(median(angles)) * 180 / std::numbers::pi < 10);
  }
}

TEST_CASE("sensitivity model") {
  SUBCASE("T2* from the FWHM linewidth") {
    CHECK(t2star_from_linewidth(4.942e6) * 1e9 == doctest::Approx(64.41).epsilon(1e-4));
    CHECK(t2star_from_linewidth(5.312e6) * 1e9 == doctest::Approx(59.92).epsilon(1e-4));
    CHECK(t2star_from_linewidth(1 / std::numbers::pi) == doctest::Approx(1.0).epsilon(1e-12));
    expect_error(Errc::NonPositive, [] { t2star_from_linewidth(0); });
  }
  SUBCASE("eta from the measured corner parameters") {
    const double eta = sensitivity(1.138e-2, 4.942e6, 1.039e4, 50e-6);
    CHECK(eta * 1e9 == doctest::Approx(828).epsilon(0.005));
    CHECK(sensitivity(0.458e-2, 4.961e6, 1.039e4, 50e-6) * 1e9 == doctest::Approx(2066).epsilon(0.02));
    CHECK(sensitivity(2 * 1.138e-2, 4.942e6, 1.039e4, 50e-6) == doctest::Approx(eta / 2).epsilon(1e-14));
    CHECK(sensitivity(1.138e-2, 4.942e6, 4 * 1.039e4, 50e-6) == doctest::Approx(eta / 2).epsilon(1e-14));
    const double s = counts_for_sensitivity(828e-9, 1.138e-2, 4.942e6, 50e-6);
    CHECK(s == doctest::Approx(1.04e4).epsilon(0.01));
    CHECK(sensitivity(1.138e-2, 4.942e6, s, 50e-6) == doctest::Approx(828e-9).epsilon(1e-12));
    expect_error(Errc::NonPositive, [] { sensitivity(-0.01, 5e6, 1e4, 50e-6); });
  }
  SUBCASE("eta falls as T2* grows at fixed t_o") {
    double previous = INFINITY;
    for (double fwhm : {20e6, 10e6, 5e6, 2e6, 1e6}) {
      const double eta = sensitivity(0.01, fwhm, 1e4, 50e-6);
      CHECK(eta < previous);
      previous = eta;
    }
  }
}

TEST_CASE("sensitivity_report") {
  const double s = counts_for_sensitivity(828e-9, 1.138e-2, 4.942e6, 50e-6);
  const auto corners = default_corners(30, 30);

  SUBCASE("noiseless cube returns the configured contrast and linewidth") {
    const OdmrCube cube = cube_of(uniform(30, 30), std::nullopt, s);
    const BiasCalibration calib = calibrate_bias(cube, corners[0]);
    const auto rep = sensitivity_report(cube, frequency_maps(cube, calib), corners);
    const ContrastProfile profile;
    for (int i = 0; i < 4; ++i) {
      CHECK(rep[std::size_t(i)].contrast == doctest::Approx(profile.amplitude[i]).epsilon(1e-3));
      CHECK(rep[std::size_t(i)].gamma_fwhm == doctest::Approx(profile.fwhm[i]).epsilon(1e-3));
      CHECK(rep[std::size_t(i)].overhead == 50e-6);
      CHECK(rep[std::size_t(i)].counts == s);
    }
  }
  SUBCASE("noisy cube at the calibrated photon count, and twice that") {
    const Eigen::Vector4d reported(828, 1167, 2066, 1456);
    std::array<double, 4> eta1{}, eta2{};
    for (double scale : {1.0, 2.0}) {
      const OdmrCube cube = moving_average_3x3(cube_of(uniform(30, 30), 9, scale * s));
      const BiasCalibration calib = calibrate_bias(cube, corners[0]);
      const auto rep = sensitivity_report(cube, frequency_maps(cube, calib), corners);
      for (std::size_t i = 0; i < 4; ++i)
        (scale == 1.0 ? eta1 : eta2)[i] = rep[i].eta * 1e9;
    }
    for (std::size_t i = 0; i < 4; ++i) {
      CAPTURE(i);
      CHECK(eta1[i] == doctest::Approx(reported[int(i)]).epsilon(0.10));
      CHECK(eta1[i] / eta2[i] == doctest::Approx(std::sqrt(2.0)).epsilon(0.05));
    }
  }
  SUBCASE("overlapping corners") {
    const OdmrCube cube = cube_of(uniform(30, 30), std::nullopt);
    const BiasCalibration calib = calibrate_bias(cube, corners[0]);
    auto bad = corners;
    bad[1] = bad[0];
    expect_error(Errc::BadRegion, [&] { sensitivity_report(cube, frequency_maps(cube, calib), bad); });
  }
}
