#include "nvmag/stray_field.hpp"

#include "doctest.h"

#include <cmath>
#include <numbers>

using namespace nvmag;

namespace {

Polygon rect(double x0, double y0, double x1, double y1) { return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}}; }

Scene small_scene(std::vector<Region> regions, int w, int h, double pitch, double standoff, double cell) {
  Scene s;
  s.regions = std::move(regions);
  s.grid = {w, h, pitch};
  s.standoff = standoff;
  s.cell_size = cell;
  return s;
}

double max_norm(const FieldMap &m) { return m.data.colwise().norm().maxCoeff(); }

/// Surface-charge integral over the six faces by midpoint quadrature;
/// independent of the closed form in prism_field_oracle.
FieldVector prism_by_quadrature(const Vec3 &center, const Vec3 &half, const Vec3 &m, const Vec3 &pos, int n) {
  FieldVector h = FieldVector::Zero();
  for (int axis = 0; axis < 3; ++axis) {
    const int u = (axis + 1) % 3, v = (axis + 2) % 3;
    for (int side : {-1, 1}) {
      const double sigma = side * m[axis];
      if (sigma == 0)
        continue;
      const double du = 2 * half[u] / n, dv = 2 * half[v] / n;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          Vec3 src = center;
          src[axis] += side * half[axis];
          src[u] += -half[u] + (i + 0.5) * du;
          src[v] += -half[v] + (j + 0.5) * dv;
          const Vec3 r = pos - src;
          h += sigma * du * dv * r / std::pow(r.norm(), 3);
        }
    }
  }
  return 4e-7 * std::numbers::pi * h / (4 * std::numbers::pi);
}

} // namespace

TEST_CASE("polygon helpers") {
  CHECK(polygon_area(rect(0, 0, 2, 3)) == doctest::Approx(6.0));
  CHECK(point_in_polygon({1, 1}, rect(0, 0, 2, 3)));
  CHECK_FALSE(point_in_polygon({3, 1}, rect(0, 0, 2, 3)));
  CHECK(is_simple_polygon(rect(0, 0, 1, 1)));
  CHECK_FALSE(is_simple_polygon({{0, 0}, {1, 1}, {1, 0}, {0, 1}}));
  const Polygon e = ellipse_polygon({0, 0}, 2.0, 1.0, 0.0, 4096);
  CHECK(polygon_area(e) == doctest::Approx(2.0 * std::numbers::pi).epsilon(1e-5));
  const Polygon c = clip_convex(rect(0, 0, 2, 2), rect(1, 1, 3, 3));
  CHECK(polygon_area(c) == doctest::Approx(1.0));
}

TEST_CASE("default_cross_scene") {
  SUBCASE("overlap directions") {
    const double d = std::numbers::sqrt2 / 2;
    const Vec3 m1 = default_cross_scene(1).regions.back().magnetization.normalized();
    CHECK((m1 - Vec3(d, d, 0)).norm() < 1e-15);
    const Vec3 m3 = default_cross_scene(3).regions.back().magnetization.normalized();
    CHECK((m3 - Vec3(-d, -d, 0)).norm() < 1e-15);
    const Vec3 m2 = default_cross_scene(2).regions.back().magnetization.normalized();
    CHECK((m2 - Vec3(-d, d, 0)).norm() < 1e-15);
    const Vec3 m4 = default_cross_scene(4).regions.back().magnetization.normalized();
    CHECK((m4 - Vec3(d, -d, 0)).norm() < 1e-15);
  }
  SUBCASE("bad state") {
    try {
      default_cross_scene(5);
      FAIL("expected BadState");
    } catch (const Error &e) {
      CHECK(e.code() == Errc::BadState);
    }
  }
  SUBCASE("rasterized area equals the union of the two ellipses, counted once") {
    for (int state = 1; state <= 4; ++state) {
      const Scene s = default_cross_scene(state);
      const DipoleSet d = rasterize(s);
      const double raster_area = double(d.size()) * s.cell_size * s.cell_size;
      // union of x^2/a^2 + y^2/b^2 <= 1 and its 90 degree rotation on a fine lattice
      const double a = 20e-6, b = 2.5e-6, step = 25e-9;
      long inside = 0;
      for (double y = -a + step / 2; y < a; y += step)
        for (double x = -a + step / 2; x < a; x += step) {
          const bool in_x = x * x / (a * a) + y * y / (b * b) <= 1;
          const bool in_y = y * y / (a * a) + x * x / (b * b) <= 1;
          inside += in_x || in_y;
        }
      const double union_area = double(inside) * step * step;
      CHECK(raster_area == doctest::Approx(union_area).epsilon(0.01));
    }
  }
}

TEST_CASE("rasterize") {
  SUBCASE("1 um square with 0.5 um cells tiles exactly") {
    const Scene s = small_scene({{rect(0, 0, 1e-6, 1e-6), Vec3(1e5, 0, 0), 50e-9}}, 4, 4, 1e-6, 1e-6, 0.5e-6);
    const DipoleSet d = rasterize(s);
    REQUIRE(d.size() == 4);
    for (Eigen::Index k = 0; k < 4; ++k)
      CHECK(d.moments.col(k) == d.moments.col(0));
    CHECK(d.moments.col(0)[0] == doctest::Approx(1e5 * 0.25e-12 * 50e-9));
  }
  SUBCASE("total moment matches M A t") {
    const Polygon e = ellipse_polygon({0.3e-6, -0.2e-6}, 4e-6, 1.5e-6, 0.4);
    const Vec3 m(3e5, -2e5, 1e5);
    const double t = 80e-9;
    for (double cell : {0.3e-6, 0.15e-6, 0.1e-6}) {
      const Scene s = small_scene({{e, m, t}}, 4, 4, 1e-6, 1e-6, cell);
      const Vec3 total = rasterize(s).moments.rowwise().sum();
      const Vec3 expect = m * polygon_area(e) * t;
      CHECK((total - expect).norm() < 0.02 * expect.norm());
    }
  }
  SUBCASE("later regions win where they overlap") {
    const Scene s = small_scene({{rect(0, 0, 2e-6, 1e-6), Vec3(1, 0, 0), 1e-7}, {rect(1e-6, 0, 2e-6, 1e-6), Vec3(0, 1, 0), 1e-7}},
                                4, 4, 1e-6, 1e-6, 0.5e-6);
    const DipoleSet d = rasterize(s);
    CHECK(d.size() == 8);
    int ys = 0;
    for (Eigen::Index k = 0; k < d.size(); ++k)
      ys += d.moments(1, k) > 0;
    CHECK(ys == 4);
  }
  SUBCASE("empty scene") {
    Scene s = small_scene({}, 2, 2, 1e-6, 1e-6, 1e-7);
    try {
      rasterize(s);
      FAIL("expected EmptyScene");
    } catch (const Error &e) {
      CHECK(e.code() == Errc::EmptyScene);
    }
  }
}

TEST_CASE("dipole_field") {
  DipoleSet d;
  d.positions = Eigen::Matrix3Xd::Zero(3, 1);
  d.moments = Eigen::Matrix3Xd(3, 1);
  d.moments.col(0) = Vec3(0, 0, 1e-15);
  const FieldVector on_axis = dipole_field(Vec3(0, 0, 1e-6), d);
  CHECK(on_axis[0] == 0.0);
  CHECK(on_axis[1] == 0.0);
  CHECK(on_axis[2] == doctest::Approx(0.2e-3));
  const FieldVector equator = dipole_field(Vec3(1e-6, 0, 0), d);
  CHECK(std::abs(equator[0]) < 1e-18);
  CHECK(equator[2] == doctest::Approx(-0.1e-3));

  DipoleSet neg = d;
  neg.moments = -d.moments;
  const Vec3 p(0.3e-6, -0.7e-6, 0.4e-6);
  CHECK(dipole_field(p, neg) == -dipole_field(p, d));

  try {
    dipole_field(Vec3(0, 0, 1e-9), d, 1e-8);
    FAIL("expected SingularPoint");
  } catch (const Error &e) {
    CHECK(e.code() == Errc::SingularPoint);
  }
}

TEST_CASE("field_map") {
  SUBCASE("empty scene gives zeros") {
    const FieldMap m = field_map(small_scene({}, 5, 3, 1e-6, 0.5e-6, 0.1e-6));
    CHECK(m.width_px == 5);
    CHECK(m.height_px == 3);
    CHECK(m.data.isZero(0.0));
  }
  SUBCASE("linearity and superposition") {
    const Region a{ellipse_polygon({-3e-6, 0}, 2e-6, 1e-6, 0.3), Vec3(5e5, 2e5, -1e5), 100e-9};
    const Region b{rect(1e-6, -2e-6, 4e-6, 2e-6), Vec3(-3e5, 4e5, 0), 60e-9};
    Region a_neg = a;
    a_neg.magnetization = -a.magnetization;
    const FieldMap fa = field_map(small_scene({a}, 12, 8, 0.8e-6, 0.6e-6, 0.2e-6));
    const FieldMap fa_neg = field_map(small_scene({a_neg}, 12, 8, 0.8e-6, 0.6e-6, 0.2e-6));
    CHECK(fa.data == -fa_neg.data);

    const FieldMap fb = field_map(small_scene({b}, 12, 8, 0.8e-6, 0.6e-6, 0.2e-6));
    const FieldMap fab = field_map(small_scene({a, b}, 12, 8, 0.8e-6, 0.6e-6, 0.2e-6));
    const double rel = (fab.data - fa.data - fb.data).cwiseAbs().maxCoeff() / fab.data.cwiseAbs().maxCoeff();
    CHECK(rel < 1e-12);
  }
  SUBCASE("mirror across x = 0 with M_x negated") {
    const Polygon tri{{0.5137e-6, -1.0291e-6}, {4.0173e-6, 0.4889e-6}, {1.0419e-6, 2.5313e-6}};
    Polygon mirrored;
    for (auto it = tri.rbegin(); it != tri.rend(); ++it)
      mirrored.push_back({-it->x(), it->y()});
    const Vec3 m(4e5, 3e5, 1e5);
    const FieldMap f = field_map(small_scene({{tri, m, 100e-9}}, 11, 9, 0.7e-6, 0.5e-6, 0.1e-6));
    const FieldMap g = field_map(small_scene({{mirrored, Vec3(-m.x(), m.y(), m.z()), 100e-9}}, 11, 9, 0.7e-6, 0.5e-6, 0.1e-6));
    const double scale = max_norm(f);
    double worst = 0;
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 11; ++x) {
        const FieldVector a = f.at(x, y), b = g.at(10 - x, y);
        worst = std::max({worst, std::abs(a[0] + b[0]), std::abs(a[1] - b[1]), std::abs(a[2] - b[2])});
      }
    CHECK(worst < 1e-10 * scale);
  }
  SUBCASE("self-convergence under cell halving") {
    // one dipole per cell leaves ~1.2% at exactly standoff = 2c; 2.5c clears 1%
    const Region r{ellipse_polygon({0, 0}, 3e-6, 1.2e-6, 0.5), Vec3(6e5, -2e5, 0), 100e-9};
    const double standoff = 500e-9;
    for (double c : {200e-9, 125e-9}) {
      const FieldMap coarse = field_map(small_scene({r}, 16, 16, 0.5e-6, standoff, c));
      const FieldMap fine = field_map(small_scene({r}, 16, 16, 0.5e-6, standoff, c / 2));
      CHECK((coarse.data - fine.data).norm() / fine.data.norm() < 0.01);
    }
  }
  SUBCASE("film much wider than the standoff: field concentrates at the edges") {
    const double l = 100e-6;
    const Vec3 half(l / 2, l / 2, 50e-9);
    const Vec3 m(8e5, 0, 0);
    const double z = -500e-9;
    const FieldVector interior = prism_field_oracle(Vec3::Zero(), half, m, Vec3(0, 0, z));
    const FieldVector edge = prism_field_oracle(Vec3::Zero(), half, m, Vec3(l / 2, 0, z));
    CHECK(interior.norm() < 0.05 * edge.norm());

    // same comparison through dipole summation on a 3-pixel row (-l/2, 0, l/2)
    const Scene s = small_scene({{rect(-l / 2, -l / 2, l / 2, l / 2), m, 100e-9}}, 3, 1, l / 2, 500e-9, 250e-9);
    const FieldMap f = field_map(s);
    CHECK(f.at(1, 0).norm() < 0.05 * f.at(2, 0).norm());
  }
}

TEST_CASE("prism_field_oracle") {
  const Vec3 center(0.2e-6, -0.1e-6, 0.0);
  const Vec3 half(1e-6, 0.6e-6, 0.25e-6);
  const Vec3 m(3e5, -5e5, 7e5);
  const double volume = 8 * half.prod();

  SUBCASE("far field matches the equivalent dipole") {
    const double diag = 2 * half.norm();
    DipoleSet d;
    d.positions = Eigen::Matrix3Xd(3, 1);
    d.positions.col(0) = center;
    d.moments = Eigen::Matrix3Xd(3, 1);
    d.moments.col(0) = m * volume;
    for (const Vec3 dir : {Vec3(1, 0, 0), Vec3(0.3, -0.5, 0.8), Vec3(-0.2, 0.1, -1)}) {
      const Vec3 pos = center + 25 * diag * dir.normalized();
      const FieldVector a = prism_field_oracle(center, half, m, pos);
      const FieldVector b = dipole_field(pos, d);
      CHECK((a - b).norm() < 0.01 * b.norm());
    }
  }
  SUBCASE("symmetry axis of a z-magnetized cube") {
    const Vec3 h(1e-6, 1e-6, 1e-6);
    for (double z : {1.5e-6, 3e-6, -2e-6}) {
      const FieldVector b = prism_field_oracle(Vec3::Zero(), h, Vec3(0, 0, 8e5), Vec3(0, 0, z));
      CHECK(std::abs(b[0]) < 1e-12 * std::abs(b[2]));
      CHECK(std::abs(b[1]) < 1e-12 * std::abs(b[2]));
      CHECK(b[2] > 0);
    }
  }
  SUBCASE("agrees with direct surface-charge quadrature") {
    for (const Vec3 pos : {Vec3(0.5e-6, 0.3e-6, -0.6e-6), Vec3(1.6e-6, -0.9e-6, 0.1e-6), Vec3(-0.4e-6, 1.0e-6, 0.8e-6)}) {
      const FieldVector a = prism_field_oracle(center, half, m, pos);
      const FieldVector b = prism_by_quadrature(center, half, m, pos, 400);
      CHECK((a - b).norm() < 2e-3 * b.norm());
    }
  }
  SUBCASE("inside the prism") {
    try {
      prism_field_oracle(center, half, m, center);
      FAIL("expected InsidePrism");
    } catch (const Error &e) {
      CHECK(e.code() == Errc::InsidePrism);
    }
  }
  SUBCASE("rasterized prism at standoff >= 2 cells") {
    const double l = 2e-6, t = 100e-9;
    const Vec3 mag(5e5, 2e5, 0);
    for (double standoff : {200e-9, 400e-9}) {
      const Scene s = small_scene({{rect(-l / 2, -l / 2, l / 2, l / 2), mag, t}}, 12, 12, 0.35e-6, standoff, 100e-9);
      const FieldMap f = field_map(s);
      double worst = 0;
      for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
          const Vec2 c = s.grid.pixel_center(x, y);
          const FieldVector o = prism_field_oracle(Vec3::Zero(), Vec3(l / 2, l / 2, t / 2), mag, Vec3(c.x(), c.y(), -s.standoff));
          if (o.norm() > 1e-6)
            worst = std::max(worst, (f.at(x, y) - o).cwiseAbs().maxCoeff() / o.cwiseAbs().maxCoeff());
        }
      CHECK(worst < 0.02);
    }
  }
}

TEST_CASE("scene JSON") {
  const Scene s = default_cross_scene(2);
  const Scene t = scene_from_json(nlohmann::json::parse(scene_to_json(s).dump()));
  REQUIRE(t.regions.size() == s.regions.size());
  for (std::size_t k = 0; k < s.regions.size(); ++k) {
    CHECK(t.regions[k].polygon == s.regions[k].polygon);
    CHECK(t.regions[k].magnetization == s.regions[k].magnetization);
    CHECK(t.regions[k].thickness == s.regions[k].thickness);
  }
  CHECK(t.standoff == s.standoff);
  CHECK(t.cell_size == s.cell_size);
  CHECK(t.grid.width_px == s.grid.width_px);
  CHECK(t.grid.pixel_pitch == s.grid.pixel_pitch);

  auto bad = scene_to_json(s);
  bad["standoff"] = -1.0;
  CHECK_THROWS_AS(scene_from_json(bad), Error);
  bad = scene_to_json(s);
  bad.erase("grid");
  try {
    scene_from_json(bad);
    FAIL("expected BadScene");
  } catch (const Error &e) {
    CHECK(e.code() == Errc::BadScene);
  }
}
