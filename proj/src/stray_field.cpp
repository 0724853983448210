#include "nvmag/stray_field.hpp"

#include "nvmag/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace nvmag {

namespace {

double cross2(const Vec2 &a, const Vec2 &b) { return a.x() * b.y() - a.y() * b.x(); }

double signed_area(const Polygon &poly) {
  double twice = 0;
  for (std::size_t i = 0, n = poly.size(); i < n; ++i)
    twice += cross2(poly[i], poly[(i + 1) % n]);
  return 0.5 * twice;
}

bool segments_cross(const Vec2 &p1, const Vec2 &p2, const Vec2 &q1, const Vec2 &q2) {
  const double d1 = cross2(q2 - q1, p1 - q1);
  const double d2 = cross2(q2 - q1, p2 - q1);
  const double d3 = cross2(p2 - p1, q1 - p1);
  const double d4 = cross2(p2 - p1, q2 - p1);
  return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0)) && d1 != 0 && d2 != 0 && d3 != 0 &&
         d4 != 0;
}

} // namespace

double polygon_area(const Polygon &poly) { return std::abs(signed_area(poly)); }

bool point_in_polygon(const Vec2 &pt, const Polygon &poly) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Vec2 &a = poly[i];
    const Vec2 &b = poly[j];
    if ((a.y() > pt.y()) != (b.y() > pt.y())) {
      const double x_cross = a.x() + (pt.y() - a.y()) * (b.x() - a.x()) / (b.y() - a.y());
      if (pt.x() < x_cross)
        inside = !inside;
    }
  }
  return inside;
}

bool is_simple_polygon(const Polygon &poly) {
  const std::size_t n = poly.size();
  if (n < 3)
    return false;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      // adjacent edges share a vertex
      if (j == i + 1 || (i == 0 && j == n - 1))
        continue;
      if (segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]))
        return false;
    }
  }
  return polygon_area(poly) > 0;
}

Polygon ellipse_polygon(const Vec2 &center, double semi_major, double semi_minor, double angle,
                        int vertices) {
  Polygon poly;
  poly.reserve(vertices);
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  for (int k = 0; k < vertices; ++k) {
    const double t = 2.0 * std::numbers::pi * k / vertices;
    const double u = semi_major * std::cos(t);
    const double v = semi_minor * std::sin(t);
    poly.emplace_back(center.x() + c * u - s * v, center.y() + s * u + c * v);
  }
  return poly;
}

Polygon clip_convex(const Polygon &subject, const Polygon &clip) {
  Polygon out = subject;
  const double orientation = signed_area(clip) >= 0 ? 1.0 : -1.0;
  for (std::size_t e = 0; e < clip.size() && !out.empty(); ++e) {
    const Vec2 &a = clip[e];
    const Vec2 &b = clip[(e + 1) % clip.size()];
    auto inside = [&](const Vec2 &p) { return orientation * cross2(b - a, p - a) >= 0; };
    auto intersect = [&](const Vec2 &p, const Vec2 &q) {
      const double dp = cross2(b - a, p - a);
      const double dq = cross2(b - a, q - a);
      return Vec2(p + (q - p) * (dp / (dp - dq)));
    };
    Polygon input = std::move(out);
    out.clear();
    for (std::size_t i = 0; i < input.size(); ++i) {
      const Vec2 &cur = input[i];
      const Vec2 &prev = input[(i + input.size() - 1) % input.size()];
      if (inside(cur)) {
        if (!inside(prev))
          out.push_back(intersect(prev, cur));
        out.push_back(cur);
      } else if (inside(prev)) {
        out.push_back(intersect(prev, cur));
      }
    }
  }
  return out;
}

void Scene::validate() const {
  if (!(standoff > 0) || !(cell_size > 0) || !(grid.pixel_pitch > 0))
    throw Error(Errc::BadScene, "standoff, cell_size and pixel_pitch must be positive");
  if (grid.width_px <= 0 || grid.height_px <= 0)
    throw Error(Errc::BadScene, "grid dimensions must be positive");
  for (const auto &r : regions) {
    if (!(r.thickness > 0))
      throw Error(Errc::BadScene, "region thickness must be positive");
    if (!r.magnetization.allFinite())
      throw Error(Errc::BadScene, "region magnetization must be finite");
    if (!is_simple_polygon(r.polygon))
      throw Error(Errc::BadScene, "region polygon is not simple");
  }
}

Scene default_cross_scene(int state_index) {
  if (state_index < 1 || state_index > 4)
    throw Error(Errc::BadState, "remanent state index must be in 1..4");

  constexpr double ms = 8.0e5;
  constexpr double semi_major = 20e-6;
  constexpr double semi_minor = 2.5e-6;
  // Arm magnetizations follow the overlap diagonal: quadrant (sx, sy).
  const double sx = (state_index == 1 || state_index == 4) ? 1.0 : -1.0;
  const double sy = (state_index == 1 || state_index == 2) ? 1.0 : -1.0;
  const double diag = std::numbers::sqrt2 / 2.0;

  const Polygon along_x = ellipse_polygon({0, 0}, semi_major, semi_minor, 0.0);
  const Polygon along_y = ellipse_polygon({0, 0}, semi_major, semi_minor, std::numbers::pi / 2);

  Scene scene;
  scene.regions.push_back({along_x, Vec3(sx * ms, 0, 0), 100e-9});
  scene.regions.push_back({along_y, Vec3(0, sy * ms, 0), 100e-9});
  scene.regions.push_back({clip_convex(along_x, along_y), Vec3(sx * diag * ms, sy * diag * ms, 0), 100e-9});
  scene.standoff = 500e-9;
  scene.grid = {512, 512, 82.75e-6 / 512};
  scene.cell_size = 200e-9;
  return scene;
}

DipoleSet rasterize(const Scene &scene) {
  scene.validate();
  const double c = scene.cell_size;

  struct Box {
    double xmin, xmax, ymin, ymax;
  };
  std::vector<Box> boxes;
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto &r : scene.regions) {
    Box b{INFINITY, -INFINITY, INFINITY, -INFINITY};
    for (const auto &p : r.polygon) {
      b.xmin = std::min(b.xmin, p.x());
      b.xmax = std::max(b.xmax, p.x());
      b.ymin = std::min(b.ymin, p.y());
      b.ymax = std::max(b.ymax, p.y());
    }
    boxes.push_back(b);
    xmin = std::min(xmin, b.xmin);
    xmax = std::max(xmax, b.xmax);
    ymin = std::min(ymin, b.ymin);
    ymax = std::max(ymax, b.ymax);
  }

  std::vector<Vec3> positions;
  std::vector<Vec3> moments;
  if (!scene.regions.empty()) {
    // Cell centres on the lattice (k + 1/2) c, anchored at the origin.
    const long i0 = static_cast<long>(std::floor(xmin / c));
    const long i1 = static_cast<long>(std::ceil(xmax / c));
    const long j0 = static_cast<long>(std::floor(ymin / c));
    const long j1 = static_cast<long>(std::ceil(ymax / c));
    // Owner of a point: the last region containing it, -1 for none.
    auto owner = [&](const Vec2 &pt) {
      for (std::size_t k = scene.regions.size(); k-- > 0;) {
        const Box &b = boxes[k];
        if (pt.x() < b.xmin || pt.x() > b.xmax || pt.y() < b.ymin || pt.y() > b.ymax)
          continue;
        if (point_in_polygon(pt, scene.regions[k].polygon))
          return int(k);
      }
      return -1;
    };
    auto push = [&](const Vec2 &at, int k, double fraction) {
      const Region &r = scene.regions[std::size_t(k)];
      positions.emplace_back(at.x(), at.y(), 0.0);
      moments.push_back(r.magnetization * (fraction * c * c * r.thickness));
    };

    const int n = kBoundarySubsamples;
    std::vector<int> count(scene.regions.size());
    std::vector<Vec2> sum(scene.regions.size());
    for (long j = j0; j < j1; ++j) {
      for (long i = i0; i < i1; ++i) {
        const Vec2 center((i + 0.5) * c, (j + 0.5) * c);
        // Interior cells are taken whole; cells whose probes disagree straddle
        // an edge and are split by sub-sampling.
        const int first = owner(center);
        bool uniform = true;
        for (int py = -1; py <= 1 && uniform; ++py)
          for (int px = -1; px <= 1 && uniform; ++px)
            if (px || py)
              uniform = owner(center + Vec2(0.5 * px * c, 0.5 * py * c)) == first;
        if (uniform) {
          if (first >= 0)
            push(center, first, 1.0);
          continue;
        }
        std::fill(count.begin(), count.end(), 0);
        std::fill(sum.begin(), sum.end(), Vec2::Zero());
        for (int sy = 0; sy < n; ++sy)
          for (int sx = 0; sx < n; ++sx) {
            const Vec2 pt = center + Vec2(double(2 * sx + 1 - n) / (2 * n) * c, double(2 * sy + 1 - n) / (2 * n) * c);
            const int k = owner(pt);
            if (k >= 0) {
              ++count[std::size_t(k)];
              sum[std::size_t(k)] += pt;
            }
          }
        for (std::size_t k = 0; k < count.size(); ++k)
          if (count[k] > 0)
            push(sum[k] / count[k], int(k), double(count[k]) / (n * n));
      }
    }
  }
  if (positions.empty())
    throw Error(Errc::EmptyScene, "scene rasterizes to no cells");

  DipoleSet set;
  set.positions.resize(3, Eigen::Index(positions.size()));
  set.moments.resize(3, Eigen::Index(moments.size()));
  for (std::size_t k = 0; k < positions.size(); ++k) {
    set.positions.col(Eigen::Index(k)) = positions[k];
    set.moments.col(Eigen::Index(k)) = moments[k];
  }
  return set;
}

FieldVector dipole_field(const Vec3 &position, const DipoleSet &dipoles, double singular_radius) {
  const double r_min2 = singular_radius * singular_radius;
  double bx = 0, by = 0, bz = 0;
  const double *pos = dipoles.positions.data();
  const double *mom = dipoles.moments.data();
  for (Eigen::Index k = 0; k < dipoles.size(); ++k) {
    const double rx = position.x() - pos[3 * k];
    const double ry = position.y() - pos[3 * k + 1];
    const double rz = position.z() - pos[3 * k + 2];
    const double r2 = rx * rx + ry * ry + rz * rz;
    if (r2 <= r_min2 || r2 == 0.0)
      throw Error(Errc::SingularPoint, "field point coincides with a dipole");
    const double inv_r = 1.0 / std::sqrt(r2);
    const double inv_r3 = inv_r * inv_r * inv_r;
    const double inv_r5 = inv_r3 * inv_r * inv_r;
    const double mx = mom[3 * k], my = mom[3 * k + 1], mz = mom[3 * k + 2];
    const double mdotr3 = 3.0 * (mx * rx + my * ry + mz * rz) * inv_r5;
    bx += mdotr3 * rx - mx * inv_r3;
    by += mdotr3 * ry - my * inv_r3;
    bz += mdotr3 * rz - mz * inv_r3;
  }
  return kMu0Over4Pi * FieldVector(bx, by, bz);
}

FieldMap field_map(const Scene &scene) {
  scene.validate();
  FieldMap map;
  map.width_px = scene.grid.width_px;
  map.height_px = scene.grid.height_px;
  map.pixel_pitch = scene.grid.pixel_pitch;
  map.data = Eigen::Matrix3Xd::Zero(3, Eigen::Index(map.width_px) * map.height_px);
  if (scene.regions.empty())
    return map;

  const DipoleSet dipoles = rasterize(scene);
  const double singular = scene.cell_size / 10.0;
  parallel_for(std::size_t(map.height_px), [&](std::size_t y) {
    for (int x = 0; x < map.width_px; ++x) {
      const Vec2 c = scene.grid.pixel_center(x, int(y));
      map.data.col(Eigen::Index(y) * map.width_px + x) =
          dipole_field(Vec3(c.x(), c.y(), -scene.standoff), dipoles, singular);
    }
  });
  return map;
}

namespace {

// ln(V_a + R_a) - ln(V_b + R_b) at fixed q = U^2 + W^2, evaluated without the
// cancellation V + R suffers for V < 0.
double log_diff(double va, double vb, double q) {
  auto log_term = [q](double v) {
    const double r = std::sqrt(v * v + q);
    return v >= 0 ? std::log(v + r) : std::log(q) - std::log(r - v);
  };
  if (va < 0 && vb < 0) {
    const double ra = std::sqrt(va * va + q);
    const double rb = std::sqrt(vb * vb + q);
    return std::log(rb - vb) - std::log(ra - va);
  }
  return log_term(va) - log_term(vb);
}

// H of a uniformly charged rectangle [u1,u2] x [v1,v2] in the plane w = 0,
// for a point at (u, v, w), in units of sigma / (4 pi).
Vec3 sheet_field(double u, double v, double w, double u1, double u2, double v1, double v2) {
  const double us[2] = {u - u1, u - u2};
  const double vs[2] = {v - v1, v - v2};
  const double sgn[2] = {1.0, -1.0};
  Vec3 h = Vec3::Zero();
  for (int i = 0; i < 2; ++i) {
    // H_u = -sum s_i s_j ln(V_j + R)
    h.x() -= sgn[i] * log_diff(vs[0], vs[1], us[i] * us[i] + w * w);
    // H_v = -sum s_i s_j ln(U_i + R)
    h.y() -= sgn[i] * log_diff(us[0], us[1], vs[i] * vs[i] + w * w);
    for (int j = 0; j < 2; ++j) {
      if (w == 0.0)
        continue;
      const double r = std::sqrt(us[i] * us[i] + vs[j] * vs[j] + w * w);
      h.z() += sgn[i] * sgn[j] * std::atan(us[i] * vs[j] / (w * r));
    }
  }
  return h;
}

} // namespace

FieldVector prism_field_oracle(const Vec3 &center, const Vec3 &half_sizes, const Vec3 &magnetization,
                               const Vec3 &position) {
  const Vec3 rel = position - center;
  if ((rel.cwiseAbs().array() <= half_sizes.array()).all())
    throw Error(Errc::InsidePrism, "field point lies inside or on the prism");

  Vec3 h = Vec3::Zero();
  for (int a = 0; a < 3; ++a) {
    if (magnetization[a] == 0.0)
      continue;
    const int iu = (a + 1) % 3;
    const int iv = (a + 2) % 3;
    for (int side = -1; side <= 1; side += 2) {
      const double sigma = side * magnetization[a];
      const Vec3 local = sheet_field(rel[iu], rel[iv], rel[a] - side * half_sizes[a], -half_sizes[iu],
                                     half_sizes[iu], -half_sizes[iv], half_sizes[iv]);
      h[iu] += sigma * local.x();
      h[iv] += sigma * local.y();
      h[a] += sigma * local.z();
    }
  }
  return kMu0Over4Pi * h;
}

nlohmann::json scene_to_json(const Scene &scene) {
  nlohmann::json regions = nlohmann::json::array();
  for (const auto &r : scene.regions) {
    nlohmann::json poly = nlohmann::json::array();
    for (const auto &p : r.polygon)
      poly.push_back({p.x(), p.y()});
    regions.push_back({{"polygon", poly},
                       {"magnetization", {r.magnetization.x(), r.magnetization.y(), r.magnetization.z()}},
                       {"thickness", r.thickness}});
  }
  return {{"regions", regions},
          {"standoff", scene.standoff},
          {"grid",
           {{"width_px", scene.grid.width_px},
            {"height_px", scene.grid.height_px},
            {"pixel_pitch", scene.grid.pixel_pitch}}},
          {"cell_size", scene.cell_size}};
}

Scene scene_from_json(const nlohmann::json &doc) {
  Scene scene;
  try {
    for (const auto &r : doc.at("regions")) {
      Region region;
      for (const auto &p : r.at("polygon"))
        region.polygon.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
      const auto &m = r.at("magnetization");
      region.magnetization = Vec3(m.at(0).get<double>(), m.at(1).get<double>(), m.at(2).get<double>());
      region.thickness = r.at("thickness").get<double>();
      scene.regions.push_back(std::move(region));
    }
    scene.standoff = doc.at("standoff").get<double>();
    const auto &g = doc.at("grid");
    scene.grid = {g.at("width_px").get<int>(), g.at("height_px").get<int>(),
                  g.at("pixel_pitch").get<double>()};
    scene.cell_size = doc.at("cell_size").get<double>();
  } catch (const nlohmann::json::exception &e) {
    throw Error(Errc::BadScene, std::string("malformed scene document: ") + e.what());
  }
  scene.validate();
  return scene;
}

} // namespace nvmag
