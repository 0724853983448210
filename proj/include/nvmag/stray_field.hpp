#pragma once

// Magnetostatic forward model: uniformly magnetized flat regions rasterized
// into point dipoles, summed at every pixel of a sensing plane below them.

#include "nvmag/nv_core.hpp"

#include "json.hpp"

#include <Eigen/Dense>

#include <vector>

namespace nvmag {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Polygon = std::vector<Vec2>;

inline constexpr double kMu0Over4Pi = 1e-7; // T*m/A

struct Region {
  Polygon polygon;       ///< metres, in the magnet midplane z = 0
  Vec3 magnetization;    ///< A/m
  double thickness = 0;  ///< metres
};

struct Grid {
  int width_px = 0;
  int height_px = 0;
  double pixel_pitch = 0; ///< metres

  /// Pixel (x, y) centre; the grid is centred on the origin.
  Vec2 pixel_center(int x, int y) const {
    return {(x - 0.5 * (width_px - 1)) * pixel_pitch, (y - 0.5 * (height_px - 1)) * pixel_pitch};
  }
};

/// Regions are painted in order: where two regions overlap, the later one's
/// magnetization wins (it does not add).
struct Scene {
  std::vector<Region> regions;
  double standoff = 0;  ///< magnet midplane to sensing plane, metres
  Grid grid;
  double cell_size = 0; ///< rasterization cell edge, metres

  void validate() const;
};

struct DipoleSet {
  Eigen::Matrix3Xd positions; ///< metres
  Eigen::Matrix3Xd moments;   ///< A*m^2

  Eigen::Index size() const { return positions.cols(); }
};

struct FieldMap {
  int width_px = 0;
  int height_px = 0;
  double pixel_pitch = 0;
  Eigen::Matrix3Xd data; ///< column y * width + x, tesla

  FieldVector at(int x, int y) const { return data.col(Eigen::Index(y) * width_px + x); }
};

// polygon helpers -----------------------------------------------------------

double polygon_area(const Polygon &poly); ///< absolute area
bool point_in_polygon(const Vec2 &pt, const Polygon &poly);
bool is_simple_polygon(const Polygon &poly);
Polygon ellipse_polygon(const Vec2 &center, double semi_major, double semi_minor,
                        double angle, int vertices = 256);
/// Sutherland-Hodgman; `clip` must be convex.
Polygon clip_convex(const Polygon &subject, const Polygon &clip);

// forward model -------------------------------------------------------------

/// Two crossing 40 um x 5 um ellipses (along x and y) with the overlap in one
/// of the four diagonal remanent states: 1 -> 45 deg, 2 -> 135 deg,
/// 3 -> 225 deg, 4 -> 315 deg.
Scene default_cross_scene(int state_index);

/// Cells on the (k + 1/2) * cell_size lattice. Cells wholly inside one region
/// become one dipole at the cell centre; cells straddling an edge are split
/// on a kBoundarySubsamples^2 sub-grid into one dipole per region, weighted
/// by covered fraction and placed at the covered centroid.
inline constexpr int kBoundarySubsamples = 16;
DipoleSet rasterize(const Scene &scene);

/// Point-dipole superposition, B = mu0/4pi [3 (m.r) r / r^5 - m / r^3].
/// Throws SingularPoint if any dipole lies within `singular_radius`.
FieldVector dipole_field(const Vec3 &position, const DipoleSet &dipoles,
                         double singular_radius = 0.0);

/// Field on the plane z = -standoff at every pixel centre. The summation
/// order per pixel is fixed, so the result does not depend on threading.
FieldMap field_map(const Scene &scene);

/// Closed-form field outside a uniformly magnetized rectangular prism, from
/// the surface charges sigma = M.n on its six faces.
FieldVector prism_field_oracle(const Vec3 &center, const Vec3 &half_sizes,
                               const Vec3 &magnetization, const Vec3 &position);

// JSON ----------------------------------------------------------------------

nlohmann::json scene_to_json(const Scene &scene);
Scene scene_from_json(const nlohmann::json &doc);

} // namespace nvmag
