#pragma once

#include <Eigen/Core>
#include <compare>
#include <cstdint>

namespace td3d {

using Vec3 = Eigen::Vector3d;

// Integer voxel coordinate. Ordered lexicographically (x, then y, then z).
struct Coord {
  std::int32_t x = 0;
  std::int32_t y = 0;
  std::int32_t z = 0;

  auto operator<=>(const Coord&) const = default;
};

// Tolerance (meters) of the inclusive point-in-box test shared by RoI
// extraction and target assignment.
inline constexpr double kContainmentTolerance = 1e-9;

// Axis-aligned box parameterized by center and (strictly positive) size.
struct Box3D {
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();

  static Box3D from_bounds(const Vec3& lo, const Vec3& hi) {
    return {0.5 * (lo + hi), hi - lo};
  }

  Vec3 min() const { return center - 0.5 * size; }
  Vec3 max() const { return center + 0.5 * size; }
  double volume() const { return size.prod(); }
  bool valid() const { return size.allFinite() && center.allFinite() && (size.array() > 0).all(); }

  // Inclusive on both faces: |p - center| <= size / 2 + tol componentwise.
  bool contains(const Vec3& p, double tol = kContainmentTolerance) const {
    return ((p - center).cwiseAbs().array() <= (0.5 * size).array() + tol).all();
  }
};

// Volume intersection over union of two axis-aligned boxes; 0 when disjoint.
double box_iou(const Box3D& a, const Box3D& b);

// A detected object candidate.
struct Proposal {
  Box3D box;
  int class_id = 0;
  double score = 0.0;
};

}  // namespace td3d
