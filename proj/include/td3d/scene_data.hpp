#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "td3d/geometry.hpp"

namespace td3d {

// Scene points with per-point annotation. Background points carry -1 in both
// label arrays.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<int> semantic_ids;
  std::vector<int> instance_ids;
  int num_classes = 0;

  std::size_t size() const { return points.size(); }

  // Number of instances K; ids are contiguous in [0, K-1] for a valid cloud.
  int num_instances() const;

  // Throws DataError when an invariant is violated.
  void validate() const;

  bool operator==(const PointCloud&) const = default;
};

enum class ShapeKind { kBox, kSphere, kCylinder };

const char* shape_name(ShapeKind kind);
ShapeKind shape_from_name(const std::string& name);

struct SizeRange {
  double min = 0.0;
  double max = 0.0;
};

struct SceneConfig {
  // Floor spans [0, x] x [0, y]; walls stand behind x = 0 and y = 0 up to z.
  Vec3 room_extent{2.0, 2.0, 0.6};
  std::pair<int, int> object_count_range{3, 6};
  std::vector<ShapeKind> shape_catalog{ShapeKind::kBox, ShapeKind::kSphere, ShapeKind::kCylinder};
  // Indexed by ShapeKind. Box: per-axis edge; sphere: diameter; cylinder:
  // diameter and height drawn independently.
  std::vector<SizeRange> size_range{{0.25, 0.6}, {0.25, 0.5}, {0.25, 0.5}};
  std::pair<int, int> points_per_object_range{600, 1000};
  int floor_wall_point_count = 16000;
  // Floor points have z in [0, t]; wall points lie within t behind the wall
  // planes.
  double background_thickness = 0.01;
  // Box primitives get a uniform yaw in [0, 90) degrees; their GT box is the
  // axis-aligned bound.
  bool rotate_boxes = true;
  double min_object_gap = 0.05;
  std::uint64_t seed = 0;

  int num_classes() const { return static_cast<int>(shape_catalog.size()); }
  SizeRange size_for(ShapeKind kind) const { return size_range.at(static_cast<std::size_t>(kind)); }

  // Throws ConfigError.
  void validate() const;
};

struct GroundTruthBox {
  Box3D box;
  int class_id = 0;
};

// Solid primitive resting on the floor. `extent` is its axis-aligned bounding
// box (for spheres and cylinders the x/y extent is the diameter). A box is
// rotated by `yaw` radians about the vertical axis through its center and has
// edge lengths `size` in its own frame.
struct Primitive {
  ShapeKind kind = ShapeKind::kBox;
  Box3D extent;
  double yaw = 0.0;
  Vec3 size = Vec3::Zero();
};

// Exact membership test of a point in a primitive.
bool inside_primitive(const Primitive& prim, const Vec3& p);

struct Scene {
  PointCloud cloud;
  std::vector<GroundTruthBox> boxes;    // one per instance id
  std::vector<Primitive> primitives;    // one per instance id
};

// Rejection-samples non-overlapping solid primitives on the floor of a room,
// fills each with uniformly sampled points and adds floor and wall points.
// Throws ConfigError when the config is invalid or objects cannot be placed.
Scene generate_scene(const SceneConfig& config);

// Tight axis-aligned bounds of each instance's points.
std::vector<GroundTruthBox> boxes_from_labels(const PointCloud& cloud);

// Per-instance point indices in ascending order.
std::vector<std::vector<int>> instance_point_sets(const PointCloud& cloud);

void write_scene(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud read_scene(const std::filesystem::path& path);

void write_boxes(const std::vector<GroundTruthBox>& boxes, const std::filesystem::path& path);
std::vector<GroundTruthBox> read_boxes(const std::filesystem::path& path);

// Sidecar boxes file for a scene file: same stem, ".boxes" extension.
std::filesystem::path boxes_path_for(const std::filesystem::path& scene_path);

}  // namespace td3d
