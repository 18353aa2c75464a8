#pragma once

#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "td3d/geometry.hpp"
#include "td3d/nn/tensor.hpp"
#include "td3d/scene_data.hpp"

namespace td3d {

// Hash lookup from voxel coordinate to row index.
class CoordIndex {
 public:
  CoordIndex() = default;
  explicit CoordIndex(std::span<const Coord> coords);

  // -1 when absent.
  int find(const Coord& c) const {
    auto it = map_.find(key(c));
    return it == map_.end() ? -1 : it->second;
  }
  std::size_t size() const { return map_.size(); }

  static std::uint64_t key(const Coord& c) {
    constexpr std::uint64_t kMask = (std::uint64_t{1} << 21) - 1;
    return ((static_cast<std::uint64_t>(c.x) & kMask) << 42) | ((static_cast<std::uint64_t>(c.y) & kMask) << 21) |
           (static_cast<std::uint64_t>(c.z) & kMask);
  }

 private:
  std::unordered_map<std::uint64_t, int> map_;
};

// Occupied voxels of a point cloud with per-voxel features. `coords` are
// sorted lexicographically and unique.
struct SparseGrid {
  double voxel_size = 0.05;
  std::vector<Coord> coords;
  nn::Matrix features;            // coords.size() x F
  std::vector<int> point_to_voxel;  // one entry per point
  CoordIndex index;

  std::size_t num_voxels() const { return coords.size(); }
};

// Maps the points that fell into one voxel to a feature row.
using Featurizer = std::function<void(const Coord& coord, double voxel_size, std::span<const Vec3> points,
                                      int max_count, Eigen::Ref<nn::RowVector> out)>;

// Point count normalized by the maximum count, then mean offset of the points
// from the voxel center in voxel units.
inline constexpr int kDefaultFeatureChannels = 4;
void default_featurizer(const Coord& coord, double voxel_size, std::span<const Vec3> points, int max_count,
                        Eigen::Ref<nn::RowVector> out);

Coord voxel_of(const Vec3& p, double voxel_size);
Vec3 voxel_center(const Coord& coord, double voxel_size);

// Throws DataError on an empty cloud or non-finite coordinates, ConfigError on
// a non-positive voxel size.
SparseGrid voxelize(const PointCloud& cloud, double voxel_size, const Featurizer& featurizer = default_featurizer,
                    int feature_channels = kDefaultFeatureChannels);

struct RoI {
  Proposal proposal;
  std::vector<int> voxel_indices;  // ascending
  nn::Matrix features;
};

// Indices of the voxels whose centers lie inside `box` (inclusive faces).
std::vector<int> voxels_in_box(const SparseGrid& grid, const Box3D& box);

RoI extract_roi(const SparseGrid& grid, const Proposal& proposal);

// Broadcasts one label per voxel to every point of the voxel.
std::vector<bool> devoxelize_mask(const SparseGrid& grid, const std::vector<bool>& voxel_labels);

}  // namespace td3d
