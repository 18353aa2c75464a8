#include "td3d/voxel_grid.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "td3d/errors.hpp"

namespace td3d {

double box_iou(const Box3D& a, const Box3D& b) {
  const Vec3 lo = a.min().cwiseMax(b.min());
  const Vec3 hi = a.max().cwiseMin(b.max());
  const Vec3 overlap = (hi - lo).cwiseMax(0.0);
  const double inter = overlap.prod();
  if (inter <= 0.0) return 0.0;
  return inter / (a.volume() + b.volume() - inter);
}

CoordIndex::CoordIndex(std::span<const Coord> coords) {
  map_.reserve(coords.size() * 2);
  for (std::size_t i = 0; i < coords.size(); ++i) map_.emplace(key(coords[i]), static_cast<int>(i));
}

Coord voxel_of(const Vec3& p, double voxel_size) {
  return {static_cast<std::int32_t>(std::floor(p.x() / voxel_size)),
          static_cast<std::int32_t>(std::floor(p.y() / voxel_size)),
          static_cast<std::int32_t>(std::floor(p.z() / voxel_size))};
}

Vec3 voxel_center(const Coord& c, double voxel_size) {
  return {(c.x + 0.5) * voxel_size, (c.y + 0.5) * voxel_size, (c.z + 0.5) * voxel_size};
}

void default_featurizer(const Coord& coord, double voxel_size, std::span<const Vec3> points, int max_count,
                        Eigen::Ref<nn::RowVector> out) {
  const Vec3 center = voxel_center(coord, voxel_size);
  Vec3 mean = Vec3::Zero();
  for (const Vec3& p : points) mean += p;
  mean /= static_cast<double>(points.size());
  out(0) = static_cast<double>(points.size()) / static_cast<double>(max_count);
  out.segment(1, 3) = ((mean - center) / voxel_size).transpose();
}

SparseGrid voxelize(const PointCloud& cloud, double voxel_size, const Featurizer& featurizer, int feature_channels) {
  if (!(voxel_size > 0.0) || !std::isfinite(voxel_size)) throw ConfigError("voxel_size must be positive");
  if (cloud.points.empty()) throw DataError("cannot voxelize an empty point cloud");
  const std::size_t n = cloud.size();
  std::vector<Coord> point_coord(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!cloud.points[i].allFinite()) throw DataError("non-finite coordinate at point " + std::to_string(i));
    point_coord[i] = voxel_of(cloud.points[i], voxel_size);
  }
  // Sort point indices by voxel; each run of equal coords is one voxel.
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return point_coord[static_cast<std::size_t>(a)] < point_coord[static_cast<std::size_t>(b)];
  });
  SparseGrid grid;
  grid.voxel_size = voxel_size;
  grid.point_to_voxel.resize(n);
  std::vector<std::pair<std::size_t, std::size_t>> runs;
  for (std::size_t s = 0; s < n;) {
    std::size_t e = s + 1;
    const Coord& c = point_coord[static_cast<std::size_t>(order[s])];
    while (e < n && point_coord[static_cast<std::size_t>(order[e])] == c) ++e;
    const int v = static_cast<int>(grid.coords.size());
    grid.coords.push_back(c);
    for (std::size_t k = s; k < e; ++k) grid.point_to_voxel[static_cast<std::size_t>(order[k])] = v;
    runs.emplace_back(s, e);
    s = e;
  }
  int max_count = 0;
  for (auto [s, e] : runs) max_count = std::max(max_count, static_cast<int>(e - s));
  grid.features = nn::Matrix::Zero(static_cast<Eigen::Index>(runs.size()), feature_channels);
  std::vector<Vec3> pts;
  for (std::size_t v = 0; v < runs.size(); ++v) {
    pts.clear();
    for (std::size_t k = runs[v].first; k < runs[v].second; ++k) pts.push_back(cloud.points[static_cast<std::size_t>(order[k])]);
    featurizer(grid.coords[v], voxel_size, pts, max_count, grid.features.row(static_cast<Eigen::Index>(v)));
  }
  grid.index = CoordIndex(grid.coords);
  return grid;
}

std::vector<int> voxels_in_box(const SparseGrid& grid, const Box3D& box) {
  std::vector<int> out;
  for (std::size_t i = 0; i < grid.coords.size(); ++i) {
    if (box.contains(voxel_center(grid.coords[i], grid.voxel_size))) out.push_back(static_cast<int>(i));
  }
  return out;
}

RoI extract_roi(const SparseGrid& grid, const Proposal& proposal) {
  RoI roi;
  roi.proposal = proposal;
  roi.voxel_indices = voxels_in_box(grid, proposal.box);
  roi.features.resize(static_cast<Eigen::Index>(roi.voxel_indices.size()), grid.features.cols());
  for (std::size_t i = 0; i < roi.voxel_indices.size(); ++i) {
    roi.features.row(static_cast<Eigen::Index>(i)) = grid.features.row(roi.voxel_indices[i]);
  }
  return roi;
}

std::vector<bool> devoxelize_mask(const SparseGrid& grid, const std::vector<bool>& voxel_labels) {
  if (voxel_labels.size() != grid.coords.size()) {
    throw DataError("devoxelize_mask: expected " + std::to_string(grid.coords.size()) + " voxel labels, got " +
                    std::to_string(voxel_labels.size()));
  }
  std::vector<bool> out(grid.point_to_voxel.size());
  for (std::size_t p = 0; p < out.size(); ++p) out[p] = voxel_labels[static_cast<std::size_t>(grid.point_to_voxel[p])];
  return out;
}

}  // namespace td3d
