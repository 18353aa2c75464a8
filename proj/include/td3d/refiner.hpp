#pragma once

#include <random>
#include <span>
#include <vector>

#include "td3d/geometry.hpp"
#include "td3d/nn/graph.hpp"
#include "td3d/scene_data.hpp"
#include "td3d/voxel_grid.hpp"

namespace td3d {

enum class VoxelLabelRule { kAny, kMajority };

struct RefinerConfig {
  // Number of stride-2 stages of the tiny U-Net; 0 keeps every RoI voxel.
  int levels = 4;
  int base_channels = 16;
  double iou_match_threshold = 0.25;
  VoxelLabelRule label_rule = VoxelLabelRule::kAny;
  double fg_threshold = 0.5;

  void validate() const;
};

struct InstanceMask {
  std::vector<bool> point_mask;
  int class_id = 0;
  double score = 0.0;
};

struct MatchPair {
  int gt_index = 0;
  int proposal_index = 0;
  double iou = 0.0;
};

struct MatchResult {
  std::vector<MatchPair> pairs;
  std::vector<int> unmatched_gt;
  std::vector<int> unmatched_proposals;
};

// Each GT, in index order, claims the nearest unclaimed proposal by center
// distance (ties by lower index); the pair is kept iff IoU > threshold.
MatchResult match_for_training(const std::vector<GroundTruthBox>& gt, const std::vector<Proposal>& proposals,
                               double threshold);

// Channels appended to the backbone features of each RoI voxel: its center
// relative to the box, scaled to [-1, 1].
inline constexpr int kRoiPositionChannels = 3;

void add_refiner_parameters(nn::ParameterSet& params, const RefinerConfig& config, int feature_channels,
                            std::mt19937_64& rng);

nn::Matrix roi_positions(const SparseGrid& grid, const RoI& roi);

// U-Net input rows for the voxels of `roi`, taken from `scene_features`
// (one row per grid voxel).
nn::Var roi_input(nn::Graph& g, nn::Var scene_features, const SparseGrid& grid, const RoI& roi);

// One logit per RoI voxel. levels == 0 yields +infinity everywhere (the whole
// RoI is foreground) without touching parameters.
nn::Var unet_forward(nn::Graph& g, std::span<const Coord> roi_coords, nn::Var input, const RefinerConfig& config,
                     nn::ParameterSet& params);

// Per-voxel membership of one instance over the whole grid.
std::vector<bool> instance_voxel_labels(const SparseGrid& grid, const PointCloud& cloud, int instance,
                                        VoxelLabelRule rule);

inline constexpr double kSegLogitClamp = 30.0;

// Mean binary cross-entropy over all voxels of all RoIs, logits clamped to
// +-30. grads receives d(loss)/d(logits) per RoI. Zero RoIs give 0.
double seg_loss(const std::vector<nn::Matrix>& logits, const std::vector<std::vector<bool>>& labels,
                std::vector<nn::Matrix>* grads = nullptr);

nn::Var seg_loss(nn::Graph& g, const std::vector<nn::Var>& logits, const std::vector<std::vector<bool>>& labels);

// extract_roi -> unet_forward -> threshold -> devoxelize, restricted to RoI
// voxels. `feature_grid` carries the backbone stride-1 features. Masks
// inherit class and score; empty RoIs and empty masks are dropped.
std::vector<InstanceMask> predict_masks(const SparseGrid& feature_grid, const std::vector<Proposal>& proposals,
                                        const RefinerConfig& config, nn::ParameterSet& params);

}  // namespace td3d
