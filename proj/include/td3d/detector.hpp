#pragma once

#include <array>
#include <random>
#include <vector>

#include "td3d/geometry.hpp"
#include "td3d/nn/graph.hpp"
#include "td3d/scene_data.hpp"
#include "td3d/voxel_grid.hpp"

namespace td3d {

// Fully-convolutional sparse proposal generator: a four-level encoder-decoder
// backbone with per-level classification and box-regression heads.
struct DetectorConfig {
  int num_classes = 3;
  int in_channels = kDefaultFeatureChannels;
  std::array<int, 4> widths{32, 64, 128, 256};
  std::vector<int> head_levels{1, 2, 3};
  double voxel_size = 0.05;
  int k_max = 18;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  // Reference box edge per level is ref_size_factor * stride * voxel_size.
  double ref_size_factor = 4.0;

  static constexpr int kNumLevels = 4;
  double ref_size(int level) const { return ref_size_factor * (1 << level) * voxel_size; }
  void validate() const;
};

struct NmsSettings {
  double score_threshold = 0.02;
  double nms_iou = 0.35;
  int max_proposals = 60;
};

void add_detector_parameters(nn::ParameterSet& params, const DetectorConfig& config, std::mt19937_64& rng);

struct FeatureLevel {
  int level = 0;
  int stride = 1;
  std::vector<Coord> coords;
  nn::Var features;
};

// Decoder features at strides 1, 2, 4, 8. levels[0] feeds RoI extraction.
struct BackboneOutput {
  std::vector<FeatureLevel> levels;
};

// Throws DataError on an empty grid.
BackboneOutput backbone_forward(nn::Graph& g, const SparseGrid& grid, nn::ParameterSet& params,
                                const DetectorConfig& config);

struct HeadOutput {
  int level = 0;
  int stride = 1;
  std::vector<Coord> coords;
  nn::Var class_logits;  // M x C
  nn::Var box_deltas;    // M x 6: center offset / (stride * voxel), log(size / ref)
};

std::vector<HeadOutput> head_forward(nn::Graph& g, const BackboneOutput& bb, nn::ParameterSet& params,
                                     const DetectorConfig& config);

// Plain values of one head level, detached from any graph.
struct LevelPrediction {
  int level = 0;
  std::vector<Coord> coords;
  nn::Matrix class_logits;
  nn::Matrix box_deltas;
};

std::vector<LevelPrediction> detach(const nn::Graph& g, const std::vector<HeadOutput>& heads);

// Where a head voxel sits and what reference size it regresses against.
struct BoxAnchor {
  Vec3 center = Vec3::Zero();
  double step = 1.0;      // stride * voxel_size
  double ref_size = 1.0;  // reference edge length
};

BoxAnchor make_anchor(const DetectorConfig& config, int level, const Coord& coord);
Box3D decode_box(const BoxAnchor& anchor, const Eigen::Ref<const nn::RowVector>& deltas);

// Log-size deltas are clamped to this range before exponentiation.
inline constexpr double kMaxLogSize = 6.0;

enum class VoxelLabel : signed char { kIgnored = -1, kNegative = 0, kPositive = 1 };

struct LevelTargets {
  int level = 0;
  std::vector<VoxelLabel> label;
  std::vector<int> class_id;   // -1 unless positive
  std::vector<int> gt_index;   // -1 unless positive
  nn::Matrix regression;       // M x 6, zero unless positive
};

struct DetectionTargets {
  std::vector<LevelTargets> levels;
  int num_positives() const;
};

struct HeadLevelOccupancy {
  int level = 0;
  std::vector<Coord> coords;
};

// A voxel is positive iff its center is inside a GT box (smallest volume wins,
// ties by lower GT index); per GT box and level only the k_max voxels nearest
// to the box center stay positive, the rest are ignored.
DetectionTargets assign_targets(const std::vector<GroundTruthBox>& gt, const std::vector<HeadLevelOccupancy>& levels,
                                const DetectorConfig& config);

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

// Sigmoid focal loss summed over voxels and classes and divided by
// max(1, #positives). labels[i] is the class of a positive, -1 for a negative
// and -2 for an ignored row. Writes d(loss)/d(logits) when grad is non-null.
double focal_loss(const nn::Matrix& logits, const std::vector<int>& labels, FocalParams params,
                  nn::Matrix* grad = nullptr);

// Mean of 1 - IoU over aligned pairs. grad (N x 6) is w.r.t. (center, size) of
// the predicted boxes; zero where a pair does not overlap.
double iou_loss(const std::vector<Box3D>& pred, const std::vector<Box3D>& gt, nn::Matrix* grad = nullptr);

// iou_loss of decoded boxes with the gradient chained to the raw deltas.
double iou_loss_from_deltas(const nn::Matrix& deltas, const std::vector<BoxAnchor>& anchors,
                            const std::vector<Box3D>& gt, nn::Matrix* grad = nullptr);

struct DetectionLosses {
  nn::Var cls;
  nn::Var reg;
};

DetectionLosses detection_losses(nn::Graph& g, const std::vector<HeadOutput>& heads, const DetectionTargets& targets,
                                 const std::vector<GroundTruthBox>& gt, const DetectorConfig& config);

struct ScoredBox {
  Proposal proposal;
  int level = 0;
  Coord coord;
};

// Greedy class-agnostic suppression over candidates; returns kept candidates
// in order of decreasing score (ties: lower coord, then lower level).
// Stops once max_keep boxes are kept; the result is a prefix of the uncapped one.
std::vector<ScoredBox> greedy_nms(std::vector<ScoredBox> candidates, double nms_iou,
                                  std::size_t max_keep = static_cast<std::size_t>(-1));

std::vector<Proposal> decode_proposals(const std::vector<LevelPrediction>& heads, const DetectorConfig& config,
                                       const NmsSettings& nms);

}  // namespace td3d
