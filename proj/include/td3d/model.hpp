#pragma once

#include <cstdint>
#include <vector>

#include "td3d/detector.hpp"
#include "td3d/refiner.hpp"

namespace td3d {

struct ModelConfig {
  DetectorConfig detector;
  RefinerConfig refiner;
  NmsSettings nms;

  void validate() const;
};

// Detector and refiner parameters. The two sets are kept apart so that the
// refiner can be retrained against a frozen detector.
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  nn::ParameterSet& detector_params() { return detector_; }
  nn::ParameterSet& refiner_params() { return refiner_; }
  const nn::ParameterSet& detector_params() const { return detector_; }
  const nn::ParameterSet& refiner_params() const { return refiner_; }

  // Replaces the refiner with a freshly initialized one.
  void reset_refiner(const RefinerConfig& refiner, std::uint64_t seed);
  void set_nms(const NmsSettings& nms) { config_.nms = nms; }

 private:
  ModelConfig config_;
  nn::ParameterSet detector_;
  nn::ParameterSet refiner_;
};

// Detector output for one scene: the voxelized scene carrying stride-1
// backbone features, and the decoded proposals.
struct DetectorPass {
  SparseGrid feature_grid;
  std::vector<Proposal> proposals;
};

DetectorPass run_detector(Model& model, const PointCloud& cloud, const NmsSettings& nms);

// Detector output before proposal decoding, for re-decoding under several
// NMS settings.
struct DetectorFeatures {
  SparseGrid feature_grid;
  std::vector<LevelPrediction> heads;
};

DetectorFeatures detector_features(Model& model, const PointCloud& cloud);

struct ScenePrediction {
  std::vector<Proposal> proposals;
  std::vector<InstanceMask> masks;
};

// voxelize -> detect -> refine -> per-point masks.
ScenePrediction predict(Model& model, const PointCloud& cloud);
ScenePrediction predict(Model& model, const PointCloud& cloud, const NmsSettings& nms);

// Refines externally supplied proposals (e.g. ground-truth boxes).
ScenePrediction predict_with_proposals(Model& model, const PointCloud& cloud, const std::vector<Proposal>& proposals);

std::vector<Proposal> proposals_from_gt(const std::vector<GroundTruthBox>& gt);

}  // namespace td3d
