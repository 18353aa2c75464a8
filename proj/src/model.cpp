#include "td3d/model.hpp"

#include <random>

namespace td3d {

void ModelConfig::validate() const {
  detector.validate();
  refiner.validate();
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  add_detector_parameters(detector_, config_.detector, rng);
  add_refiner_parameters(refiner_, config_.refiner, config_.detector.widths[0], rng);
}

void Model::reset_refiner(const RefinerConfig& refiner, std::uint64_t seed) {
  refiner.validate();
  config_.refiner = refiner;
  refiner_ = nn::ParameterSet();
  std::mt19937_64 rng(seed);
  add_refiner_parameters(refiner_, refiner, config_.detector.widths[0], rng);
}

namespace {

DetectorFeatures run_backbone(Model& model, const PointCloud& cloud, bool with_heads) {
  const auto& cfg = model.config().detector;
  DetectorFeatures out;
  out.feature_grid = voxelize(cloud, cfg.voxel_size);
  nn::Graph g(false);
  BackboneOutput bb = backbone_forward(g, out.feature_grid, model.detector_params(), cfg);
  if (with_heads) out.heads = detach(g, head_forward(g, bb, model.detector_params(), cfg));
  out.feature_grid.features = g.value(bb.levels[0].features);
  return out;
}

}  // namespace

DetectorFeatures detector_features(Model& model, const PointCloud& cloud) { return run_backbone(model, cloud, true); }

DetectorPass run_detector(Model& model, const PointCloud& cloud, const NmsSettings& nms) {
  DetectorFeatures pass = run_backbone(model, cloud, true);
  DetectorPass out;
  out.proposals = decode_proposals(pass.heads, model.config().detector, nms);
  out.feature_grid = std::move(pass.feature_grid);
  return out;
}

ScenePrediction predict(Model& model, const PointCloud& cloud) { return predict(model, cloud, model.config().nms); }

ScenePrediction predict(Model& model, const PointCloud& cloud, const NmsSettings& nms) {
  DetectorPass pass = run_detector(model, cloud, nms);
  ScenePrediction out;
  out.masks = predict_masks(pass.feature_grid, pass.proposals, model.config().refiner, model.refiner_params());
  out.proposals = std::move(pass.proposals);
  return out;
}

ScenePrediction predict_with_proposals(Model& model, const PointCloud& cloud, const std::vector<Proposal>& proposals) {
  ScenePrediction out;
  out.proposals = proposals;
  if (model.config().refiner.levels == 0) {
    // The bypass only needs the grid, not backbone features.
    SparseGrid grid = voxelize(cloud, model.config().detector.voxel_size);
    out.masks = predict_masks(grid, proposals, model.config().refiner, model.refiner_params());
    return out;
  }
  DetectorFeatures pass = run_backbone(model, cloud, false);
  out.masks = predict_masks(pass.feature_grid, proposals, model.config().refiner, model.refiner_params());
  return out;
}

std::vector<Proposal> proposals_from_gt(const std::vector<GroundTruthBox>& gt) {
  std::vector<Proposal> out;
  for (const auto& b : gt) out.push_back({b.box, b.class_id, 1.0});
  return out;
}

}  // namespace td3d
