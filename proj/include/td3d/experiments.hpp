#pragma once

#include <string>
#include <vector>

#include "td3d/config.hpp"
#include "td3d/metrics.hpp"
#include "td3d/model.hpp"
#include "td3d/trainer.hpp"

namespace td3d {

struct LevelAblationRow {
  int levels = 0;
  MetricsReport report;
};

// Retrains a fresh refiner of each depth on the frozen detector of `trained`
// and evaluates it on `val`.
std::vector<LevelAblationRow> ablate_unet_levels(const Model& trained, const std::vector<LabeledScene>& train,
                                                 const std::vector<LabeledScene>& val, const std::vector<int>& levels,
                                                 const TrainConfig& refiner_training);

std::string level_rows_csv(const std::vector<LevelAblationRow>& rows);

struct NmsCalibration {
  int target = 0;
  NmsSettings nms;
  double mean_proposals = 0.0;
};

// Picks the NMS settings from the grids (with max_proposals = target) whose
// mean proposal count over `detections` is closest to the target; ties go to
// the setting nearest `preferred`, then to grid order.
NmsCalibration calibrate_nms(const std::vector<DetectorFeatures>& detections, const DetectorConfig& config,
                             int target, const AblateConfig& grids, const NmsSettings& preferred);

struct CapAblationRow {
  NmsCalibration calibration;
  MetricsReport report;
  RuntimeStats runtime;
};

std::vector<CapAblationRow> ablate_proposal_cap(Model& model, const std::vector<LabeledScene>& val,
                                                const AblateConfig& ablate, int bench_repeats);

std::string cap_rows_csv(const std::vector<CapAblationRow>& rows);

}  // namespace td3d
