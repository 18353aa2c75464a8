#include "td3d/experiments.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "td3d/errors.hpp"
#include "td3d/text_io.hpp"

namespace td3d {

std::vector<LevelAblationRow> ablate_unet_levels(const Model& trained, const std::vector<LabeledScene>& train,
                                                 const std::vector<LabeledScene>& val, const std::vector<int>& levels,
                                                 const TrainConfig& refiner_training) {
  std::vector<LevelAblationRow> rows;
  for (int l : levels) {
    Model model = trained;
    RefinerConfig rc = trained.config().refiner;
    rc.levels = l;
    model.reset_refiner(rc, refiner_training.seed + 1000 + static_cast<std::uint64_t>(l));
    fit_refiner(model, train, refiner_training);
    rows.push_back({l, evaluate_model(model, val)});
  }
  return rows;
}

std::string level_rows_csv(const std::vector<LevelAblationRow>& rows) {
  std::ostringstream os;
  os << "unet_levels,ap,ap50,ap25\n";
  for (const auto& r : rows) {
    os << r.levels << ',' << text::format_double(r.report.ap) << ',' << text::format_double(r.report.ap50) << ','
       << text::format_double(r.report.ap25) << '\n';
  }
  return os.str();
}

NmsCalibration calibrate_nms(const std::vector<DetectorFeatures>& detections, const DetectorConfig& config,
                             int target, const AblateConfig& grids, const NmsSettings& preferred) {
  if (detections.empty()) throw DataError("calibrate_nms: no scenes");
  NmsCalibration best;
  best.target = target;
  double best_gap = std::numeric_limits<double>::infinity();
  double best_pref = std::numeric_limits<double>::infinity();
  for (double score : grids.score_grid) {
    for (double iou : grids.nms_iou_grid) {
      const NmsSettings nms{score, iou, target};
      double total = 0.0;
      for (const auto& d : detections) total += static_cast<double>(decode_proposals(d.heads, config, nms).size());
      const double mean = total / static_cast<double>(detections.size());
      const double gap = std::abs(mean - target);
      const double pref = std::abs(score - preferred.score_threshold) + std::abs(iou - preferred.nms_iou);
      if (gap < best_gap || (gap == best_gap && pref < best_pref)) {
        best_gap = gap;
        best_pref = pref;
        best.nms = nms;
        best.mean_proposals = mean;
      }
    }
  }
  return best;
}

std::vector<CapAblationRow> ablate_proposal_cap(Model& model, const std::vector<LabeledScene>& val,
                                                const AblateConfig& ablate, int bench_repeats) {
  std::vector<DetectorFeatures> detections;
  for (const auto& s : val) detections.push_back(detector_features(model, s.cloud));
  std::vector<PointCloud> clouds;
  for (const auto& s : val) clouds.push_back(s.cloud);

  std::vector<CapAblationRow> rows;
  for (int target : ablate.proposal_targets) {
    CapAblationRow row;
    row.calibration = calibrate_nms(detections, model.config().detector, target, ablate, model.config().nms);
    std::vector<ScenePrediction> preds;
    for (const auto& d : detections) {
      ScenePrediction p;
      p.proposals = decode_proposals(d.heads, model.config().detector, row.calibration.nms);
      p.masks = predict_masks(d.feature_grid, p.proposals, model.config().refiner, model.refiner_params());
      preds.push_back(std::move(p));
    }
    row.report = evaluate_predictions(preds, val, model.config().detector.num_classes);
    const NmsSettings nms = row.calibration.nms;
    row.runtime = benchmark([&](const PointCloud& c) { predict(model, c, nms); }, clouds, bench_repeats);
    row.report.runtime_median_s = row.runtime.median_s;
    row.report.runtime_p90_s = row.runtime.p90_s;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string cap_rows_csv(const std::vector<CapAblationRow>& rows) {
  std::ostringstream os;
  os << "target,mean_proposals,score_threshold,nms_iou,max_proposals,ap,ap50,ap25,runtime_median_s,runtime_p90_s\n";
  for (const auto& r : rows) {
    const auto& c = r.calibration;
    os << c.target << ',' << text::format_double(c.mean_proposals) << ',' << text::format_double(c.nms.score_threshold)
       << ',' << text::format_double(c.nms.nms_iou) << ',' << c.nms.max_proposals << ','
       << text::format_double(r.report.ap) << ',' << text::format_double(r.report.ap50) << ','
       << text::format_double(r.report.ap25) << ',' << text::format_double(r.runtime.median_s) << ','
       << text::format_double(r.runtime.p90_s) << '\n';
  }
  return os.str();
}

}  // namespace td3d
