#include "td3d/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include "json.hpp"
#include <numeric>
#include <sstream>
#include <tuple>

#include "td3d/errors.hpp"

namespace td3d {
namespace {

struct RankedPrediction {
  double score;
  int scene;
  int index;
};

// IoU of every kept prediction of one scene against every GT instance.
struct SceneOverlaps {
  std::vector<std::vector<double>> iou;  // [prediction][instance]
  std::vector<bool> kept;
};

SceneOverlaps scene_overlaps(const std::vector<InstanceMask>& preds, const SceneGroundTruth& gt, int min_mask_size) {
  const std::size_t k = gt.instance_class.size();
  std::vector<int> gt_size(k, 0);
  for (int id : gt.point_instance) {
    if (id >= 0) ++gt_size[static_cast<std::size_t>(id)];
  }
  SceneOverlaps out;
  std::vector<int> inter(k);
  for (const auto& mask : preds) {
    if (mask.point_mask.size() != gt.num_points()) {
      throw DataError("prediction mask length " + std::to_string(mask.point_mask.size()) + " does not match scene point count " +
                      std::to_string(gt.num_points()));
    }
    std::fill(inter.begin(), inter.end(), 0);
    int size = 0;
    for (std::size_t p = 0; p < mask.point_mask.size(); ++p) {
      if (!mask.point_mask[p]) continue;
      ++size;
      const int id = gt.point_instance[p];
      if (id >= 0) ++inter[static_cast<std::size_t>(id)];
    }
    std::vector<double> row(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const int uni = size + gt_size[j] - inter[j];
      row[j] = uni > 0 ? static_cast<double>(inter[j]) / uni : 0.0;
    }
    out.iou.push_back(std::move(row));
    out.kept.push_back(size >= min_mask_size && size > 0);
  }
  return out;
}

struct MatchOutcome {
  std::vector<bool> tp;  // in rank order
  int num_gt = 0;
};

MatchOutcome match_class(const std::vector<std::vector<InstanceMask>>& predictions,
                         const std::vector<SceneGroundTruth>& ground_truth, const std::vector<SceneOverlaps>& overlaps,
                         int class_id, double threshold) {
  MatchOutcome out;
  std::vector<RankedPrediction> ranked;
  for (std::size_t s = 0; s < predictions.size(); ++s) {
    for (std::size_t i = 0; i < predictions[s].size(); ++i) {
      if (predictions[s][i].class_id == class_id && overlaps[s].kept[i]) {
        ranked.push_back({predictions[s][i].score, static_cast<int>(s), static_cast<int>(i)});
      }
    }
  }
  std::sort(ranked.begin(), ranked.end(), [](const RankedPrediction& a, const RankedPrediction& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.scene, a.index) < std::tie(b.scene, b.index);
  });
  std::vector<std::vector<bool>> taken(ground_truth.size());
  for (std::size_t s = 0; s < ground_truth.size(); ++s) {
    taken[s].assign(ground_truth[s].instance_class.size(), false);
    for (int c : ground_truth[s].instance_class) out.num_gt += c == class_id ? 1 : 0;
  }
  for (const auto& r : ranked) {
    const auto s = static_cast<std::size_t>(r.scene);
    const auto& row = overlaps[s].iou[static_cast<std::size_t>(r.index)];
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (taken[s][j] || ground_truth[s].instance_class[j] != class_id || row[j] < threshold) continue;
      if (row[j] > best_iou) {
        best_iou = row[j];
        best = static_cast<int>(j);
      }
    }
    if (best >= 0) taken[s][static_cast<std::size_t>(best)] = true;
    out.tp.push_back(best >= 0);
  }
  return out;
}

double area_under_pr(const MatchOutcome& m) {
  if (m.num_gt == 0 || m.tp.empty()) return 0.0;
  const std::size_t n = m.tp.size();
  std::vector<double> precision(n), recall(n);
  int tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += m.tp[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / m.num_gt;
  }
  for (std::size_t i = n - 1; i-- > 0;) precision[i] = std::max(precision[i], precision[i + 1]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

std::vector<SceneOverlaps> all_overlaps(const std::vector<std::vector<InstanceMask>>& predictions,
                                        const std::vector<SceneGroundTruth>& ground_truth, int min_mask_size) {
  if (predictions.size() != ground_truth.size()) {
    throw DataError("evaluate: " + std::to_string(predictions.size()) + " prediction sets for " +
                    std::to_string(ground_truth.size()) + " scenes");
  }
  std::vector<SceneOverlaps> overlaps;
  for (std::size_t s = 0; s < predictions.size(); ++s) {
    overlaps.push_back(scene_overlaps(predictions[s], ground_truth[s], min_mask_size));
  }
  return overlaps;
}

}  // namespace

SceneGroundTruth SceneGroundTruth::from_cloud(const PointCloud& cloud) {
  SceneGroundTruth gt;
  gt.point_instance = cloud.instance_ids;
  gt.instance_class.assign(static_cast<std::size_t>(cloud.num_instances()), -1);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.instance_ids[i] >= 0) gt.instance_class[static_cast<std::size_t>(cloud.instance_ids[i])] = cloud.semantic_ids[i];
  }
  return gt;
}

double mask_iou(const std::vector<bool>& pred, const std::vector<bool>& gt) {
  if (pred.size() != gt.size()) throw DataError("mask_iou: length mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += (pred[i] && gt[i]) ? 1 : 0;
    uni += (pred[i] || gt[i]) ? 1 : 0;
  }
  if (uni == 0) throw DataError("mask_iou: both masks are empty");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double average_precision(const std::vector<std::vector<InstanceMask>>& predictions,
                         const std::vector<SceneGroundTruth>& ground_truth, int class_id, double threshold,
                         int min_mask_size) {
  const auto overlaps = all_overlaps(predictions, ground_truth, min_mask_size);
  return area_under_pr(match_class(predictions, ground_truth, overlaps, class_id, threshold));
}

MetricsReport evaluate(const std::vector<std::vector<InstanceMask>>& predictions,
                       const std::vector<SceneGroundTruth>& ground_truth, const EvalOptions& options) {
  for (const auto& scene : predictions) {
    for (const auto& m : scene) {
      if (m.class_id < 0 || m.class_id >= options.num_classes) {
        throw DataError("prediction references unknown class " + std::to_string(m.class_id));
      }
    }
  }
  const auto overlaps = all_overlaps(predictions, ground_truth, options.min_mask_size);
  MetricsReport report;
  int tp50 = 0, num_pred50 = 0, num_gt50 = 0;
  for (int c = 0; c < options.num_classes; ++c) {
    const MatchOutcome at50 = match_class(predictions, ground_truth, overlaps, c, 0.5);
    tp50 += static_cast<int>(std::count(at50.tp.begin(), at50.tp.end(), true));
    num_pred50 += static_cast<int>(at50.tp.size());
    num_gt50 += at50.num_gt;
    if (at50.num_gt == 0) continue;
    ClassAp cls;
    for (double t : options.iou_thresholds) {
      cls.ap += area_under_pr(match_class(predictions, ground_truth, overlaps, c, t));
    }
    cls.ap /= static_cast<double>(options.iou_thresholds.size());
    cls.ap50 = area_under_pr(at50);
    cls.ap25 = area_under_pr(match_class(predictions, ground_truth, overlaps, c, 0.25));
    report.per_class[c] = cls;
  }
  if (!report.per_class.empty()) {
    for (const auto& [c, cls] : report.per_class) {
      report.ap += cls.ap;
      report.ap50 += cls.ap50;
      report.ap25 += cls.ap25;
    }
    const double n = static_cast<double>(report.per_class.size());
    report.ap /= n;
    report.ap50 /= n;
    report.ap25 /= n;
  }
  report.prec50 = num_pred50 > 0 ? static_cast<double>(tp50) / num_pred50 : 0.0;
  report.rec50 = num_gt50 > 0 ? static_cast<double>(tp50) / num_gt50 : 0.0;
  return report;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["ap"] = ap;
  j["ap50"] = ap50;
  j["ap25"] = ap25;
  j["prec50"] = prec50;
  j["rec50"] = rec50;
  j["runtime_median_s"] = runtime_median_s;
  j["runtime_p90_s"] = runtime_p90_s;
  nlohmann::ordered_json pc = nlohmann::ordered_json::object();
  for (const auto& [c, cls] : per_class) pc[std::to_string(c)] = {{"ap", cls.ap}, {"ap50", cls.ap50}, {"ap25", cls.ap25}};
  j["per_class"] = pc;
  return j.dump();
}

std::string MetricsReport::csv_header() { return "ap,ap50,ap25,prec50,rec50,runtime_median_s,runtime_p90_s"; }

std::string MetricsReport::csv_row() const {
  std::ostringstream os;
  os.precision(17);
  os << ap << ',' << ap50 << ',' << ap25 << ',' << prec50 << ',' << rec50 << ',' << runtime_median_s << ','
     << runtime_p90_s;
  return os.str();
}

double quantile(std::vector<double> samples, double q) {
  if (samples.empty()) return 0.0;
  std::sort(samples.begin(), samples.end());
  const double pos = q * static_cast<double>(samples.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, samples.size() - 1);
  return samples[lo] + (pos - static_cast<double>(lo)) * (samples[hi] - samples[lo]);
}

RuntimeStats benchmark(const std::function<void(const PointCloud&)>& pipeline, const std::vector<PointCloud>& scenes,
                       int repeats) {
  if (repeats < 3) throw ConfigError("benchmark: repeats must be >= 3");
  RuntimeStats stats;
  for (const auto& scene : scenes) {
    for (int r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      pipeline(scene);
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (r > 0) stats.samples_s.push_back(s);
    }
  }
  stats.median_s = quantile(stats.samples_s, 0.5);
  stats.p90_s = quantile(stats.samples_s, 0.9);
  return stats;
}

}  // namespace td3d
