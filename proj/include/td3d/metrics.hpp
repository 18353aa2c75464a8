#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "td3d/refiner.hpp"
#include "td3d/scene_data.hpp"

namespace td3d {

// Ground-truth instances of one scene as a per-point instance id (-1 for
// background) plus per-instance class.
struct SceneGroundTruth {
  std::vector<int> point_instance;
  std::vector<int> instance_class;

  static SceneGroundTruth from_cloud(const PointCloud& cloud);
  std::size_t num_points() const { return point_instance.size(); }
};

// |pred & gt| / |pred | gt| over point indices. Throws DataError when the
// lengths differ or the union is empty.
double mask_iou(const std::vector<bool>& pred, const std::vector<bool>& gt);

struct ClassAp {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap25 = 0.0;
};

struct MetricsReport {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap25 = 0.0;
  std::map<int, ClassAp> per_class;
  double prec50 = 0.0;
  double rec50 = 0.0;
  double runtime_median_s = 0.0;
  double runtime_p90_s = 0.0;

  std::string to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

struct EvalOptions {
  int num_classes = 3;
  // Thresholds averaged into `ap`.
  std::vector<double> iou_thresholds{0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};
  // Predictions with fewer points are discarded.
  int min_mask_size = 1;
};

// Average precision of one class at one IoU threshold: predictions sorted by
// score (ties by scene, then mask index) are greedily matched to the
// highest-IoU unmatched GT of the class; AP is the area under the
// all-point-interpolated precision-recall curve.
double average_precision(const std::vector<std::vector<InstanceMask>>& predictions,
                         const std::vector<SceneGroundTruth>& ground_truth, int class_id, double threshold,
                         int min_mask_size = 1);

// Throws DataError on a scene count mismatch or a prediction of an unknown
// class.
MetricsReport evaluate(const std::vector<std::vector<InstanceMask>>& predictions,
                       const std::vector<SceneGroundTruth>& ground_truth, const EvalOptions& options = {});

struct RuntimeStats {
  double median_s = 0.0;
  double p90_s = 0.0;
  std::vector<double> samples_s;
};

// Runs `pipeline` `repeats` times per scene and drops each scene's first run
// as warm-up. Throws ConfigError when repeats < 3.
RuntimeStats benchmark(const std::function<void(const PointCloud&)>& pipeline, const std::vector<PointCloud>& scenes,
                       int repeats);

// Linear-interpolated quantile of unsorted samples, q in [0, 1].
double quantile(std::vector<double> samples, double q);

}  // namespace td3d
