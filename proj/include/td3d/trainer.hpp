#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "td3d/checkpoint.hpp"
#include "td3d/metrics.hpp"
#include "td3d/model.hpp"
#include "td3d/nn/optimizer.hpp"

namespace td3d {

struct TrainConfig {
  int epochs = 33;
  int batch_size = 6;
  double lr = 1e-3;
  // 1-based epochs after which the learning rate is multiplied by
  // lr_drop_factor. Non-positive values select round(epochs * 280 / 330) and
  // round(epochs * 320 / 330).
  std::pair<int, int> lr_drop_epochs{0, 0};
  double lr_drop_factor = 0.1;
  double weight_decay = 1e-4;
  double grad_clip = 10.0;
  // Ground-truth boxes are added to the refiner's proposals during the first
  // floor(warmup_fraction * epochs) epochs.
  bool gt_warmup = true;
  double warmup_fraction = 0.1;
  bool augment = true;
  // Validate every val_every epochs and after the last one.
  int val_every = 3;
  std::uint64_t seed = 0;

  std::pair<int, int> resolved_drop_epochs() const;
  int warmup_epochs() const;
  void validate() const;
};

// Learning rate used during 1-based epoch `epoch`.
double learning_rate(const TrainConfig& config, int epoch);

// Batch means; total = (l_cls + l_reg) + l_seg.
struct LossBreakdown {
  double l_cls = 0.0;
  double l_reg = 0.0;
  double l_seg = 0.0;
  double total = 0.0;
  // Largest |graph total - ((cls + reg) + seg)| over the batch's scenes.
  double decomposition_residual = 0.0;
};

struct LabeledScene {
  std::string id;
  PointCloud cloud;
  std::vector<GroundTruthBox> boxes;
};

// Per-scene loss terms; total = (cls + reg) + seg.
struct SceneLoss {
  nn::Var cls;
  nn::Var reg;
  nn::Var seg;
  nn::Var total;
  // Proposals the refiner was trained on.
  std::vector<Proposal> proposals;
};

// Builds the composite loss of one scene. Proposals are decoded from the
// detector (plus GT boxes when inject_gt) unless `fixed_proposals` is given.
SceneLoss scene_loss(nn::Graph& g, Model& model, const LabeledScene& scene, bool inject_gt,
                     const std::vector<Proposal>* fixed_proposals = nullptr);

// Random multiple of 90 degrees about z followed by optional x and y flips.
// Boxes stay axis-aligned and tight.
LabeledScene augment_scene(const LabeledScene& scene, std::mt19937_64& rng);

struct EpochRecord {
  int epoch = 0;
  LossBreakdown loss;
  std::optional<MetricsReport> val;
  double wall_seconds = 0.0;

  std::string to_json() const;
};

struct FitOptions {
  // Receives log.jsonl, last.ckpt and best.ckpt when non-empty.
  std::filesystem::path out_dir;
  // Embedded in checkpoints.
  std::string config_text;
  std::function<void(const EpochRecord&)> on_epoch;
  // Called after every optimizer step with the 1-based epoch.
  std::function<void(int, const LossBreakdown&)> on_step;
};

class Trainer {
 public:
  Trainer(Model& model, TrainConfig config);

  // One optimizer step on the mean loss of the batch. Throws NumericError
  // naming the scene when a loss is not finite.
  LossBreakdown train_step(std::span<const LabeledScene> batch, double lr, bool inject_gt);

  // Runs the remaining epochs, validating on `val` and writing logs and
  // checkpoints per `options`. Returns the records of the epochs run here.
  std::vector<EpochRecord> fit(const std::vector<LabeledScene>& train, const std::vector<LabeledScene>& val,
                               const FitOptions& options = {});

  int completed_epochs() const { return epoch_; }
  double best_val_ap() const { return best_val_ap_; }
  long optimizer_steps() const { return detector_opt_.steps(); }

  Checkpoint snapshot(const std::string& config_text) const;
  // Validates every tensor before changing any state.
  void restore(const Checkpoint& checkpoint);

 private:
  Model& model_;
  TrainConfig config_;
  nn::AdamW detector_opt_;
  nn::AdamW refiner_opt_;
  int epoch_ = 0;
  double best_val_ap_ = -1.0;
};

MetricsReport evaluate_model(Model& model, const std::vector<LabeledScene>& scenes);

// Same as evaluate_model for a given proposal source.
MetricsReport evaluate_predictions(const std::vector<ScenePrediction>& predictions,
                                   const std::vector<LabeledScene>& scenes, int num_classes);

// Retrains only the refiner on proposals of the frozen detector. Backbone
// features and proposals are computed once per scene; no augmentation.
void fit_refiner(Model& model, const std::vector<LabeledScene>& train, const TrainConfig& config);

}  // namespace td3d
