#include "td3d/trainer.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "td3d/errors.hpp"
#include "td3d/text_io.hpp"

namespace td3d {
namespace {

constexpr const char* kDetectorPrefix = "detector/";
constexpr const char* kRefinerPrefix = "refiner/";

std::mt19937_64 epoch_rng(std::uint64_t seed, int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  return std::mt19937_64(seq);
}

bool finite(double x) { return std::isfinite(x); }

// Clips the joint gradient norm of both parameter sets.
void clip_joint(nn::ParameterSet& a, nn::ParameterSet& b, double max_norm) {
  const double na = a.grad_norm();
  const double nb = b.grad_norm();
  const double norm = std::sqrt(na * na + nb * nb);
  if (norm > max_norm && norm > 0.0) {
    a.scale_grad(max_norm / norm);
    b.scale_grad(max_norm / norm);
  }
}

struct SegTerms {
  std::vector<nn::Var> logits;
  std::vector<std::vector<bool>> labels;
};

// U-Net logits and voxel labels of every matched (GT, proposal) pair.
SegTerms refine_matched(nn::Graph& g, nn::Var scene_features, const SparseGrid& grid, const LabeledScene& scene,
                        const std::vector<Proposal>& proposals, const RefinerConfig& config,
                        nn::ParameterSet& params) {
  SegTerms out;
  if (config.levels == 0) return out;
  const MatchResult match = match_for_training(scene.boxes, proposals, config.iou_match_threshold);
  std::vector<Coord> coords;
  for (const MatchPair& pair : match.pairs) {
    const RoI roi = extract_roi(grid, proposals[static_cast<std::size_t>(pair.proposal_index)]);
    if (roi.voxel_indices.empty()) continue;
    coords.clear();
    for (int v : roi.voxel_indices) coords.push_back(grid.coords[static_cast<std::size_t>(v)]);
    nn::Var input = roi_input(g, scene_features, grid, roi);
    out.logits.push_back(unet_forward(g, coords, input, config, params));
    const std::vector<bool> inst = instance_voxel_labels(grid, scene.cloud, pair.gt_index, config.label_rule);
    std::vector<bool> labels(roi.voxel_indices.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = inst[static_cast<std::size_t>(roi.voxel_indices[i])];
    out.labels.push_back(std::move(labels));
  }
  return out;
}

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

double meta_double(const Checkpoint& ck, const std::string& key) {
  auto it = ck.meta.find(key);
  double v = 0;
  if (it == ck.meta.end() || !text::parse_double(it->second, v)) throw DataError("checkpoint: missing or bad meta '" + key + "'");
  return v;
}

long long meta_int(const Checkpoint& ck, const std::string& key) {
  auto it = ck.meta.find(key);
  long long v = 0;
  if (it == ck.meta.end() || !text::parse_int(it->second, v)) throw DataError("checkpoint: missing or bad meta '" + key + "'");
  return v;
}

void check_moments(const Checkpoint& ck, const std::string& prefix, const nn::ParameterSet& params) {
  check_tensors(ck, "adam.m/" + prefix, params);
  check_tensors(ck, "adam.v/" + prefix, params);
}

void append_moments(Checkpoint& ck, const std::string& prefix, const nn::ParameterSet& params, const nn::AdamW& opt) {
  for (std::size_t i = 0; i < params.size(); ++i) ck.tensors.emplace_back("adam.m/" + prefix + params[i].name, opt.first_moments()[i]);
  for (std::size_t i = 0; i < params.size(); ++i) ck.tensors.emplace_back("adam.v/" + prefix + params[i].name, opt.second_moments()[i]);
}

void copy_moments(const Checkpoint& ck, const std::string& prefix, const nn::ParameterSet& params, nn::AdamW& opt) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    opt.first_moments()[i] = *ck.find("adam.m/" + prefix + params[i].name);
    opt.second_moments()[i] = *ck.find("adam.v/" + prefix + params[i].name);
  }
}

}  // namespace

std::pair<int, int> TrainConfig::resolved_drop_epochs() const {
  auto scaled = [&](int num) { return static_cast<int>(std::lround(static_cast<double>(epochs) * num / 330.0)); };
  const int d1 = lr_drop_epochs.first > 0 ? lr_drop_epochs.first : scaled(280);
  int d2 = lr_drop_epochs.second > 0 ? lr_drop_epochs.second : scaled(320);
  // Very short automatic schedules can round both drops onto one epoch.
  if (lr_drop_epochs.second <= 0) d2 = std::max(d2, d1 + 1);
  return {d1, d2};
}

int TrainConfig::warmup_epochs() const {
  return gt_warmup ? static_cast<int>(std::floor(warmup_fraction * epochs + 1e-9)) : 0;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr > 0)) throw ConfigError("train: lr must be positive");
  const auto [d1, d2] = resolved_drop_epochs();
  if (!(d1 < d2)) throw ConfigError("train: lr drop epochs must be strictly increasing");
  if (lr_drop_epochs.first > 0 && lr_drop_epochs.second > 0 && d2 >= epochs) {
    throw ConfigError("train: lr drop epochs must be below the epoch count");
  }
  if (!(lr_drop_factor > 0 && lr_drop_factor <= 1)) throw ConfigError("train: lr_drop_factor must be in (0, 1]");
  if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
  if (!(grad_clip > 0)) throw ConfigError("train: grad_clip must be positive");
  if (warmup_fraction < 0 || warmup_fraction > 1) throw ConfigError("train: warmup_fraction must be in [0, 1]");
  if (val_every < 1) throw ConfigError("train: val_every must be >= 1");
}

double learning_rate(const TrainConfig& config, int epoch) {
  const auto [d1, d2] = config.resolved_drop_epochs();
  double lr = config.lr;
  if (epoch > d1) lr *= config.lr_drop_factor;
  if (epoch > d2) lr *= config.lr_drop_factor;
  return lr;
}

LabeledScene augment_scene(const LabeledScene& scene, std::mt19937_64& rng) {
  const int quarter_turns = std::uniform_int_distribution<int>(0, 3)(rng);
  const bool flip_x = std::bernoulli_distribution(0.5)(rng);
  const bool flip_y = std::bernoulli_distribution(0.5)(rng);
  auto apply = [&](Vec3 p) {
    for (int k = 0; k < quarter_turns; ++k) p = Vec3(-p.y(), p.x(), p.z());
    if (flip_x) p.x() = -p.x();
    if (flip_y) p.y() = -p.y();
    return p;
  };
  LabeledScene out = scene;
  for (auto& p : out.cloud.points) p = apply(p);
  for (auto& b : out.boxes) {
    b.box.center = apply(b.box.center);
    if (quarter_turns % 2 == 1) std::swap(b.box.size.x(), b.box.size.y());
  }
  return out;
}

std::string EpochRecord::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["l_cls"] = loss.l_cls;
  j["l_reg"] = loss.l_reg;
  j["l_seg"] = loss.l_seg;
  j["total"] = loss.total;
  j["val_AP"] = val ? nlohmann::ordered_json(val->ap) : nlohmann::ordered_json(nullptr);
  j["val_AP50"] = val ? nlohmann::ordered_json(val->ap50) : nlohmann::ordered_json(nullptr);
  j["val_AP25"] = val ? nlohmann::ordered_json(val->ap25) : nlohmann::ordered_json(nullptr);
  j["wall_seconds"] = wall_seconds;
  return j.dump();
}

Trainer::Trainer(Model& model, TrainConfig config)
    : model_(model),
      config_(config),
      detector_opt_(model.detector_params(), {0.9, 0.999, 1e-8, config.weight_decay}),
      refiner_opt_(model.refiner_params(), {0.9, 0.999, 1e-8, config.weight_decay}) {
  config_.validate();
}

SceneLoss scene_loss(nn::Graph& g, Model& model, const LabeledScene& scene, bool inject_gt,
                     const std::vector<Proposal>* fixed_proposals) {
  auto& dparams = model.detector_params();
  auto& rparams = model.refiner_params();
  const auto& mcfg = model.config();
  const SparseGrid grid = voxelize(scene.cloud, mcfg.detector.voxel_size);
  const BackboneOutput bb = backbone_forward(g, grid, dparams, mcfg.detector);
  const std::vector<HeadOutput> heads = head_forward(g, bb, dparams, mcfg.detector);
  std::vector<HeadLevelOccupancy> occupancy;
  for (const auto& h : heads) occupancy.push_back({h.level, h.coords});
  const DetectionTargets targets = assign_targets(scene.boxes, occupancy, mcfg.detector);
  const DetectionLosses det = detection_losses(g, heads, targets, scene.boxes, mcfg.detector);

  SceneLoss out;
  if (fixed_proposals) {
    out.proposals = *fixed_proposals;
  } else {
    out.proposals = decode_proposals(detach(g, heads), mcfg.detector, mcfg.nms);
    if (inject_gt) {
      for (const Proposal& p : proposals_from_gt(scene.boxes)) out.proposals.push_back(p);
    }
  }
  const SegTerms seg_terms = refine_matched(g, bb.levels[0].features, grid, scene, out.proposals, mcfg.refiner, rparams);
  out.cls = det.cls;
  out.reg = det.reg;
  out.seg = seg_loss(g, seg_terms.logits, seg_terms.labels);
  const std::array<nn::Var, 3> terms{out.cls, out.reg, out.seg};
  out.total = nn::sum_scalars(g, terms);
  return out;
}

LossBreakdown Trainer::train_step(std::span<const LabeledScene> batch, double lr, bool inject_gt) {
  if (batch.empty()) throw DataError("train_step: empty batch");
  auto& dparams = model_.detector_params();
  auto& rparams = model_.refiner_params();
  dparams.zero_grad();
  rparams.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double sum_cls = 0.0, sum_reg = 0.0, sum_seg = 0.0, residual = 0.0;
  for (const LabeledScene& scene : batch) {
    nn::Graph g(true);
    const SceneLoss loss = scene_loss(g, model_, scene, inject_gt);
    const double l_cls = g.value(loss.cls)(0, 0);
    const double l_reg = g.value(loss.reg)(0, 0);
    const double l_seg = g.value(loss.seg)(0, 0);
    if (!finite(l_cls) || !finite(l_reg) || !finite(l_seg)) {
      throw NumericError("non-finite loss on scene '" + scene.id + "': l_cls=" + text::format_double(l_cls) +
                         " l_reg=" + text::format_double(l_reg) + " l_seg=" + text::format_double(l_seg));
    }
    g.backward(loss.total, inv_b);
    sum_cls += l_cls;
    sum_reg += l_reg;
    sum_seg += l_seg;
    residual = std::max(residual, std::abs(g.value(loss.total)(0, 0) - ((l_cls + l_reg) + l_seg)));
  }
  clip_joint(dparams, rparams, config_.grad_clip);
  detector_opt_.step(lr);
  refiner_opt_.step(lr);

  LossBreakdown out;
  out.l_cls = sum_cls * inv_b;
  out.l_reg = sum_reg * inv_b;
  out.l_seg = sum_seg * inv_b;
  out.total = (out.l_cls + out.l_reg) + out.l_seg;
  out.decomposition_residual = residual;
  return out;
}

std::vector<EpochRecord> Trainer::fit(const std::vector<LabeledScene>& train, const std::vector<LabeledScene>& val,
                                      const FitOptions& options) {
  if (train.empty()) throw DataError("fit: empty training set");
  std::ofstream log;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    const auto log_path = options.out_dir / "log.jsonl";
    // Keep only records of epochs that are already part of the restored state.
    std::vector<std::string> kept;
    if (epoch_ > 0) {
      std::ifstream in(log_path);
      std::string line;
      while (static_cast<int>(kept.size()) < epoch_ && std::getline(in, line)) kept.push_back(line);
    }
    log.open(log_path, std::ios::trunc);
    for (const auto& line : kept) log << line << '\n';
    log.flush();
  }

  std::vector<EpochRecord> records;
  const auto batch_size = static_cast<std::size_t>(config_.batch_size);
  for (int e = epoch_ + 1; e <= config_.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng = epoch_rng(config_.seed, e);
    const std::vector<std::size_t> order = shuffled(train.size(), rng);
    const bool inject = e <= config_.warmup_epochs();
    const double lr = learning_rate(config_, e);

    EpochRecord rec;
    rec.epoch = e;
    int steps = 0;
    std::vector<LabeledScene> batch;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
        const LabeledScene& s = train[order[i]];
        batch.push_back(config_.augment ? augment_scene(s, rng) : s);
      }
      const LossBreakdown l = train_step(batch, lr, inject);
      rec.loss.l_cls += l.l_cls;
      rec.loss.l_reg += l.l_reg;
      rec.loss.l_seg += l.l_seg;
      ++steps;
      if (options.on_step) options.on_step(e, l);
    }
    rec.loss.l_cls /= steps;
    rec.loss.l_reg /= steps;
    rec.loss.l_seg /= steps;
    rec.loss.total = (rec.loss.l_cls + rec.loss.l_reg) + rec.loss.l_seg;

    if (!val.empty() && (e % config_.val_every == 0 || e == config_.epochs)) rec.val = evaluate_model(model_, val);
    epoch_ = e;
    bool improved = false;
    if (rec.val && rec.val->ap > best_val_ap_) {
      best_val_ap_ = rec.val->ap;
      improved = true;
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log.is_open()) {
      log << rec.to_json() << '\n';
      log.flush();
      const Checkpoint ck = snapshot(options.config_text);
      if (improved) save_checkpoint(ck, options.out_dir / "best.ckpt");
      save_checkpoint(ck, options.out_dir / "last.ckpt");
    }
    if (options.on_epoch) options.on_epoch(rec);
    records.push_back(std::move(rec));
  }
  return records;
}

Checkpoint Trainer::snapshot(const std::string& config_text) const {
  Checkpoint ck;
  ck.config_text = config_text;
  ck.meta["epoch"] = std::to_string(epoch_);
  ck.meta["optimizer_steps"] = std::to_string(detector_opt_.steps());
  ck.meta["best_val_ap"] = text::format_double(best_val_ap_);
  append_tensors(ck, kDetectorPrefix, model_.detector_params());
  append_tensors(ck, kRefinerPrefix, model_.refiner_params());
  append_moments(ck, kDetectorPrefix, model_.detector_params(), detector_opt_);
  append_moments(ck, kRefinerPrefix, model_.refiner_params(), refiner_opt_);
  return ck;
}

void Trainer::restore(const Checkpoint& ck) {
  check_tensors(ck, kDetectorPrefix, model_.detector_params());
  check_tensors(ck, kRefinerPrefix, model_.refiner_params());
  check_moments(ck, kDetectorPrefix, model_.detector_params());
  check_moments(ck, kRefinerPrefix, model_.refiner_params());
  const long long epoch = meta_int(ck, "epoch");
  const long long steps = meta_int(ck, "optimizer_steps");
  const double best = meta_double(ck, "best_val_ap");
  if (epoch < 0 || epoch > config_.epochs || steps < 0) throw DataError("checkpoint: epoch or step count out of range");

  copy_tensors(ck, kDetectorPrefix, model_.detector_params());
  copy_tensors(ck, kRefinerPrefix, model_.refiner_params());
  copy_moments(ck, kDetectorPrefix, model_.detector_params(), detector_opt_);
  copy_moments(ck, kRefinerPrefix, model_.refiner_params(), refiner_opt_);
  detector_opt_.set_steps(static_cast<long>(steps));
  refiner_opt_.set_steps(static_cast<long>(steps));
  epoch_ = static_cast<int>(epoch);
  best_val_ap_ = best;
}

MetricsReport evaluate_predictions(const std::vector<ScenePrediction>& predictions,
                                   const std::vector<LabeledScene>& scenes, int num_classes) {
  std::vector<std::vector<InstanceMask>> masks;
  std::vector<SceneGroundTruth> gt;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    masks.push_back(predictions.at(i).masks);
    gt.push_back(SceneGroundTruth::from_cloud(scenes[i].cloud));
  }
  EvalOptions opt;
  opt.num_classes = num_classes;
  return evaluate(masks, gt, opt);
}

MetricsReport evaluate_model(Model& model, const std::vector<LabeledScene>& scenes) {
  std::vector<ScenePrediction> preds;
  for (const auto& s : scenes) preds.push_back(predict(model, s.cloud));
  return evaluate_predictions(preds, scenes, model.config().detector.num_classes);
}

void fit_refiner(Model& model, const std::vector<LabeledScene>& train, const TrainConfig& config) {
  config.validate();
  if (train.empty()) throw DataError("fit_refiner: empty training set");
  const RefinerConfig& rcfg = model.config().refiner;
  if (rcfg.levels == 0) return;
  struct Cached {
    SparseGrid grid;
    std::vector<Proposal> proposals;
  };
  std::vector<Cached> cache;
  for (const auto& s : train) {
    DetectorPass pass = run_detector(model, s.cloud, model.config().nms);
    cache.push_back({std::move(pass.feature_grid), std::move(pass.proposals)});
  }
  auto& params = model.refiner_params();
  nn::AdamW opt(params, {0.9, 0.999, 1e-8, config.weight_decay});
  const auto batch_size = static_cast<std::size_t>(config.batch_size);
  for (int e = 1; e <= config.epochs; ++e) {
    std::mt19937_64 rng = epoch_rng(config.seed, e);
    const std::vector<std::size_t> order = shuffled(train.size(), rng);
    const bool inject = e <= config.warmup_epochs();
    const double lr = learning_rate(config, e);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      params.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const LabeledScene& scene = train[order[i]];
        const Cached& c = cache[order[i]];
        std::vector<Proposal> proposals = c.proposals;
        if (inject) {
          for (const Proposal& p : proposals_from_gt(scene.boxes)) proposals.push_back(p);
        }
        nn::Graph g(true);
        const nn::Var features = g.constant(c.grid.features);
        const SegTerms terms = refine_matched(g, features, c.grid, scene, proposals, rcfg, params);
        const nn::Var loss = seg_loss(g, terms.logits, terms.labels);
        if (!finite(g.value(loss)(0, 0))) throw NumericError("non-finite segmentation loss on scene '" + scene.id + "'");
        g.backward(loss, inv_b);
      }
      nn::clip_grad_norm(params, config.grad_clip);
      opt.step(lr);
    }
  }
}

}  // namespace td3d
