// End-to-end acceptance runner: one PASS/FAIL line per criterion. Trained
// models are cached under the work directory so that a rerun only repeats the
// evaluation.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "td3d/checkpoint.hpp"
#include "td3d/config.hpp"
#include "td3d/dataset.hpp"
#include "td3d/errors.hpp"
#include "td3d/experiments.hpp"
#include "td3d/hashing.hpp"
#include "td3d/metrics.hpp"
#include "td3d/trainer.hpp"

using namespace td3d;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << x;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::string without_wall_seconds(const std::string& json_line) {
  auto j = nlohmann::ordered_json::parse(json_line);
  j.erase("wall_seconds");
  return j.dump();
}

std::string file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Every training step seen by this run; checked by criterion 4.
struct StepAudit {
  long steps = 0;
  long violations = 0;

  void operator()(int, const LossBreakdown& l) {
    ++steps;
    if (l.total != (l.l_cls + l.l_reg) + l.l_seg || l.decomposition_residual != 0.0) ++violations;
  }
};

StepAudit g_audit;

// ---------------------------------------------------------------- 1

Box3D random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> c(-1.0, 1.0), s(0.05, 1.0);
  return {Vec3(c(rng), c(rng), c(rng)), Vec3(s(rng), s(rng), s(rng))};
}

SparseGrid random_grid(std::mt19937_64& rng, int n, double voxel) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  PointCloud c;
  for (int i = 0; i < n; ++i) c.points.emplace_back(u(rng), u(rng), u(rng));
  c.semantic_ids.assign(c.points.size(), -1);
  c.instance_ids.assign(c.points.size(), -1);
  return voxelize(c, voxel);
}

Outcome geometry_oracles() {
  constexpr int kInstances = 1000;
  std::mt19937_64 rng(101);
  int iou_bad = 0, roi_bad = 0, nms_bad = 0, assign_bad = 0, match_bad = 0;

  for (int t = 0; t < kInstances; ++t) {
    const Box3D a = random_box(rng), b = random_box(rng);
    const double v = box_iou(a, b), o = oracle::iou(a, b);
    if (v != box_iou(b, a) || std::abs(v - o) > 1e-12 * std::max(1.0, o)) ++iou_bad;
  }

  for (int t = 0; t < kInstances; ++t) {
    if (t % 50 == 0) rng.discard(1);
    const SparseGrid grid = random_grid(rng, 400, 0.1);
    const Box3D box = random_box(rng);
    if (extract_roi(grid, {box, 0, 0.5}).voxel_indices != oracle::roi(grid, box)) ++roi_bad;
  }

  for (int t = 0; t < kInstances; ++t) {
    std::uniform_real_distribution<double> c(0.0, 1.0), s(0.1, 0.6), thr(0.05, 0.9);
    std::uniform_int_distribution<int> coarse(0, 3), level(1, 3);
    std::vector<ScoredBox> cands;
    for (int i = 0; i < 20; ++i) {
      ScoredBox sb;
      sb.proposal.box = {Vec3(c(rng), c(rng), c(rng)), Vec3(s(rng), s(rng), s(rng))};
      sb.proposal.score = coarse(rng) / 4.0 + 0.1;
      sb.proposal.class_id = i % 3;
      sb.coord = {coarse(rng), coarse(rng), coarse(rng)};
      sb.level = level(rng);
      cands.push_back(sb);
    }
    const double iou_thr = thr(rng);
    const std::size_t cap = 1 + rng() % 20;
    const auto got = greedy_nms(cands, iou_thr, cap);
    const auto want = oracle::nms(cands, iou_thr, cap);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i) {
      same = got[i].proposal.box.center == want[i].proposal.box.center && got[i].coord == want[i].coord &&
             got[i].level == want[i].level;
    }
    if (!same) ++nms_bad;
  }

  for (int t = 0; t < kInstances; ++t) {
    DetectorConfig cfg;
    cfg.voxel_size = 0.1;
    cfg.k_max = 1 + static_cast<int>(rng() % 6);
    const SparseGrid grid = random_grid(rng, 150, 0.1);
    std::vector<GroundTruthBox> gt;
    const int n_gt = 1 + static_cast<int>(rng() % 4);
    for (int k = 0; k < n_gt; ++k) gt.push_back({random_box(rng), k % 3});
    const nn::Pyramid pyr = nn::build_pyramid(grid.coords, DetectorConfig::kNumLevels);
    std::vector<HeadLevelOccupancy> occ;
    for (int l = 1; l < DetectorConfig::kNumLevels; ++l) occ.push_back({l, pyr.coords[static_cast<std::size_t>(l)]});
    const DetectionTargets targets = assign_targets(gt, occ, cfg);
    bool same = true;
    for (std::size_t l = 0; l < occ.size() && same; ++l) {
      const auto o = oracle::assign(gt, occ[l].coords, occ[l].level, cfg.voxel_size, cfg.k_max);
      for (std::size_t i = 0; i < occ[l].coords.size() && same; ++i) {
        const VoxelLabel lab = targets.levels[l].label[i];
        const int got = lab == VoxelLabel::kPositive ? 1 : lab == VoxelLabel::kIgnored ? -1 : 0;
        same = got == o.label[i] && targets.levels[l].gt_index[i] == o.gt[i];
      }
    }
    if (!same) ++assign_bad;
  }

  for (int t = 0; t < kInstances; ++t) {
    std::uniform_real_distribution<double> c(0.0, 1.0), s(0.2, 0.8);
    std::vector<GroundTruthBox> gt;
    std::vector<Proposal> props;
    const int n_gt = static_cast<int>(rng() % 5), n_p = static_cast<int>(rng() % 7);
    for (int i = 0; i < n_gt; ++i) gt.push_back({{Vec3(c(rng), c(rng), c(rng)), Vec3(s(rng), s(rng), s(rng))}, 0});
    for (int i = 0; i < n_p; ++i) props.push_back({{Vec3(c(rng), c(rng), c(rng)), Vec3(s(rng), s(rng), s(rng))}, 0, 0.5});
    const auto got = match_for_training(gt, props, 0.25);
    const auto want = oracle::match(gt, props, 0.25);
    bool same = got.pairs.size() == want.pairs.size() && got.unmatched_gt == want.unmatched_gt &&
                got.unmatched_proposals == want.unmatched_proposals;
    for (std::size_t i = 0; same && i < got.pairs.size(); ++i) {
      same = got.pairs[i].gt_index == want.pairs[i].gt_index && got.pairs[i].proposal_index == want.pairs[i].proposal_index;
    }
    if (!same) ++match_bad;
  }

  const int bad = iou_bad + roi_bad + nms_bad + assign_bad + match_bad;
  return {bad == 0, std::to_string(kInstances) + " instances each; mismatches box_iou=" + std::to_string(iou_bad) +
                        " extract_roi=" + std::to_string(roi_bad) + " nms=" + std::to_string(nms_bad) +
                        " assign=" + std::to_string(assign_bad) + " match=" + std::to_string(match_bad)};
}

// ---------------------------------------------------------------- 2

Outcome metric_oracle() {
  constexpr int kCases = 500;
  std::mt19937_64 rng(202);
  int bad = 0, nesting = 0;
  for (int t = 0; t < kCases; ++t) {
    const oracle::ToyCase toy = oracle::random_toy_case(rng);
    EvalOptions opt;
    opt.num_classes = toy.num_classes;
    const MetricsReport r = evaluate(toy.preds, toy.gts, opt);
    double ap = 0, ap50 = 0, ap25 = 0;
    int classes = 0;
    for (int c = 0; c < toy.num_classes; ++c) {
      int n_gt = 0;
      for (const auto& g : toy.gts) n_gt += static_cast<int>(std::count(g.instance_class.begin(), g.instance_class.end(), c));
      if (n_gt == 0) continue;
      ++classes;
      double sum = 0;
      for (int k = 0; k < 10; ++k) sum += oracle::ap(toy.preds, toy.gts, c, 0.5 + 0.05 * k);
      ap += sum / 10;
      ap50 += oracle::ap(toy.preds, toy.gts, c, 0.5);
      ap25 += oracle::ap(toy.preds, toy.gts, c, 0.25);
    }
    ap /= classes;
    ap50 /= classes;
    ap25 /= classes;
    const double tol = 1e-12;
    if (std::abs(r.ap - ap) > tol || std::abs(r.ap50 - ap50) > tol || std::abs(r.ap25 - ap25) > tol) ++bad;
    // AP averages ten thresholds, so equal values can round one ulp apart.
    if (!(r.ap <= r.ap50 + tol && r.ap50 <= r.ap25 + tol)) ++nesting;
  }

  // Perfect predictions on a random labeling.
  bool perfect = true;
  for (int t = 0; t < 20; ++t) {
    SceneGroundTruth g;
    const int k = 1 + static_cast<int>(rng() % 5);
    for (int i = 0; i < k; ++i) g.instance_class.push_back(static_cast<int>(rng() % 3));
    for (int p = 0; p < 30; ++p) g.point_instance.push_back(p < k ? p : static_cast<int>(rng() % (k + 1)) - 1);
    std::vector<InstanceMask> masks;
    for (int i = 0; i < k; ++i) {
      InstanceMask m;
      for (int p = 0; p < 30; ++p) m.point_mask.push_back(g.point_instance[static_cast<std::size_t>(p)] == i);
      m.class_id = g.instance_class[static_cast<std::size_t>(i)];
      m.score = 0.3 + 0.1 * i;
      masks.push_back(m);
    }
    const MetricsReport r = evaluate({masks}, {g}, {});
    perfect = perfect && r.ap == 1.0 && r.ap50 == 1.0 && r.ap25 == 1.0 && r.prec50 == 1.0 && r.rec50 == 1.0;
  }
  return {bad == 0 && nesting == 0 && perfect,
          std::to_string(kCases) + " toy cases; oracle mismatches=" + std::to_string(bad) +
              " nesting violations=" + std::to_string(nesting) + " perfect=" + (perfect ? "1.0" : "not 1.0")};
}

// ---------------------------------------------------------------- 3

RunConfig gradient_config() {
  RunConfig c = fixture::tiny_config();
  c.set("scene.object_count", "1,2");
  c.set("scene.points_per_object", "60,100");
  c.set("scene.floor_wall_points", "300");
  c.set("detector.widths", "2,4,4,4");
  c.set("refiner.base_channels", "2");
  return c;
}

Outcome gradient_checks() {
  constexpr int kInstances = 50;
  constexpr double kTol = 1e-4;
  std::mt19937_64 rng(303);
  std::vector<double> worst(4, 0.0);

  for (int t = 0; t < kInstances; ++t) {
    std::normal_distribution<double> n(0, 3);
    std::uniform_int_distribution<int> lab(-2, 2);
    nn::Matrix logits(12, 3);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = n(rng);
    std::vector<int> labels;
    for (int i = 0; i < 12; ++i) labels.push_back(lab(rng));
    nn::Matrix grad;
    focal_loss(logits, labels, {}, &grad);
    const nn::Matrix num = oracle::numeric_gradient(logits, [&] { return focal_loss(logits, labels, {}); });
    worst[0] = std::max(worst[0], oracle::rel_error(grad, num));
  }

  for (int t = 0; t < kInstances; ++t) {
    std::uniform_real_distribution<double> c(-0.2, 0.2), s(0.5, 1.5);
    std::vector<Box3D> pred, gt;
    for (int i = 0; i < 5; ++i) {
      pred.push_back({Vec3(c(rng), c(rng), c(rng)), Vec3(s(rng), s(rng), s(rng))});
      gt.push_back({Vec3(c(rng), c(rng), c(rng)), Vec3(s(rng), s(rng), s(rng))});
    }
    nn::Matrix grad;
    iou_loss(pred, gt, &grad);
    nn::Matrix x(5, 6);
    for (int i = 0; i < 5; ++i) x.row(i) << pred[static_cast<std::size_t>(i)].center.transpose(), pred[static_cast<std::size_t>(i)].size.transpose();
    const nn::Matrix num = oracle::numeric_gradient(x, [&] {
      std::vector<Box3D> p;
      for (int i = 0; i < 5; ++i) p.push_back({x.row(i).head<3>().transpose(), x.row(i).tail<3>().transpose()});
      return iou_loss(p, gt);
    });
    worst[1] = std::max(worst[1], oracle::rel_error(grad, num));
  }

  for (int t = 0; t < kInstances; ++t) {
    std::normal_distribution<double> n(0, 5);
    std::vector<nn::Matrix> logits;
    std::vector<std::vector<bool>> labels;
    for (int r = 0; r < 3; ++r) {
      const int m = 1 + static_cast<int>(rng() % 6);
      nn::Matrix x(m, 1);
      std::vector<bool> lab;
      for (int i = 0; i < m; ++i) {
        x(i, 0) = n(rng);
        lab.push_back((rng() & 1) != 0);
      }
      logits.push_back(x);
      labels.push_back(lab);
    }
    std::vector<nn::Matrix> grads;
    seg_loss(logits, labels, &grads);
    Eigen::Index total = 0;
    for (const auto& x : logits) total += x.rows();
    nn::Matrix analytic(total, 1), numeric(total, 1);
    Eigen::Index at = 0;
    for (std::size_t r = 0; r < logits.size(); ++r) {
      const Eigen::Index m = logits[r].rows();
      analytic.middleRows(at, m) = grads[r];
      numeric.middleRows(at, m) = oracle::numeric_gradient(logits[r], [&] { return seg_loss(logits, labels); });
      at += m;
    }
    worst[2] = std::max(worst[2], oracle::rel_error(analytic, numeric));
  }

  // Composite loss on tiny scenes with the refiner's proposals held fixed.
  RunConfig cfg = gradient_config();
  std::normal_distribution<double> jitter(0.0, 0.05);
  for (int t = 0; t < kInstances; ++t) {
    SceneConfig sc = cfg.scene;
    sc.seed = 5000 + static_cast<std::uint64_t>(t);
    Scene s = generate_scene(sc);
    const LabeledScene scene{"grad", std::move(s.cloud), std::move(s.boxes)};
    Model model(cfg.model, 7000 + static_cast<std::uint64_t>(t));
    // Zero-initialized biases leave ReLUs of empty neighbourhoods exactly on
    // their kink.
    for (nn::ParameterSet* set : {&model.detector_params(), &model.refiner_params()}) {
      for (std::size_t p = 0; p < set->size(); ++p) {
        if (!(*set)[p].name.ends_with(".b")) continue;
        for (Eigen::Index i = 0; i < (*set)[p].value.size(); ++i) (*set)[p].value.data()[i] += jitter(rng);
      }
    }
    std::vector<Proposal> fixed = proposals_from_gt(scene.boxes);
    {
      nn::Graph g(false);
      for (const Proposal& p : scene_loss(g, model, scene, false).proposals) fixed.push_back(p);
    }
    model.detector_params().zero_grad();
    model.refiner_params().zero_grad();
    {
      nn::Graph g(true);
      g.backward(scene_loss(g, model, scene, false, &fixed).total);
    }
    auto loss = [&] {
      nn::Graph g(false);
      return g.value(scene_loss(g, model, scene, false, &fixed).total)(0, 0);
    };
    std::vector<double> analytic, numeric;
    for (nn::ParameterSet* set : {&model.detector_params(), &model.refiner_params()}) {
      for (std::size_t p = 0; p < set->size(); ++p) {
        nn::Parameter& param = (*set)[p];
        for (int k = 0; k < 2; ++k) {
          const auto idx = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(param.value.size()));
          analytic.push_back(param.grad.data()[idx]);
          nn::Matrix one(1, 1);
          one(0, 0) = param.value.data()[idx];
          numeric.push_back(oracle::numeric_gradient(
              one,
              [&] {
                const double old = param.value.data()[idx];
                param.value.data()[idx] = one(0, 0);
                const double v = loss();
                param.value.data()[idx] = old;
                return v;
              },
              1e-8)(0, 0));
        }
      }
    }
    const auto as_matrix = [](const std::vector<double>& v) {
      return nn::Matrix(Eigen::Map<const nn::Matrix>(v.data(), static_cast<Eigen::Index>(v.size()), 1));
    };
    worst[3] = std::max(worst[3], oracle::rel_error(as_matrix(analytic), as_matrix(numeric)));
  }

  const bool pass = std::all_of(worst.begin(), worst.end(), [](double w) { return w < kTol; });
  std::ostringstream os;
  os << kInstances << " instances each; worst relative error focal=" << worst[0] << " iou=" << worst[1]
     << " seg=" << worst[2] << " composite=" << worst[3];
  return {pass, os.str()};
}

// ---------------------------------------------------------------- 5

Outcome gt_box_sanity(const std::vector<LabeledScene>& val, const RunConfig& cfg) {
  ModelConfig mc = cfg.model;
  mc.refiner.levels = 0;
  Model model(mc, 0);
  std::vector<ScenePrediction> preds;
  for (const auto& s : val) preds.push_back(predict_with_proposals(model, s.cloud, proposals_from_gt(s.boxes)));
  const MetricsReport r = evaluate_predictions(preds, val, mc.detector.num_classes);
  return {r.ap25 == 1.0 && r.ap50 >= 0.95, std::to_string(val.size()) + " val scenes; AP25=" + fmt(r.ap25) +
                                                " AP50=" + fmt(r.ap50) + " AP=" + fmt(r.ap)};
}

// ---------------------------------------------------------------- 9

Outcome reproducibility(const fs::path& work) {
  RunConfig cfg;
  cfg.set("data.n_train", "12");
  cfg.set("data.n_val", "4");
  cfg.set("train.epochs", "3");
  cfg.set("train.val_every", "1");
  const Dataset data = generate_dataset(cfg);
  std::vector<std::string> reports;
  std::vector<fs::path> dirs;
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = work / ("repro_" + std::to_string(run));
    fs::remove_all(dir);
    Model model(cfg.model, cfg.seed);
    Trainer trainer(model, cfg.train_config());
    trainer.fit(data.train, data.val, {dir, cfg.canonical_text(), {}, std::ref(g_audit)});
    reports.push_back(evaluate_model(model, data.val).to_json());
    dirs.push_back(dir);
  }
  const auto a = read_lines(dirs[0] / "log.jsonl"), b = read_lines(dirs[1] / "log.jsonl");
  bool logs_equal = a.size() == b.size() && a.size() == 3;
  for (std::size_t i = 0; logs_equal && i < a.size(); ++i) logs_equal = without_wall_seconds(a[i]) == without_wall_seconds(b[i]);
  const bool reports_equal = reports[0] == reports[1];
  const bool weights_equal = sha256_file(dirs[0] / "last.ckpt") == sha256_file(dirs[1] / "last.ckpt");
  return {logs_equal && reports_equal && weights_equal,
          std::string("2 runs x 3 epochs; logs ") + (logs_equal ? "identical" : "DIFFER") + ", reports " +
              (reports_equal ? "identical" : "DIFFER") + ", checkpoints " + (weights_equal ? "identical" : "DIFFER")};
}

// ---------------------------------------------------------------- 10

template <typename E>
bool throws_as(const std::function<void()>& f) {
  try {
    f();
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

Outcome persistence(const fs::path& work) {
  const fs::path dir = work / "persistence";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };

  const RunConfig cfg = fixture::tiny_config();
  Model model(cfg.model, 3);
  Trainer trainer(model, cfg.train_config());
  const Dataset data = generate_dataset(cfg);
  trainer.train_step(std::span<const LabeledScene>(data.train.data(), 2), 1e-3, true);
  const Checkpoint ck = trainer.snapshot(cfg.canonical_text());
  save_checkpoint(ck, dir / "a.ckpt");
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(back, dir / "b.ckpt");
  expect(file_bytes(dir / "a.ckpt") == file_bytes(dir / "b.ckpt"), "checkpoint blob re-save differs");
  expect(file_bytes(manifest_path_for(dir / "a.ckpt")) == file_bytes(manifest_path_for(dir / "b.ckpt")),
         "checkpoint manifest re-save differs");
  bool tensors_equal = back.tensors.size() == ck.tensors.size() && back.meta == ck.meta;
  for (std::size_t i = 0; tensors_equal && i < ck.tensors.size(); ++i) {
    tensors_equal = back.tensors[i].first == ck.tensors[i].first && back.tensors[i].second == ck.tensors[i].second;
  }
  expect(tensors_equal, "checkpoint tensors differ after load");

  // Scene files.
  for (const auto& s : data.train) {
    const fs::path p = dir / (s.id + ".scene");
    write_scene(s.cloud, p);
    write_boxes(s.boxes, boxes_path_for(p));
    const PointCloud c = read_scene(p);
    expect(c == s.cloud, "scene " + s.id + " does not round-trip");
    const auto boxes = read_boxes(boxes_path_for(p));
    bool same = boxes.size() == s.boxes.size();
    for (std::size_t i = 0; same && i < boxes.size(); ++i) {
      same = boxes[i].box.center == s.boxes[i].box.center && boxes[i].box.size == s.boxes[i].box.size &&
             boxes[i].class_id == s.boxes[i].class_id;
    }
    expect(same, "boxes of " + s.id + " do not round-trip");
    const fs::path q = dir / (s.id + ".again.scene");
    write_scene(c, q);
    expect(file_bytes(p) == file_bytes(q), "scene " + s.id + " bytes change on rewrite");
  }

  // Corrupted inputs.
  {
    std::string blob = file_bytes(dir / "a.ckpt");
    blob[blob.size() / 2] ^= 0x55;
    std::ofstream(dir / "a.ckpt", std::ios::binary | std::ios::trunc) << blob;
    expect(throws_as<DataError>([&] { load_checkpoint(dir / "a.ckpt"); }), "corrupted blob not rejected");
  }
  {
    auto lines = read_lines(manifest_path_for(dir / "b.ckpt"));
    lines.resize(3);
    std::ofstream out(manifest_path_for(dir / "b.ckpt"), std::ios::trunc);
    for (const auto& l : lines) out << l << '\n';
    out.close();
    expect(throws_as<ParseError>([&] { load_checkpoint(dir / "b.ckpt"); }), "truncated manifest not a parse error");
  }
  {
    const fs::path p = dir / "bad.scene";
    std::ofstream(p) << "TD3D-SCENE v1\n2 3\n0 0 0 -1 -1\n0 0 nan -1 -1\n";
    bool at_line_4 = false;
    try {
      read_scene(p);
    } catch (const ParseError& e) {
      at_line_4 = e.line() == 4;
    }
    expect(at_line_4, "NaN coordinate not reported as a parse error on line 4");
    std::ofstream(p, std::ios::trunc) << "";
    expect(throws_as<ParseError>([&] { read_scene(p); }), "empty scene not a parse error");
  }
  {
    const fs::path ds = dir / "dataset";
    write_dataset(data, ds, cfg.hash(), false);
    std::ofstream(ds / "val" / (data.val[0].id + ".boxes"), std::ios::app) << "\n";
    expect(throws_as<DataError>([&] { load_split(ds, "val"); }), "tampered dataset file not rejected");
    fs::remove(ds / "train" / (data.train[0].id + ".scene"));
    expect(throws_as<DataError>([&] { load_split(ds, "train"); }), "missing dataset file not rejected");
  }
  expect(throws_as<ConfigError>([] { RunConfig::from_text("detector.widths = 1,2\n"); }), "bad config not rejected");
  expect(throws_as<ConfigError>([] { RunConfig::from_text("no.such.key = 1\n"); }), "unknown key not rejected");

  std::string detail = failures.empty() ? "checkpoint, scene and box files round-trip bitwise; 8 corruption cases rejected"
                                        : failures.front() + (failures.size() > 1 ? " (+" + std::to_string(failures.size() - 1) + " more)" : "");
  return {failures.empty(), detail};
}

// ---------------------------------------------------------------- 6, 7, 8

struct TrainedSeed {
  std::uint64_t seed = 0;
  Model model;
  MetricsReport final_val;
};

// Trains the default model for `seed`, or reloads a completed run from the
// work directory when its embedded config matches.
TrainedSeed train_seed(const RunConfig& base, std::uint64_t seed, const Dataset& data, const fs::path& work) {
  RunConfig cfg = base;
  cfg.seed = seed;
  const fs::path dir = work / ("seed_" + std::to_string(seed));
  Model model(cfg.model, cfg.seed);
  Trainer trainer(model, cfg.train_config());
  bool reused = false;
  if (fs::exists(dir / "last.ckpt")) {
    try {
      const Checkpoint ck = load_checkpoint(dir / "last.ckpt");
      if (ck.config_hash() == cfg.hash()) {
        trainer.restore(ck);
        reused = trainer.completed_epochs() == cfg.train.epochs;
      }
    } catch (const std::exception& e) {
      std::cerr << "ignoring cached run in " << dir << ": " << e.what() << "\n";
    }
  }
  if (!reused) {
    fs::remove_all(dir);
    Model fresh(cfg.model, cfg.seed);
    model = fresh;
    Trainer t(model, cfg.train_config());
    const auto t0 = std::chrono::steady_clock::now();
    t.fit(data.train, data.val,
          {dir, cfg.canonical_text(),
           [seed](const EpochRecord& r) {
             std::cerr << "seed " << seed << " " << r.to_json() << "\n";
           },
           std::ref(g_audit)});
    std::cerr << "seed " << seed << " trained in " << fmt(seconds_since(t0), 1) << " s\n";
  } else {
    std::cerr << "seed " << seed << ": reusing " << dir / "last.ckpt" << "\n";
  }
  MetricsReport r = evaluate_model(model, data.val);
  return {seed, std::move(model), r};
}

}  // namespace

int main(int argc, char** argv) {
  // Usage: acceptance [work_dir] [--no-training]
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_work");
  const bool no_training = argc > 2 && std::string(argv[2]) == "--no-training";
  fs::create_directories(work);
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::pair<std::string, Outcome>> results;
  nlohmann::ordered_json summary;

  auto run = [&](const std::string& name, const std::function<Outcome()>& f) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    o.detail += " [" + fmt(seconds_since(t0), 1) + " s]";
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    results.emplace_back(name, o);
  };

  run("1 geometry oracles", geometry_oracles);
  run("2 metric oracle", metric_oracle);
  run("3 gradient checks", gradient_checks);
  run("9 reproducibility", [&] { return reproducibility(work); });
  run("10 persistence", [&] { return persistence(work); });

  const RunConfig standard;
  const Dataset data = generate_dataset(standard);
  run("5 ground-truth boxes with levels=0", [&] { return gt_box_sanity(data.val, standard); });

  std::vector<TrainedSeed> seeds;
  if (no_training) {
    std::cout << "skipping criteria 4, 6, 7, 8 (--no-training)" << std::endl;
    return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.second.pass; }) ? 0 : 1;
  }
  for (std::uint64_t seed : {0, 1, 2}) seeds.push_back(train_seed(standard, seed, data, work));

  run("8 end-to-end AP50 >= 0.75 for 2 of 3 seeds", [&] {
    int ok = 0;
    std::string detail = "AP50 per seed:";
    for (const auto& s : seeds) {
      ok += s.final_val.ap50 >= 0.75;
      detail += " " + fmt(s.final_val.ap50);
      summary["final_val"][std::to_string(s.seed)] = nlohmann::ordered_json::parse(s.final_val.to_json());
    }
    return Outcome{ok >= 2, detail};
  });

  run("6 U-Net depth trend (levels 2 >= 0 + 10 AP, 4 >= 0 + 12 AP)", [&] {
    std::map<int, double> mean_ap;
    std::string detail;
    for (const auto& s : seeds) {
      const auto rows = ablate_unet_levels(s.model, data.train, data.val, {0, 2, 4}, [&] {
        TrainConfig t = standard.train_config();
        t.seed = s.seed;
        return t;
      }());
      detail += "seed " + std::to_string(s.seed) + ":";
      for (const auto& row : rows) {
        mean_ap[row.levels] += row.report.ap / static_cast<double>(seeds.size());
        detail += " L" + std::to_string(row.levels) + "=" + fmt(row.report.ap);
        summary["unet_levels"][std::to_string(s.seed)][std::to_string(row.levels)] =
            nlohmann::ordered_json::parse(row.report.to_json());
      }
      detail += "; ";
    }
    detail += "mean AP L0=" + fmt(mean_ap[0]) + " L2=" + fmt(mean_ap[2]) + " L4=" + fmt(mean_ap[4]);
    return Outcome{mean_ap[2] >= mean_ap[0] + 0.10 && mean_ap[4] >= mean_ap[0] + 0.12, detail};
  });

  run("7 proposal-cap trend", [&] {
    Model& model = seeds.front().model;
    const auto rows = ablate_proposal_cap(model, data.val, standard.ablate, standard.bench_repeats);
    std::ostringstream os;
    bool monotone = true;
    std::map<int, double> ap;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      ap[r.calibration.target] = r.report.ap;
      if (i > 0 && r.runtime.median_s < rows[i - 1].runtime.median_s) monotone = false;
      os << "cap~" << r.calibration.target << ": mean=" << fmt(r.calibration.mean_proposals, 1)
         << " AP=" << fmt(r.report.ap) << " median=" << fmt(r.runtime.median_s * 1e3, 1) << "ms; ";
      summary["proposal_cap"].push_back({{"target", r.calibration.target},
                                         {"mean_proposals", r.calibration.mean_proposals},
                                         {"ap", r.report.ap},
                                         {"ap50", r.report.ap50},
                                         {"runtime_median_s", r.runtime.median_s},
                                         {"runtime_p90_s", r.runtime.p90_s}});
    }
    const bool gain = ap[60] - ap[20] >= 0.0;
    const bool plateau = std::abs(ap[140] - ap[60]) <= 0.02;
    os << "runtime " << (monotone ? "non-decreasing" : "NOT monotone");
    return Outcome{monotone && gain && plateau, os.str()};
  });

  run("4 loss decomposition on every step", [&] {
    return Outcome{g_audit.steps > 0 && g_audit.violations == 0,
                   std::to_string(g_audit.steps) + " steps audited, " + std::to_string(g_audit.violations) + " violations"};
  });

  int passed = 0;
  for (const auto& [name, o] : results) {
    passed += o.pass;
    summary["criteria"][name] = {{"pass", o.pass}, {"detail", o.detail}};
  }
  summary["wall_seconds"] = seconds_since(start);
  std::ofstream(work / "summary.json") << summary.dump(2) << "\n";
  std::cout << passed << "/" << results.size() << " criteria passed in " << fmt(seconds_since(start), 1) << " s"
            << std::endl;
  return passed == static_cast<int>(results.size()) ? 0 : 1;
}
