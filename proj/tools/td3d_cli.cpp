#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "json.hpp"
#include "td3d/checkpoint.hpp"
#include "td3d/config.hpp"
#include "td3d/dataset.hpp"
#include "td3d/errors.hpp"
#include "td3d/experiments.hpp"
#include "td3d/hashing.hpp"
#include "td3d/metrics.hpp"
#include "td3d/text_io.hpp"
#include "td3d/trainer.hpp"

namespace fs = std::filesystem;
using namespace td3d;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string out;
  bool force = false;

  bool customized() const { return !config_path.empty() || seed.has_value() || !overrides.empty(); }
};

void add_common(CLI::App* cmd, Common& c, bool needs_out) {
  cmd->add_option("--config", c.config_path, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "run seed (overrides the config)");
  cmd->add_option("--set", c.overrides, "override a config entry, key=value")->take_all();
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (needs_out) out->required();
  cmd->add_flag("--force", c.force, "allow writing into a non-empty output directory");
}

RunConfig apply_overrides(RunConfig cfg, const Common& c) {
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  cfg.validate();
  return cfg;
}

RunConfig resolve_config(const Common& c) {
  return apply_overrides(c.config_path.empty() ? RunConfig{} : RunConfig::from_file(c.config_path), c);
}

void announce(const RunConfig& cfg) { std::cerr << "config_hash " << cfg.hash() << std::endl; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

void write_predictions(const fs::path& path, const std::vector<InstanceMask>& masks) {
  std::ofstream out(path, std::ios::trunc);
  out << "TD3D-PRED v1\n";
  for (const auto& m : masks) {
    out << m.class_id << ' ' << text::format_double(m.score) << '\n';
    bool first = true;
    for (std::size_t i = 0; i < m.point_mask.size(); ++i) {
      if (!m.point_mask[i]) continue;
      out << (first ? "" : " ") << i;
      first = false;
    }
    out << '\n';
  }
  if (!out) throw DataError("cannot write " + path.string());
}

// Model and run config of a checkpoint. The embedded config is used unless
// the command line supplies one, in which case a hash mismatch is a warning.
struct LoadedModel {
  RunConfig config;
  Model model;
};

LoadedModel load_model(const fs::path& path, const Common& c) {
  const Checkpoint ck = load_checkpoint(path);
  RunConfig embedded = RunConfig::from_text(ck.config_text, manifest_path_for(path).string());
  RunConfig cfg = c.customized() ? resolve_config(c) : apply_overrides(embedded, c);
  if (cfg.hash() != ck.config_hash()) {
    std::cerr << "warning: config hash " << cfg.hash() << " differs from checkpoint config hash " << ck.config_hash()
              << std::endl;
  }
  Model model(cfg.model, cfg.seed);
  copy_tensors(ck, "detector/", model.detector_params());
  copy_tensors(ck, "refiner/", model.refiner_params());
  return {cfg, std::move(model)};
}

int cmd_config(const Common& c) {
  const RunConfig cfg = resolve_config(c);
  announce(cfg);
  std::cout << cfg.canonical_text();
  return 0;
}

int cmd_synth(const Common& c) {
  const RunConfig cfg = resolve_config(c);
  announce(cfg);
  if (!c.force) require_empty_dir(c.out);
  const Dataset d = generate_dataset(cfg);
  write_dataset(d, c.out, cfg.hash(), c.force);
  write_text(fs::path(c.out) / "config.txt", cfg.canonical_text());
  std::cout << "wrote " << d.train.size() << " train and " << d.val.size() << " val scenes to " << c.out << '\n';
  return 0;
}

int cmd_train(const Common& c, const std::string& data, bool resume) {
  const RunConfig cfg = resolve_config(c);
  announce(cfg);
  const fs::path out = c.out;
  const bool resuming = resume && fs::exists(out / "last.ckpt");
  if (!resuming && !c.force) require_empty_dir(out);
  const auto train = load_split(data, "train");
  const auto val = load_split(data, "val");
  fs::create_directories(out);
  write_text(out / "config.txt", cfg.canonical_text());

  Model model(cfg.model, cfg.seed);
  Trainer trainer(model, cfg.train_config());
  if (resuming) {
    const Checkpoint ck = load_checkpoint(out / "last.ckpt");
    if (ck.config_hash() != cfg.hash()) throw ConfigError("cannot resume: checkpoint was written with a different config");
    trainer.restore(ck);
    std::cerr << "resuming after epoch " << trainer.completed_epochs() << std::endl;
  }
  FitOptions opts;
  opts.out_dir = out;
  opts.config_text = cfg.canonical_text();
  opts.on_epoch = [](const EpochRecord& r) { std::cout << r.to_json() << std::endl; };
  trainer.fit(train, val, opts);
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data, const std::string& split,
             const std::string& oracle) {
  if (oracle != "none" && oracle != "gt-boxes" && oracle != "gt-masks") {
    throw ConfigError("unknown --oracle '" + oracle + "'");
  }
  if (oracle == "none" && checkpoint.empty()) {
    throw ConfigError("eval needs --checkpoint unless an oracle mode is selected");
  }
  std::optional<LoadedModel> loaded;
  RunConfig cfg;
  if (!checkpoint.empty()) {
    loaded.emplace(load_model(checkpoint, c));
    cfg = loaded->config;
  } else {
    cfg = resolve_config(c);
  }
  announce(cfg);
  const auto scenes = load_split(data, split);
  const fs::path out = c.out.empty() ? fs::path() : fs::path(c.out);
  if (!out.empty()) {
    if (!c.force) require_empty_dir(out);
    fs::create_directories(out / "predictions");
  }

  std::vector<ScenePrediction> preds;
  std::optional<Model> oracle_model;
  if (oracle == "gt-boxes" && !loaded) oracle_model.emplace(cfg.model, cfg.seed);
  Model* model = loaded ? &loaded->model : (oracle_model ? &*oracle_model : nullptr);
  for (const auto& s : scenes) {
    ScenePrediction p;
    if (oracle == "gt-masks") {
      const auto sets = instance_point_sets(s.cloud);
      for (std::size_t k = 0; k < sets.size(); ++k) {
        InstanceMask m;
        m.point_mask.assign(s.cloud.size(), false);
        for (int i : sets[k]) m.point_mask[static_cast<std::size_t>(i)] = true;
        m.class_id = s.boxes[k].class_id;
        m.score = 1.0;
        p.masks.push_back(std::move(m));
      }
    } else if (oracle == "gt-boxes") {
      p = predict_with_proposals(*model, s.cloud, proposals_from_gt(s.boxes));
    } else {
      p = predict(*model, s.cloud);
    }
    if (!out.empty()) write_predictions(out / "predictions" / (s.id + ".pred"), p.masks);
    preds.push_back(std::move(p));
  }
  EvalOptions eopt;
  eopt.num_classes = cfg.model.detector.num_classes;
  eopt.min_mask_size = cfg.eval_min_mask_size;
  std::vector<std::vector<InstanceMask>> masks;
  std::vector<SceneGroundTruth> gt;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    masks.push_back(preds[i].masks);
    gt.push_back(SceneGroundTruth::from_cloud(scenes[i].cloud));
  }
  const MetricsReport report = evaluate(masks, gt, eopt);
  std::cout << report.to_json() << '\n' << MetricsReport::csv_header() << '\n' << report.csv_row() << '\n';
  if (!out.empty()) {
    write_text(out / "report.json", report.to_json() + "\n");
    write_text(out / "report.csv", MetricsReport::csv_header() + "\n" + report.csv_row() + "\n");
  }
  return 0;
}

int cmd_ablate(const Common& c, const std::string& checkpoint, const std::string& data, const std::string& axis,
               const std::vector<int>& values) {
  if (axis != "unet_levels" && axis != "proposal_cap") throw ConfigError("unknown ablation axis '" + axis + "'");
  LoadedModel loaded = load_model(checkpoint, c);
  RunConfig& cfg = loaded.config;
  announce(cfg);
  const fs::path out = c.out;
  if (!c.force) require_empty_dir(out);
  const auto val = load_split(data, "val");
  std::string csv;
  if (axis == "unet_levels") {
    const std::vector<int> levels = values.empty() ? cfg.ablate.unet_levels : values;
    for (int l : levels) {
      if (l < 0 || l > 4) throw ConfigError("unet_levels values must be in [0, 4]");
    }
    const auto train = load_split(data, "train");
    TrainConfig tc = cfg.train_config();
    tc.augment = false;
    csv = level_rows_csv(ablate_unet_levels(loaded.model, train, val, levels, tc));
  } else {
    AblateConfig ab = cfg.ablate;
    if (!values.empty()) ab.proposal_targets = values;
    for (int t : ab.proposal_targets) {
      if (t < 1) throw ConfigError("proposal_cap values must be >= 1");
    }
    csv = cap_rows_csv(ablate_proposal_cap(loaded.model, val, ab, cfg.bench_repeats));
  }
  fs::create_directories(out);
  write_text(out / ("ablate_" + axis + ".csv"), csv);
  std::cout << csv;
  return 0;
}

int cmd_bench(const Common& c, const std::string& checkpoint, const std::string& data, std::optional<int> repeats) {
  LoadedModel loaded = load_model(checkpoint, c);
  announce(loaded.config);
  const int r = repeats.value_or(loaded.config.bench_repeats);
  const auto val = load_split(data, "val");
  std::vector<PointCloud> clouds;
  for (const auto& s : val) clouds.push_back(s.cloud);
  const RuntimeStats stats = benchmark([&](const PointCloud& cloud) { predict(loaded.model, cloud); }, clouds, r);
  nlohmann::ordered_json j;
  j["scenes"] = clouds.size();
  j["repeats"] = r;
  j["samples"] = stats.samples_s.size();
  j["runtime_median_s"] = stats.median_s;
  j["runtime_p90_s"] = stats.p90_s;
  std::cout << j.dump() << '\n';
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_text(fs::path(c.out) / "bench.json", j.dump() + "\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Top-down 3D instance segmentation on synthetic scenes"};
  app.require_subcommand(1);

  Common config_c, synth_c, train_c, eval_c, ablate_c, bench_c;
  auto* config_cmd = app.add_subcommand("config", "print the resolved configuration");
  add_common(config_cmd, config_c, false);

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth, synth_c, true);
  int n_train = -1, n_val = -1;
  synth->add_option("--n-train", n_train, "number of training scenes");
  synth->add_option("--n-val", n_val, "number of validation scenes");

  auto* train = app.add_subcommand("train", "train detector and refiner jointly");
  add_common(train, train_c, true);
  std::string train_data;
  bool resume = false;
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_flag("--resume", resume, "continue from <out>/last.ckpt");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_c, false);
  std::string eval_ckpt, eval_data, split = "val", oracle = "none";
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint blob");
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--split", split, "train or val")->check(CLI::IsMember({"train", "val"}));
  eval->add_option("--oracle", oracle, "none, gt-boxes or gt-masks");

  auto* ablate = app.add_subcommand("ablate", "run an ablation sweep");
  add_common(ablate, ablate_c, true);
  std::string ablate_ckpt, ablate_data, axis;
  std::vector<int> values;
  ablate->add_option("--checkpoint", ablate_ckpt, "checkpoint blob")->required();
  ablate->add_option("--data", ablate_data, "dataset directory")->required();
  ablate->add_option("--axis", axis, "unet_levels or proposal_cap")->required();
  ablate->add_option("--values", values, "values along the axis")->delimiter(',');

  auto* bench = app.add_subcommand("bench", "measure end-to-end inference time");
  add_common(bench, bench_c, false);
  std::string bench_ckpt, bench_data;
  std::optional<int> repeats;
  bench->add_option("--checkpoint", bench_ckpt, "checkpoint blob")->required();
  bench->add_option("--data", bench_data, "dataset directory")->required();
  bench->add_option("--repeats", repeats, "runs per scene, the first is discarded");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*config_cmd) return cmd_config(config_c);
    if (*synth) {
      if (n_train >= 0) synth_c.overrides.push_back("data.n_train=" + std::to_string(n_train));
      if (n_val >= 0) synth_c.overrides.push_back("data.n_val=" + std::to_string(n_val));
      return cmd_synth(synth_c);
    }
    if (*train) return cmd_train(train_c, train_data, resume);
    if (*eval) return cmd_eval(eval_c, eval_ckpt, eval_data, split, oracle);
    if (*ablate) return cmd_ablate(ablate_c, ablate_ckpt, ablate_data, axis, values);
    if (*bench) return cmd_bench(bench_c, bench_ckpt, bench_data, repeats);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
