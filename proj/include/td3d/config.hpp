#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "td3d/model.hpp"
#include "td3d/scene_data.hpp"
#include "td3d/trainer.hpp"

namespace td3d {

struct DataConfig {
  int n_train = 200;
  int n_val = 40;
  // Scene i of the dataset is generated with seed + i.
  std::uint64_t seed = 1;
};

struct AblateConfig {
  std::vector<int> unet_levels{0, 1, 2, 3, 4};
  std::vector<int> proposal_targets{20, 60, 100, 140};
  // Candidate NMS knobs searched when calibrating proposal counts.
  std::vector<double> score_grid{0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3};
  std::vector<double> nms_iou_grid{0.05, 0.1, 0.15, 0.2, 0.25, 0.35, 0.5, 0.7, 0.9};
};

// Every tunable of a run as flat `key = value` pairs.
struct RunConfig {
  std::uint64_t seed = 0;
  SceneConfig scene;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  int eval_min_mask_size = 1;
  int bench_repeats = 5;
  AblateConfig ablate;

  // Throws ConfigError on an unknown key or a value of the wrong type.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  static std::vector<std::string> keys();

  // Sorted `key = value` lines; independent of the order keys were set in.
  std::string canonical_text() const;
  // `train` with the run seed filled in.
  TrainConfig train_config() const;
  std::string hash() const;
  void validate() const;

  // Applies `key = value` lines (with `#` comments) on top of the defaults.
  static RunConfig from_text(std::string_view text, const std::string& source = "<config>");
  static RunConfig from_file(const std::filesystem::path& path);
};

}  // namespace td3d
