#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "td3d/config.hpp"
#include "td3d/trainer.hpp"

namespace td3d {

struct Dataset {
  std::vector<LabeledScene> train;
  std::vector<LabeledScene> val;
};

// Scene i (train first, then val) uses scene seed data.seed + i.
Dataset generate_dataset(const RunConfig& config);

// Writes <dir>/{train,val}/scene_XXXX.scene plus .boxes sidecars and
// <dir>/manifest.json listing every file with its SHA-256. Throws ConfigError
// when dir exists and is non-empty unless `force`.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir, const std::string& config_hash, bool force);

// Loads one split listed in the manifest. Throws DataError listing every
// missing file, or naming a file whose hash does not match.
std::vector<LabeledScene> load_split(const std::filesystem::path& dir, const std::string& split);

// Throws ConfigError when `dir` exists and is not empty.
void require_empty_dir(const std::filesystem::path& dir);

}  // namespace td3d
