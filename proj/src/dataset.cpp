#include "td3d/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "td3d/errors.hpp"
#include "td3d/hashing.hpp"

namespace td3d {
namespace {

std::string scene_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%04d", index);
  return buf;
}

}  // namespace

Dataset generate_dataset(const RunConfig& config) {
  config.validate();
  Dataset d;
  const int total = config.data.n_train + config.data.n_val;
  for (int i = 0; i < total; ++i) {
    SceneConfig sc = config.scene;
    sc.seed = config.data.seed + static_cast<std::uint64_t>(i);
    Scene s = generate_scene(sc);
    auto& split = i < config.data.n_train ? d.train : d.val;
    split.push_back({scene_name(i), std::move(s.cloud), std::move(s.boxes)});
  }
  return d;
}

void require_empty_dir(const std::filesystem::path& dir) {
  if (std::filesystem::exists(dir) &&
      (!std::filesystem::is_directory(dir) || !std::filesystem::is_empty(dir))) {
    throw ConfigError("output directory " + dir.string() + " exists and is not empty (use --force)");
  }
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir, const std::string& config_hash, bool force) {
  if (!force) require_empty_dir(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "TD3D-DATASET v1";
  manifest["config_hash"] = config_hash;
  manifest["n_train"] = dataset.train.size();
  manifest["n_val"] = dataset.val.size();
  nlohmann::ordered_json files = nlohmann::ordered_json::array();
  for (const char* split : {"train", "val"}) {
    const auto& scenes = std::string(split) == "train" ? dataset.train : dataset.val;
    std::filesystem::create_directories(dir / split);
    for (const auto& s : scenes) {
      const std::string rel = std::string(split) + "/" + s.id + ".scene";
      const auto path = dir / rel;
      write_scene(s.cloud, path);
      write_boxes(s.boxes, boxes_path_for(path));
      files.push_back({{"split", split},
                       {"id", s.id},
                       {"scene", rel},
                       {"scene_sha256", sha256_file(path)},
                       {"boxes", std::string(split) + "/" + s.id + ".boxes"},
                       {"boxes_sha256", sha256_file(boxes_path_for(path))}});
    }
  }
  manifest["files"] = files;
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
}

std::vector<LabeledScene> load_split(const std::filesystem::path& dir, const std::string& split) {
  const auto mpath = dir / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw DataError("dataset manifest " + mpath.string() + " not found");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(mpath.string() + ": " + e.what());
  }
  if (!manifest.contains("files") || !manifest["files"].is_array()) throw DataError(mpath.string() + ": no file list");

  std::vector<std::string> missing;
  std::vector<nlohmann::json> entries;
  for (const auto& f : manifest["files"]) {
    if (f.value("split", "") != split) continue;
    for (const char* key : {"scene", "boxes"}) {
      const auto p = dir / f.at(key).get<std::string>();
      if (!std::filesystem::exists(p)) missing.push_back(p.string());
    }
    entries.push_back(f);
  }
  if (!missing.empty()) {
    std::string msg = "dataset is missing " + std::to_string(missing.size()) + " file(s):";
    for (const auto& m : missing) msg += "\n  " + m;
    throw DataError(msg);
  }
  std::vector<LabeledScene> out;
  for (const auto& f : entries) {
    const auto scene_path = dir / f.at("scene").get<std::string>();
    const auto boxes_path = dir / f.at("boxes").get<std::string>();
    if (sha256_file(scene_path) != f.at("scene_sha256").get<std::string>()) {
      throw DataError(scene_path.string() + ": content hash does not match the manifest");
    }
    if (sha256_file(boxes_path) != f.at("boxes_sha256").get<std::string>()) {
      throw DataError(boxes_path.string() + ": content hash does not match the manifest");
    }
    LabeledScene s;
    s.id = f.at("id").get<std::string>();
    s.cloud = read_scene(scene_path);
    s.boxes = read_boxes(boxes_path);
    if (static_cast<int>(s.boxes.size()) != s.cloud.num_instances()) {
      throw DataError(boxes_path.string() + ": box count does not match the scene's instance count");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace td3d
