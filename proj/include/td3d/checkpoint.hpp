#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "td3d/nn/parameters.hpp"

namespace td3d {

// Named tensors plus metadata. On disk: a binary blob at `path` and a text
// manifest at `path` + ".manifest" listing tensor names and shapes, the blob's
// SHA-256, the config hash and the embedded config.
struct Checkpoint {
  std::string config_text;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, nn::Matrix>> tensors;

  const nn::Matrix* find(const std::string& name) const;
  std::string config_hash() const;
};

std::filesystem::path manifest_path_for(const std::filesystem::path& path);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);

// Throws ParseError/DataError on any inconsistency between blob and manifest;
// nothing is returned unless the whole checkpoint checks out.
Checkpoint load_checkpoint(const std::filesystem::path& path);

void append_tensors(Checkpoint& checkpoint, const std::string& prefix, const nn::ParameterSet& params);

// Throws DataError naming the first parameter that is missing or has a
// different shape. Does not modify `params` in that case.
void check_tensors(const Checkpoint& checkpoint, const std::string& prefix, const nn::ParameterSet& params);
void copy_tensors(const Checkpoint& checkpoint, const std::string& prefix, nn::ParameterSet& params);

}  // namespace td3d
