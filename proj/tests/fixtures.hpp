#pragma once

#include <filesystem>
#include <string>

#include "td3d/config.hpp"

namespace fixture {

// Small rooms and narrow networks so that training steps take milliseconds.
inline td3d::RunConfig tiny_config() {
  return td3d::RunConfig::from_text(R"(
scene.room_extent = 1,1,0.4
scene.object_count = 2,3
scene.points_per_object = 150,250
scene.floor_wall_points = 800
scene.box_size = 0.2,0.35
scene.sphere_size = 0.2,0.3
scene.cylinder_size = 0.2,0.3
data.n_train = 4
data.n_val = 2
detector.widths = 4,8,8,8
refiner.levels = 2
refiner.base_channels = 4
train.epochs = 3
train.batch_size = 2
train.val_every = 1
)",
                                    "<tiny>");
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("td3d_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixture
