#pragma once

#include <Eigen/Core>

namespace td3d::nn {

// Row-major so that one row holds the feature vector of one voxel.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

}  // namespace td3d::nn
