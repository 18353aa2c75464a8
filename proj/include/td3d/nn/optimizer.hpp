#pragma once

#include <vector>

#include "td3d/nn/parameters.hpp"

namespace td3d::nn {

// Adam with decoupled weight decay.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
  };

  AdamW(ParameterSet& params, Options options);

  void step(double lr);

  long steps() const { return step_; }
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }
  void set_steps(long steps) { step_ = steps; }

 private:
  ParameterSet& params_;
  Options opt_;
  std::vector<Matrix> m_, v_;
  long step_ = 0;
};

// Rescales gradients so that their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(ParameterSet& params, double max_norm);

}  // namespace td3d::nn
