#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "td3d/nn/tensor.hpp"

namespace td3d::nn {

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
};

// Named trainable tensors in registration order. Addresses are stable.
class ParameterSet {
 public:
  ParameterSet() = default;
  // Deep copies; addresses in the copy are new.
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter& add(const std::string& name, int rows, int cols);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return by_name_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();
  std::size_t scalar_count() const;
  // L2 norm over all gradients.
  double grad_norm() const;
  void scale_grad(double factor);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

// He-normal initialization, N(0, 2 / fan_in).
void init_he_normal(Parameter& p, int fan_in, std::mt19937_64& rng);

}  // namespace td3d::nn
