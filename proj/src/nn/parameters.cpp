#include "td3d/nn/parameters.hpp"

#include <cmath>

#include "td3d/errors.hpp"

namespace td3d::nn {

ParameterSet::ParameterSet(const ParameterSet& other) : by_name_(other.by_name_) {
  for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter>(*p));
}

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this != &other) *this = ParameterSet(other);
  return *this;
}

Parameter& ParameterSet::add(const std::string& name, int rows, int cols) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Matrix::Zero(rows, cols);
  p->grad = Matrix::Zero(rows, cols);
  by_name_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterSet::get(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return *params_[it->second];
}

const Parameter& ParameterSet::get(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return *params_[it->second];
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

double ParameterSet::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) s += p->grad.squaredNorm();
  return std::sqrt(s);
}

void ParameterSet::scale_grad(double factor) {
  for (auto& p : params_) p->grad *= factor;
}

void init_he_normal(Parameter& p, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / std::max(1, fan_in)));
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = normal(rng);
}

}  // namespace td3d::nn
