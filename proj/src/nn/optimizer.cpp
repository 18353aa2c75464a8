#include "td3d/nn/optimizer.hpp"

#include <cmath>

namespace td3d::nn {

AdamW::AdamW(ParameterSet& params, Options options) : params_(params), opt_(options) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_.push_back(Matrix::Zero(params_[i].value.rows(), params_[i].value.cols()));
    v_.push_back(Matrix::Zero(params_[i].value.rows(), params_[i].value.cols()));
  }
}

void AdamW::step(double lr) {
  ++step_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = params_[i];
    m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * p.grad;
    v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * p.grad.cwiseAbs2();
    p.value *= 1.0 - lr * opt_.weight_decay;
    p.value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opt_.eps);
  }
}

double clip_grad_norm(ParameterSet& params, double max_norm) {
  const double norm = params.grad_norm();
  if (norm > max_norm && norm > 0.0) params.scale_grad(max_norm / norm);
  return norm;
}

}  // namespace td3d::nn
