// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace maskdiff {

template <typename Scalar>
AdamW<Scalar>::AdamW(NamedParameters<Scalar> params, AdamWConfig config)
    : params_(std::move(params)), config_(config), slots_(params_.size()) {}

template <typename Scalar>
void AdamW<Scalar>::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var<Scalar>& p = params_[i].second;
    if (!p.has_grad()) continue;
    Slot& s = slots_[i];
    if (s.m.size() != p.size()) {
      s.m = Tensor<Scalar>::zeros(p.shape());
      s.v = Tensor<Scalar>::zeros(p.shape());
    }
    ++s.steps;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(s.steps));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(s.steps));
    const auto b1 = static_cast<Scalar>(config_.beta1), b2 = static_cast<Scalar>(config_.beta2);
    const auto g = p.grad().array();
    s.m.array() = b1 * s.m.array() + (Scalar(1) - b1) * g;
    s.v.array() = b2 * s.v.array() + (Scalar(1) - b2) * g * g;
    auto w = p.mutable_value().array();
    w *= static_cast<Scalar>(1.0 - lr * config_.weight_decay);
    const auto step_size = static_cast<Scalar>(lr / bc1);
    const auto root_bc2 = static_cast<Scalar>(std::sqrt(bc2));
    w -= step_size * s.m.array() / (s.v.array().sqrt() / root_bc2 + static_cast<Scalar>(config_.eps));
  }
}

template <typename Scalar>
void AdamW<Scalar>::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

double cosine_lr(double base_lr, long step, long total_steps) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  const double u = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * u));
}

template <typename Scalar>
double global_grad_norm(const NamedParameters<Scalar>& params) {
  double sq = 0;
  for (const auto& [name, p] : params) {
    if (p.has_grad()) sq += p.grad().vec().template cast<double>().squaredNorm();
  }
  return std::sqrt(sq);
}

template <typename Scalar>
double clip_grad_norm(NamedParameters<Scalar>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (std::isfinite(norm) && norm > max_norm) {
    const auto factor = static_cast<Scalar>(max_norm / (norm + 1e-6));
    for (auto& [name, p] : params) {
      if (p.has_grad()) p.mutable_grad().vec() *= factor;
    }
  }
  return norm;
}

template class AdamW<float>;
template class AdamW<double>;
template double global_grad_norm<float>(const NamedParameters<float>&);
template double global_grad_norm<double>(const NamedParameters<double>&);
template double clip_grad_norm<float>(NamedParameters<float>&, double);
template double clip_grad_norm<double>(NamedParameters<double>&, double);

}  // namespace maskdiff
