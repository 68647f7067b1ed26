// SPDX-License-Identifier: Apache-2.0
#include "optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "error.hpp"

namespace rexmoe {

void LrSchedule::validate() const {
  if (!(lr_min > 0.0) || !(lr_min <= lr_max))
    throw ConfigError("lr schedule: need 0 < lr_min <= lr_max");
  if (warmup_steps < 0 || !(warmup_steps < total_steps))
    throw ConfigError("lr schedule: need 0 <= warmup_steps < total_steps");
}

double lr_at(const LrSchedule& s, std::int64_t step) {
  if (step < s.warmup_steps)
    return s.lr_max * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step >= s.total_steps) return s.lr_min;
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(AdamWConfig cfg, std::span<const Tensor> params) : cfg_(cfg) {
  for (const auto& p : params) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

void AdamW::step(std::span<Tensor> params, double lr) {
  if (params.size() != m_.size())
    throw DimensionError("adamw: optimizer tracks " + std::to_string(m_.size()) +
                         " parameters, got " + std::to_string(params.size()));
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    auto& m = m_[i];
    auto& v = v_[i];
    if (static_cast<std::int64_t>(m.size()) != p.numel())
      throw DimensionError("adamw: state size mismatch for parameter " + std::to_string(i));
    auto w = p.data();
    const bool has_grad = p.has_grad();
    auto g = has_grad ? p.grad() : std::span<double>{};
    const double wd = p.rank() >= 2 ? cfg_.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has_grad ? g[j] : 0.0;
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      const double decay = lr * wd * w[j];
      w[j] = w[j] - lr * (mhat / (std::sqrt(vhat) + cfg_.eps)) - decay;
    }
  }
}

double global_grad_norm(std::span<const Tensor> params) {
  double ss = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) ss += g * g;
  }
  return std::sqrt(ss);
}

double clip_grads(std::span<Tensor> params, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_grads: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.grad()) g *= scale;
    }
  }
  return norm;
}

}  // namespace rexmoe
