// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tensor.hpp"

namespace rexmoe {

struct LrSchedule {
  double lr_max = 3e-4;
  double lr_min = 3e-5;
  std::int64_t warmup_steps = 100;
  std::int64_t total_steps = 2000;

  void validate() const;
};

// Linear warmup from 0 to lr_max, cosine decay to lr_min at total_steps,
// then flat at lr_min.
double lr_at(const LrSchedule& s, std::int64_t step);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// Decoupled-decay Adam. Rank-1 parameters (norm gains) are not decayed.
class AdamW {
 public:
  AdamW() = default;
  AdamW(AdamWConfig cfg, std::span<const Tensor> params);

  // theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
  void step(std::span<Tensor> params, double lr);

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t steps_taken() const { return t_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_steps_taken(std::int64_t t) { t_ = t; }

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

double global_grad_norm(std::span<const Tensor> params);

// Scales every gradient by max_norm / norm when the global L2 norm exceeds
// max_norm. Returns the norm before clipping.
double clip_grads(std::span<Tensor> params, double max_norm);

}  // namespace rexmoe
