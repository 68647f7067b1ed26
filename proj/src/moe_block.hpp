// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "tensor.hpp"

namespace rexmoe {

struct IterationMask;

/// SwiGLU feed-forward expert: w_down . (silu(h . w_gate) * (h . w_up)).
struct ExpertFfn {
  Tensor w_gate;  // [d x f]
  Tensor w_up;    // [d x f]
  Tensor w_down;  // [f x d]
  std::int64_t expert_id = 0;
  int home_layer = 0;
};

using ExpertPtr = std::shared_ptr<ExpertFfn>;
using ExpertPool = std::vector<ExpertPtr>;

struct RouterWeights {
  Tensor w;  // [pool_size x d]; row i scores pool slot i
  int layer = 0;
  std::int64_t pool_size = 0;
};

struct MoeBlockConfig {
  std::int64_t n_routed = 8;
  std::int64_t top_k = 2;
  std::int64_t n_shared = 0;
  std::int64_t hidden = 64;
  std::int64_t intermediate = 128;

  void validate() const;
};

/// Dense per-token view of a routing decision.
struct GateVector {
  std::vector<double> values;      // length pool_size, nonzero only at `selected`
  std::vector<std::int32_t> selected;
};

/// TopK routing result for a batch of tokens. `slots` and `gates` are laid
/// out [token * top_k + j], ordered by descending score within a token.
struct RoutingDecision {
  std::int64_t tokens = 0;
  std::int64_t pool_size = 0;
  std::int64_t top_k = 0;
  std::vector<std::int32_t> slots;
  std::vector<double> gates;

  GateVector gate_vector(std::int64_t token) const;
};

Tensor expert_forward(const ExpertFfn& e, const Tensor& h);

// Row-wise softmax of h . w^T. A non-empty `restrict_to` limits the softmax
// support to the flagged slots (used for local-only routing).
Tensor router_scores(const Tensor& h, const RouterWeights& rw,
                     std::span<const std::uint8_t> restrict_to = {});

// Masked slots are zeroed first, then the K largest remaining scores are
// kept as raw (unrenormalized) gates; ties go to the lower slot index.
RoutingDecision topk_select(const Tensor& scores, std::int64_t top_k, const IterationMask* mask);

// Same selection with gate values re-read from `scores`. Used to hold the
// discrete TopK sets fixed while parameters are perturbed.
RoutingDecision refresh_gates(const RoutingDecision& routing, const Tensor& scores);

// h' = sum over selected slots of g * pool[slot](h) + sum of shared experts.
// Only selected experts run; gates stay differentiable through `scores`.
// Accumulation per token follows pool order, then shared experts.
Tensor moe_forward(const Tensor& h, const ExpertPool& pool, const Tensor& scores,
                   const RoutingDecision& routing, std::span<const ExpertPtr> shared);

// Constant-gate variant over dense GateVectors (one per token).
Tensor moe_forward(const Tensor& h, const ExpertPool& pool, std::span<const GateVector> gates,
                   std::span<const ExpertPtr> shared);

// Switch-style balance loss coeff * E * sum_i f_i * P_i, where f_i is the
// fraction of selections on slot i and P_i the mean router score.
Tensor balance_loss(const Tensor& scores, const RoutingDecision& routing, double coeff);

}  // namespace rexmoe
