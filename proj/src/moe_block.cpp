// SPDX-License-Identifier: Apache-2.0
#include "moe_block.hpp"

#include <string>

#include "error.hpp"
#include "ops.hpp"
#include "rex_pool.hpp"

namespace rexmoe {

void MoeBlockConfig::validate() const {
  if (n_routed < 1) throw ConfigError("moe: n_routed must be >= 1");
  if (top_k < 1 || top_k > n_routed)
    throw ConfigError("moe: need 1 <= top_k <= n_routed, got top_k=" + std::to_string(top_k) +
                      " n_routed=" + std::to_string(n_routed));
  if (n_shared < 0) throw ConfigError("moe: n_shared must be >= 0");
  if (hidden < 1 || intermediate < 1) throw ConfigError("moe: hidden and intermediate must be >= 1");
}

GateVector RoutingDecision::gate_vector(std::int64_t token) const {
  if (token < 0 || token >= tokens)
    throw OutOfRangeError("gate_vector: token " + std::to_string(token) + " out of range");
  GateVector g;
  g.values.assign(static_cast<std::size_t>(pool_size), 0.0);
  for (std::int64_t j = 0; j < top_k; ++j) {
    const auto slot = slots[token * top_k + j];
    g.values[slot] = gates[token * top_k + j];
    g.selected.push_back(slot);
  }
  return g;
}

Tensor expert_forward(const ExpertFfn& e, const Tensor& h) {
  Tensor gate = silu(matmul(h, e.w_gate));
  Tensor up = matmul(h, e.w_up);
  return matmul(mul(gate, up), e.w_down);
}

Tensor router_scores(const Tensor& h, const RouterWeights& rw,
                     std::span<const std::uint8_t> restrict_to) {
  if (rw.w.dim(0) != rw.pool_size)
    throw DimensionError("router: weight rows " + std::to_string(rw.w.dim(0)) +
                         " != pool size " + std::to_string(rw.pool_size));
  return softmax(matmul_nt(h, rw.w), restrict_to);
}

RoutingDecision topk_select(const Tensor& scores, std::int64_t top_k, const IterationMask* mask) {
  if (scores.rank() != 2) throw DimensionError("topk_select: scores must be [tokens x pool]");
  const auto t = scores.dim(0), e = scores.dim(1);
  if (top_k < 1 || top_k > e)
    throw ConfigError("topk_select: K=" + std::to_string(top_k) + " exceeds pool size " +
                      std::to_string(e));
  if (mask) {
    if (static_cast<std::int64_t>(mask->keep.size()) != e)
      throw DimensionError("topk_select: mask covers " + std::to_string(mask->keep.size()) +
                           " slots, pool has " + std::to_string(e));
    if (mask->kept() < top_k)
      throw ConfigError("topk_select: schedule keeps " + std::to_string(mask->kept()) +
                        " slots, fewer than K=" + std::to_string(top_k));
  }
  RoutingDecision r;
  r.tokens = t;
  r.pool_size = e;
  r.top_k = top_k;
  r.slots.resize(static_cast<std::size_t>(t * top_k));
  r.gates.resize(r.slots.size());
  auto sd = scores.data();
  std::vector<double> row(static_cast<std::size_t>(e));
  std::vector<std::uint8_t> taken(static_cast<std::size_t>(e));
  for (std::int64_t i = 0; i < t; ++i) {
    for (std::int64_t j = 0; j < e; ++j) {
      const bool masked = mask && mask->keep[j] == 0;
      row[j] = masked ? 0.0 : sd[i * e + j];
      taken[j] = masked ? 1 : 0;  // masked slots are never eligible
    }
    for (std::int64_t k = 0; k < top_k; ++k) {
      std::int64_t best = -1;
      for (std::int64_t j = 0; j < e; ++j) {
        if (taken[j]) continue;
        if (best < 0 || row[j] > row[best]) best = j;
      }
      taken[best] = 1;
      r.slots[i * top_k + k] = static_cast<std::int32_t>(best);
      r.gates[i * top_k + k] = row[best];
    }
  }
  return r;
}

RoutingDecision refresh_gates(const RoutingDecision& routing, const Tensor& scores) {
  if (scores.rank() != 2 || scores.dim(0) != routing.tokens || scores.dim(1) != routing.pool_size)
    throw DimensionError("refresh_gates: scores " + shape_string(scores.shape()) +
                         " do not match the frozen routing");
  RoutingDecision r = routing;
  auto sd = scores.data();
  for (std::int64_t i = 0; i < r.tokens; ++i)
    for (std::int64_t k = 0; k < r.top_k; ++k)
      r.gates[i * r.top_k + k] = sd[i * r.pool_size + r.slots[i * r.top_k + k]];
  return r;
}

Tensor moe_forward(const Tensor& h, const ExpertPool& pool, const Tensor& scores,
                   const RoutingDecision& routing, std::span<const ExpertPtr> shared) {
  if (h.rank() != 2) throw DimensionError("moe_forward: h must be [tokens x d]");
  const auto t = h.dim(0), d = h.dim(1);
  if (routing.pool_size != static_cast<std::int64_t>(pool.size()))
    throw DimensionError("moe_forward: routing covers " + std::to_string(routing.pool_size) +
                         " slots, pool has " + std::to_string(pool.size()));
  if (routing.tokens != t)
    throw DimensionError("moe_forward: routing has " + std::to_string(routing.tokens) +
                         " tokens, h has " + std::to_string(t));

  // Bucket (token, slot) pairs by slot, tokens ascending within a slot.
  std::vector<std::vector<std::int32_t>> tokens_of(pool.size());
  for (std::int64_t i = 0; i < t; ++i) {
    for (std::int64_t k = 0; k < routing.top_k; ++k) {
      const auto slot = routing.slots[i * routing.top_k + k];
      if (slot < 0 || slot >= static_cast<std::int64_t>(pool.size()))
        throw OutOfRangeError("moe_forward: slot " + std::to_string(slot) + " outside pool of " +
                              std::to_string(pool.size()));
      tokens_of[slot].push_back(static_cast<std::int32_t>(i));
    }
  }

  std::vector<Tensor> parts;
  std::vector<std::vector<std::int32_t>> index;
  for (std::size_t slot = 0; slot < pool.size(); ++slot) {
    const auto& toks = tokens_of[slot];
    if (toks.empty()) continue;
    std::vector<std::int32_t> cols(toks.size(), static_cast<std::int32_t>(slot));
    Tensor y = expert_forward(*pool[slot], gather_rows(h, toks));
    parts.push_back(scale_rows(y, gather_elements(scores, toks, cols)));
    index.push_back(toks);
  }
  if (!shared.empty()) {
    std::vector<std::int32_t> all(static_cast<std::size_t>(t));
    for (std::int64_t i = 0; i < t; ++i) all[i] = static_cast<std::int32_t>(i);
    for (const auto& s : shared) {
      parts.push_back(expert_forward(*s, h));
      index.push_back(all);
    }
  }
  return scatter_add_rows(t, d, parts, index);
}

Tensor moe_forward(const Tensor& h, const ExpertPool& pool, std::span<const GateVector> gates,
                   std::span<const ExpertPtr> shared) {
  const auto t = static_cast<std::int64_t>(gates.size());
  const auto e = static_cast<std::int64_t>(pool.size());
  if (h.rank() != 2 || h.dim(0) != t)
    throw DimensionError("moe_forward: one GateVector per token required");
  RoutingDecision r;
  r.tokens = t;
  r.pool_size = e;
  r.top_k = t > 0 ? static_cast<std::int64_t>(gates[0].selected.size()) : 0;
  std::vector<double> dense(static_cast<std::size_t>(t * e), 0.0);
  for (std::int64_t i = 0; i < t; ++i) {
    const auto& g = gates[i];
    if (static_cast<std::int64_t>(g.values.size()) != e)
      throw DimensionError("moe_forward: GateVector length " + std::to_string(g.values.size()) +
                           " != pool size " + std::to_string(e));
    if (static_cast<std::int64_t>(g.selected.size()) != r.top_k)
      throw DimensionError("moe_forward: tokens select different numbers of experts");
    for (std::int64_t j = 0; j < e; ++j) dense[i * e + j] = g.values[j];
    for (auto s : g.selected) {
      r.slots.push_back(s);
      r.gates.push_back(s >= 0 && s < e ? g.values[s] : 0.0);
    }
  }
  return moe_forward(h, pool, Tensor::from({t, e}, std::move(dense)), r, shared);
}

Tensor balance_loss(const Tensor& scores, const RoutingDecision& routing, double coeff) {
  const auto t = routing.tokens, e = routing.pool_size;
  std::vector<double> frac(static_cast<std::size_t>(e), 0.0);
  for (auto s : routing.slots) frac[s] += 1.0;
  const double selections = static_cast<double>(t * routing.top_k);
  // d/ds_{i,j} of coeff * E * sum_j f_j * mean_i s_{i,j}
  std::vector<double> w(static_cast<std::size_t>(t * e));
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t j = 0; j < e; ++j)
      w[i * e + j] = coeff * static_cast<double>(e) * (frac[j] / selections) / static_cast<double>(t);
  return dot_const(scores, w);
}

}  // namespace rexmoe
