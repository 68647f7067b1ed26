// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moe_block.hpp"
#include "rex_pool.hpp"
#include "tensor.hpp"

namespace rexmoe {

struct TransformerConfig {
  std::int64_t vocab = 256;
  std::int64_t hidden = 64;
  int n_layers = 8;
  std::int64_t q_heads = 4;
  std::int64_t kv_heads = 2;
  std::int64_t head_dim = 16;
  std::int64_t intermediate = 128;
  std::int64_t n_routed = 8;
  std::int64_t top_k = 2;
  std::int64_t n_shared = 0;
  int reuse = 1;
  double rope_base = 10000.0;
  std::int64_t max_seq = 128;
  double norm_eps = 1e-6;
  double init_std = 0.02;

  MoeBlockConfig moe() const { return {n_routed, top_k, n_shared, hidden, intermediate}; }
  // Pool size seen by a router in `layer`'s group.
  std::int64_t pool_size_for_layer(int layer) const;
  void validate() const;
};

struct ParameterCount {
  std::int64_t embedding = 0;
  std::int64_t attention = 0;
  std::int64_t norms = 0;
  std::int64_t routed_experts = 0;
  std::int64_t shared_experts = 0;
  std::int64_t router = 0;
  std::int64_t head = 0;
  std::int64_t total = 0;
  std::int64_t active_per_token = 0;
  std::int64_t router_params = 0;
};

ParameterCount count_parameters(const TransformerConfig& cfg);

enum class MaskMode { Psr, None, LocalOnly };

std::string to_string(MaskMode mode);
MaskMode mask_mode_from_string(const std::string& s);

struct LayerWeights {
  Tensor attn_norm;  // [d]
  Tensor wq;         // [d x q_heads*head_dim]
  Tensor wk;         // [d x kv_heads*head_dim]
  Tensor wv;         // [d x kv_heads*head_dim]
  Tensor wo;         // [q_heads*head_dim x d]
  Tensor moe_norm;   // [d]
  RouterWeights router;
  std::vector<ExpertPtr> shared;
  // Routed pool this layer selects from; normally the group's pool object.
  std::shared_ptr<ExpertPool> pool;
};

struct ForwardOptions {
  std::int64_t iteration = 0;
  MaskMode mask_mode = MaskMode::None;
  const PsrSchedule* schedule = nullptr;  // required for MaskMode::Psr
  std::uint64_t seed = 0;
  // When set, TopK selections are taken from here (one per layer) and only
  // gate values are recomputed.
  const std::vector<RoutingDecision>* frozen_routing = nullptr;
  double aux_loss_coeff = 0.0;
};

struct BlockOutput {
  Tensor hidden;
  RoutingDecision routing;
  std::int64_t n_t = 0;  // candidate pool size used for this layer
  Tensor aux_loss;       // undefined when aux_loss_coeff == 0
};

struct ForwardResult {
  Tensor logits;  // [batch*seq x vocab]
  std::vector<RoutingDecision> routing;  // per layer
  std::vector<std::int64_t> n_t;          // per layer
  Tensor aux_loss;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class Model {
 public:
  Model(const TransformerConfig& cfg, std::uint64_t seed);

  const TransformerConfig& config() const { return cfg_; }

  Tensor attention_forward(const Tensor& x, int layer, std::int64_t batch, std::int64_t seq_len) const;

  BlockOutput block_forward(const Tensor& x, int layer, std::int64_t batch, std::int64_t seq_len,
                            const ForwardOptions& opt) const;

  // tokens: batch * seq_len ids, row-major by sequence.
  ForwardResult forward(std::span<const std::int32_t> tokens, std::int64_t batch,
                        std::int64_t seq_len, const ForwardOptions& opt) const;

  // Fixed order: embedding, layers (attention, norms, router, shared), group
  // pools by expert id, final norm, head.
  std::vector<NamedTensor> named_parameters() const;
  std::int64_t parameter_count() const;

  const std::vector<LayerGroup>& groups() const { return groups_; }
  const LayerGroup& group_of(int layer) const;
  LayerWeights& layer(int l) { return layers_.at(static_cast<std::size_t>(l)); }
  const LayerWeights& layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }
  Tensor& token_embedding() { return tok_emb_; }
  Tensor& final_norm() { return final_norm_; }
  Tensor& head() { return head_; }

  // Gives `layer` a private deep copy of its group's pool. Used to compare
  // shared-expert gradients against the unshared sum.
  void unshare_pool_for_layer(int layer);

 private:
  TransformerConfig cfg_;
  Tensor tok_emb_;
  std::vector<LayerWeights> layers_;
  std::vector<LayerGroup> groups_;
  std::vector<int> group_index_;
  Tensor final_norm_;
  Tensor head_;
};

}  // namespace rexmoe
