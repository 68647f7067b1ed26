// SPDX-License-Identifier: Apache-2.0
#include "model.hpp"

#include <cmath>

#include "error.hpp"
#include "ops.hpp"
#include "rng.hpp"

namespace rexmoe {

namespace {

Tensor init_normal(const std::string& name, Shape shape, double stddev, std::uint64_t seed) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  CounterRng rng(combine_keys(seed, hash_name(name)));
  for (double& v : t.data()) v = stddev * rng.next_normal();
  return t;
}

Tensor init_ones(std::int64_t n) {
  Tensor t = Tensor::zeros({n}, true);
  for (double& v : t.data()) v = 1.0;
  return t;
}

ExpertPtr make_expert(const std::string& prefix, const TransformerConfig& cfg, double std_in,
                      double std_out, std::uint64_t seed) {
  auto e = std::make_shared<ExpertFfn>();
  e->w_gate = init_normal(prefix + ".w_gate", {cfg.hidden, cfg.intermediate}, std_in, seed);
  e->w_up = init_normal(prefix + ".w_up", {cfg.hidden, cfg.intermediate}, std_in, seed);
  e->w_down = init_normal(prefix + ".w_down", {cfg.intermediate, cfg.hidden}, std_out, seed);
  return e;
}

}  // namespace

std::int64_t TransformerConfig::pool_size_for_layer(int layer) const {
  const int first = (layer / reuse) * reuse;
  const int members = std::min(reuse, n_layers - first);
  return n_routed * members;
}

void TransformerConfig::validate() const {
  auto positive = [](std::int64_t v, const char* field) {
    if (v < 1) throw ConfigError(std::string("model.") + field + " must be positive, got " + std::to_string(v));
  };
  positive(vocab, "vocab");
  positive(hidden, "hidden");
  positive(n_layers, "n_layers");
  positive(q_heads, "q_heads");
  positive(kv_heads, "kv_heads");
  positive(head_dim, "head_dim");
  positive(intermediate, "intermediate");
  positive(max_seq, "max_seq");
  positive(reuse, "reuse");
  if (q_heads % kv_heads != 0)
    throw ConfigError("model: q_heads " + std::to_string(q_heads) + " not divisible by kv_heads " +
                      std::to_string(kv_heads));
  if (q_heads * head_dim != hidden)
    throw ConfigError("model: q_heads * head_dim = " + std::to_string(q_heads * head_dim) +
                      " must equal hidden " + std::to_string(hidden));
  if (head_dim % 2 != 0) throw ConfigError("model.head_dim must be even for rotary embeddings");
  if (reuse > n_layers)
    throw ConfigError("reuse " + std::to_string(reuse) + " exceeds n_layers " + std::to_string(n_layers));
  if (!(rope_base > 0.0)) throw ConfigError("model.rope_base must be positive");
  if (!(norm_eps > 0.0)) throw ConfigError("model.norm_eps must be positive");
  if (!(init_std > 0.0)) throw ConfigError("model.init_std must be positive");
  moe().validate();
}

ParameterCount count_parameters(const TransformerConfig& cfg) {
  cfg.validate();
  ParameterCount c;
  const std::int64_t d = cfg.hidden, L = cfg.n_layers, f = cfg.intermediate;
  const std::int64_t qw = cfg.q_heads * cfg.head_dim, kw = cfg.kv_heads * cfg.head_dim;
  const std::int64_t expert = 3 * d * f;
  c.embedding = cfg.vocab * d;
  c.head = d * cfg.vocab;
  c.attention = L * (d * qw + 2 * d * kw + qw * d);
  c.norms = L * 2 * d + d;
  c.routed_experts = L * cfg.n_routed * expert;
  c.shared_experts = L * cfg.n_shared * expert;
  for (int l = 0; l < cfg.n_layers; ++l) c.router += cfg.pool_size_for_layer(l) * d;
  c.router_params = c.router;
  c.total = c.embedding + c.attention + c.norms + c.routed_experts + c.shared_experts + c.router + c.head;
  c.active_per_token = c.embedding + c.attention + c.norms + c.shared_experts +
                       L * cfg.top_k * expert + c.router + c.head;
  return c;
}

std::string to_string(MaskMode mode) {
  switch (mode) {
    case MaskMode::Psr: return "psr";
    case MaskMode::None: return "none";
    case MaskMode::LocalOnly: return "local_only";
  }
  return "none";
}

MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "psr") return MaskMode::Psr;
  if (s == "none") return MaskMode::None;
  if (s == "local_only") return MaskMode::LocalOnly;
  throw ConfigError("mask mode: expected psr|none|local_only, got '" + s + "'");
}

Model::Model(const TransformerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const std::int64_t d = cfg_.hidden;
  const double s = cfg_.init_std;
  const double s_out = s / std::sqrt(2.0 * cfg_.n_layers);

  tok_emb_ = init_normal("tok_emb", {cfg_.vocab, d}, s, seed);

  groups_ = build_groups(cfg_.n_layers, cfg_.reuse, cfg_.n_routed,
                         [&](int home, std::int64_t local) {
                           const auto id = static_cast<std::int64_t>(home) * cfg_.n_routed + local;
                           return make_expert("experts." + std::to_string(id), cfg_, s, s_out, seed);
                         });
  group_index_.assign(static_cast<std::size_t>(cfg_.n_layers), 0);
  for (const auto& g : groups_)
    for (int l : g.member_layers) group_index_[l] = g.index;

  layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l);
    auto& lw = layers_[l];
    lw.attn_norm = init_ones(d);
    lw.wq = init_normal(p + ".wq", {d, cfg_.q_heads * cfg_.head_dim}, s, seed);
    lw.wk = init_normal(p + ".wk", {d, cfg_.kv_heads * cfg_.head_dim}, s, seed);
    lw.wv = init_normal(p + ".wv", {d, cfg_.kv_heads * cfg_.head_dim}, s, seed);
    lw.wo = init_normal(p + ".wo", {cfg_.q_heads * cfg_.head_dim, d}, s_out, seed);
    lw.moe_norm = init_ones(d);

    const auto& group = groups_[group_index_[l]];
    lw.pool = group.pool;
    lw.router.layer = l;
    lw.router.pool_size = static_cast<std::int64_t>(group.pool->size());
    // Router rows are keyed by (layer, expert id), so the rows for a layer's
    // own experts match a vanilla model built from the same seed.
    std::vector<double> rows;
    rows.reserve(static_cast<std::size_t>(lw.router.pool_size * d));
    for (const auto& e : *group.pool) {
      Tensor row = init_normal(p + ".router." + std::to_string(e->expert_id), {d}, s, seed);
      rows.insert(rows.end(), row.data().begin(), row.data().end());
    }
    lw.router.w = Tensor::from({lw.router.pool_size, d}, std::move(rows), true);

    for (std::int64_t j = 0; j < cfg_.n_shared; ++j)
      lw.shared.push_back(make_expert(p + ".shared." + std::to_string(j), cfg_, s, s_out, seed));
  }
  final_norm_ = init_ones(d);
  head_ = init_normal("head", {d, cfg_.vocab}, s, seed);
}

const LayerGroup& Model::group_of(int layer) const {
  if (layer < 0 || layer >= cfg_.n_layers)
    throw OutOfRangeError("layer " + std::to_string(layer) + " out of range");
  return groups_[group_index_[layer]];
}

Tensor Model::attention_forward(const Tensor& x, int layer, std::int64_t batch,
                                std::int64_t seq_len) const {
  if (seq_len > cfg_.max_seq)
    throw OutOfRangeError("sequence length " + std::to_string(seq_len) + " exceeds max_seq " +
                          std::to_string(cfg_.max_seq));
  const auto& lw = layers_.at(static_cast<std::size_t>(layer));
  Tensor q = rope(matmul(x, lw.wq), cfg_.q_heads, cfg_.head_dim, seq_len, cfg_.rope_base);
  Tensor k = rope(matmul(x, lw.wk), cfg_.kv_heads, cfg_.head_dim, seq_len, cfg_.rope_base);
  Tensor v = matmul(x, lw.wv);
  AttentionShape shape{batch, seq_len, cfg_.q_heads, cfg_.kv_heads, cfg_.head_dim};
  return matmul(causal_attention(q, k, v, shape), lw.wo);
}

BlockOutput Model::block_forward(const Tensor& x, int layer, std::int64_t batch,
                                 std::int64_t seq_len, const ForwardOptions& opt) const {
  const auto& lw = layers_.at(static_cast<std::size_t>(layer));
  const auto& group = group_of(layer);
  Tensor h = add(x, attention_forward(rmsnorm(x, lw.attn_norm, cfg_.norm_eps), layer, batch, seq_len));
  Tensor n = rmsnorm(h, lw.moe_norm, cfg_.norm_eps);

  BlockOutput out;
  const std::int64_t pool = lw.router.pool_size;
  Tensor scores;
  IterationMask mask;
  const IterationMask* mask_ptr = nullptr;
  switch (opt.mask_mode) {
    case MaskMode::None:
      out.n_t = pool;
      scores = router_scores(n, lw.router);
      break;
    case MaskMode::Psr: {
      if (!opt.schedule) throw ConfigError("psr mask mode requires a schedule");
      out.n_t = pool_size_at(*opt.schedule, opt.iteration, group.size());
      if (out.n_t < pool) {
        mask = sample_mask(*opt.schedule, opt.iteration, layer, opt.seed, group.size());
        mask_ptr = &mask;
      }
      scores = router_scores(n, lw.router);
      break;
    }
    case MaskMode::LocalOnly:
      mask = local_only_mask(group, layer);
      mask_ptr = &mask;
      out.n_t = mask.kept();
      scores = router_scores(n, lw.router, mask.keep);
      break;
  }
  if (opt.frozen_routing) {
    if (opt.frozen_routing->size() != static_cast<std::size_t>(cfg_.n_layers))
      throw DimensionError("frozen routing must hold one decision per layer");
    out.routing = refresh_gates((*opt.frozen_routing)[layer], scores);
  } else {
    out.routing = topk_select(scores, cfg_.top_k, mask_ptr);
  }
  out.hidden = add(h, moe_forward(n, *lw.pool, scores, out.routing, lw.shared));
  if (opt.aux_loss_coeff != 0.0) out.aux_loss = balance_loss(scores, out.routing, opt.aux_loss_coeff);
  return out;
}

ForwardResult Model::forward(std::span<const std::int32_t> tokens, std::int64_t batch,
                             std::int64_t seq_len, const ForwardOptions& opt) const {
  if (batch < 1 || seq_len < 1 || static_cast<std::int64_t>(tokens.size()) != batch * seq_len)
    throw DimensionError("forward: " + std::to_string(tokens.size()) + " tokens for batch " +
                         std::to_string(batch) + " x seq " + std::to_string(seq_len));
  ForwardResult r;
  Tensor x = embedding(tok_emb_, tokens);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    BlockOutput b = block_forward(x, l, batch, seq_len, opt);
    x = b.hidden;
    r.routing.push_back(std::move(b.routing));
    r.n_t.push_back(b.n_t);
    if (b.aux_loss.defined()) r.aux_loss = r.aux_loss.defined() ? add(r.aux_loss, b.aux_loss) : b.aux_loss;
  }
  r.logits = matmul(rmsnorm(x, final_norm_, cfg_.norm_eps), head_);
  return r;
}

std::vector<NamedTensor> Model::named_parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"tok_emb", tok_emb_});
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l);
    const auto& lw = layers_[l];
    out.push_back({p + ".attn_norm", lw.attn_norm});
    out.push_back({p + ".wq", lw.wq});
    out.push_back({p + ".wk", lw.wk});
    out.push_back({p + ".wv", lw.wv});
    out.push_back({p + ".wo", lw.wo});
    out.push_back({p + ".moe_norm", lw.moe_norm});
    out.push_back({p + ".router", lw.router.w});
    for (std::size_t j = 0; j < lw.shared.size(); ++j) {
      const std::string sp = p + ".shared." + std::to_string(j);
      out.push_back({sp + ".w_gate", lw.shared[j]->w_gate});
      out.push_back({sp + ".w_up", lw.shared[j]->w_up});
      out.push_back({sp + ".w_down", lw.shared[j]->w_down});
    }
  }
  for (const auto& g : groups_) {
    for (const auto& e : *g.pool) {
      const std::string ep = "experts." + std::to_string(e->expert_id);
      out.push_back({ep + ".w_gate", e->w_gate});
      out.push_back({ep + ".w_up", e->w_up});
      out.push_back({ep + ".w_down", e->w_down});
    }
  }
  out.push_back({"final_norm", final_norm_});
  out.push_back({"head", head_});
  return out;
}

std::int64_t Model::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : named_parameters()) n += p.tensor.numel();
  return n;
}

void Model::unshare_pool_for_layer(int layer) {
  auto& lw = layers_.at(static_cast<std::size_t>(layer));
  auto copy = std::make_shared<ExpertPool>();
  for (const auto& e : *lw.pool) {
    auto c = std::make_shared<ExpertFfn>(*e);
    c->w_gate = e->w_gate.clone();
    c->w_up = e->w_up.clone();
    c->w_down = e->w_down.clone();
    copy->push_back(std::move(c));
  }
  lw.pool = std::move(copy);
}

}  // namespace rexmoe
