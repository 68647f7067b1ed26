// SPDX-License-Identifier: Apache-2.0
#include "config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "error.hpp"
#include "json.hpp"

namespace rexmoe {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::string& where, std::initializer_list<const char*> known) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> allowed(known.begin(), known.end());
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("unknown config key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
}

template <typename T>
void read(const json& obj, const char* key, const std::string& where, T& out) {
  if (!obj.contains(key)) return;
  const std::string field = (where.empty() ? "" : where + ".") + key;
  const json& v = obj.at(key);
  try {
    if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field + ": expected a string");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field + ": expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field + ": expected a number");
    }
    out = v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(field + ": " + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  psr.validate(model.top_k);
  if (psr.n_base != model.n_routed || psr.reuse != model.reuse)
    throw ConfigError("psr schedule does not mirror model.n_routed / reuse");
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (train.seq_len < 1 || train.seq_len > model.max_seq)
    throw ConfigError("train.seq_len " + std::to_string(train.seq_len) + " must be in [1, model.max_seq=" +
                      std::to_string(model.max_seq) + "]");
  if (train.total_steps < 1) throw ConfigError("train.total_steps must be >= 1");
  if (!(train.clip_norm > 0.0)) throw ConfigError("train.clip_norm must be > 0");
  if (train.checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  if (train.trace_every < 0) throw ConfigError("train.trace_every must be >= 0");
  if (train.aux_loss_coeff < 0.0) throw ConfigError("train.aux_loss_coeff must be >= 0");
  if (train.lr.total_steps != train.total_steps)
    throw ConfigError("lr schedule total_steps does not mirror train.total_steps");
  train.lr.validate();
  if (!(train.adam.beta1 >= 0.0 && train.adam.beta1 < 1.0)) throw ConfigError("train.beta1 must be in [0,1)");
  if (!(train.adam.beta2 >= 0.0 && train.adam.beta2 < 1.0)) throw ConfigError("train.beta2 must be in [0,1)");
  if (!(train.adam.eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
  if (train.adam.weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (!(metrics.tau > 0.0 && metrics.tau < 1.0)) throw ConfigError("metrics.tau must be in (0,1)");
  if (metrics.eval_sequences < 0) throw ConfigError("metrics.eval_sequences must be >= 0");
  if (metrics.eval_batch < 1) throw ConfigError("metrics.eval_batch must be >= 1");
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j, "", {"model", "reuse", "psr", "train", "metrics", "out_dir"});
  RunConfig c;
  if (j.contains("model")) {
    const json& m = j["model"];
    reject_unknown(m, "model", {"vocab", "hidden", "n_layers", "q_heads", "kv_heads", "head_dim",
                                "intermediate", "n_routed", "top_k", "n_shared", "rope_base",
                                "max_seq", "norm_eps", "init_std"});
    auto& t = c.model;
    read(m, "vocab", "model", t.vocab);
    read(m, "hidden", "model", t.hidden);
    read(m, "n_layers", "model", t.n_layers);
    read(m, "q_heads", "model", t.q_heads);
    read(m, "kv_heads", "model", t.kv_heads);
    read(m, "head_dim", "model", t.head_dim);
    read(m, "intermediate", "model", t.intermediate);
    read(m, "n_routed", "model", t.n_routed);
    read(m, "top_k", "model", t.top_k);
    read(m, "n_shared", "model", t.n_shared);
    read(m, "rope_base", "model", t.rope_base);
    read(m, "max_seq", "model", t.max_seq);
    read(m, "norm_eps", "model", t.norm_eps);
    read(m, "init_std", "model", t.init_std);
  }
  read(j, "reuse", "", c.model.reuse);
  read(j, "out_dir", "", c.out_dir);

  c.psr.mode = PsrMode::Linear;
  c.psr.t_start = 200;
  c.psr.t_end = 1000;
  if (j.contains("psr")) {
    const json& p = j["psr"];
    reject_unknown(p, "psr", {"mode", "t_start", "t_end", "step_points"});
    std::string mode = to_string(c.psr.mode);
    read(p, "mode", "psr", mode);
    c.psr.mode = psr_mode_from_string(mode);
    read(p, "t_start", "psr", c.psr.t_start);
    read(p, "t_end", "psr", c.psr.t_end);
    if (p.contains("step_points")) {
      const json& sp = p["step_points"];
      if (!sp.is_array()) throw ConfigError("psr.step_points: expected an array of [step, pool_size]");
      for (const auto& e : sp) {
        if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number_integer())
          throw ConfigError("psr.step_points: each entry must be [step, pool_size]");
        c.psr.step_points.emplace_back(e[0].get<std::int64_t>(), e[1].get<std::int64_t>());
      }
    }
  }
  c.psr.n_base = c.model.n_routed;
  c.psr.reuse = c.model.reuse;

  if (j.contains("train")) {
    const json& t = j["train"];
    reject_unknown(t, "train", {"batch_size", "seq_len", "total_steps", "clip_norm", "global_seed",
                                "checkpoint_every", "trace_every", "corpus_path", "aux_loss_coeff",
                                "lr_max", "lr_min", "warmup_steps", "beta1", "beta2", "adam_eps",
                                "weight_decay"});
    auto& tr = c.train;
    read(t, "batch_size", "train", tr.batch_size);
    read(t, "seq_len", "train", tr.seq_len);
    read(t, "total_steps", "train", tr.total_steps);
    read(t, "clip_norm", "train", tr.clip_norm);
    read(t, "global_seed", "train", tr.global_seed);
    read(t, "checkpoint_every", "train", tr.checkpoint_every);
    read(t, "trace_every", "train", tr.trace_every);
    read(t, "corpus_path", "train", tr.corpus_path);
    read(t, "aux_loss_coeff", "train", tr.aux_loss_coeff);
    read(t, "lr_max", "train", tr.lr.lr_max);
    read(t, "lr_min", "train", tr.lr.lr_min);
    read(t, "warmup_steps", "train", tr.lr.warmup_steps);
    read(t, "beta1", "train", tr.adam.beta1);
    read(t, "beta2", "train", tr.adam.beta2);
    read(t, "adam_eps", "train", tr.adam.eps);
    read(t, "weight_decay", "train", tr.adam.weight_decay);
  }
  c.train.lr.total_steps = c.train.total_steps;

  if (j.contains("metrics")) {
    const json& m = j["metrics"];
    reject_unknown(m, "metrics", {"tau", "eval_corpus_path", "eval_sequences", "eval_batch"});
    read(m, "tau", "metrics", c.metrics.tau);
    read(m, "eval_corpus_path", "metrics", c.metrics.eval_corpus_path);
    read(m, "eval_sequences", "metrics", c.metrics.eval_sequences);
    read(m, "eval_batch", "metrics", c.metrics.eval_batch);
  }
  c.validate();
  return c;
}

std::string apply_override(const std::string& json_text, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' must look like dotted.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override path '" + path + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override path '" + path + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
  return doc.dump(2);
}

RunConfig load_run_config(const std::string& path, std::span<const std::string> overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string text = ss.str();
  for (const auto& o : overrides) text = apply_override(text, o);
  return parse_run_config(text);
}

std::string run_config_to_json(const RunConfig& c) {
  json j;
  const auto& m = c.model;
  j["model"] = {{"vocab", m.vocab},           {"hidden", m.hidden},     {"n_layers", m.n_layers},
                {"q_heads", m.q_heads},       {"kv_heads", m.kv_heads}, {"head_dim", m.head_dim},
                {"intermediate", m.intermediate}, {"n_routed", m.n_routed}, {"top_k", m.top_k},
                {"n_shared", m.n_shared},     {"rope_base", m.rope_base}, {"max_seq", m.max_seq},
                {"norm_eps", m.norm_eps},     {"init_std", m.init_std}};
  j["reuse"] = m.reuse;
  json sp = json::array();
  for (const auto& [t, n] : c.psr.step_points) sp.push_back({t, n});
  j["psr"] = {{"mode", to_string(c.psr.mode)}, {"t_start", c.psr.t_start}, {"t_end", c.psr.t_end}, {"step_points", sp}};
  const auto& t = c.train;
  j["train"] = {{"batch_size", t.batch_size},   {"seq_len", t.seq_len},
                {"total_steps", t.total_steps}, {"clip_norm", t.clip_norm},
                {"global_seed", t.global_seed}, {"checkpoint_every", t.checkpoint_every},
                {"trace_every", t.trace_every}, {"corpus_path", t.corpus_path},
                {"aux_loss_coeff", t.aux_loss_coeff}, {"lr_max", t.lr.lr_max},
                {"lr_min", t.lr.lr_min},        {"warmup_steps", t.lr.warmup_steps},
                {"beta1", t.adam.beta1},        {"beta2", t.adam.beta2},
                {"adam_eps", t.adam.eps},       {"weight_decay", t.adam.weight_decay}};
  j["metrics"] = {{"tau", c.metrics.tau},
                  {"eval_corpus_path", c.metrics.eval_corpus_path},
                  {"eval_sequences", c.metrics.eval_sequences},
                  {"eval_batch", c.metrics.eval_batch}};
  j["out_dir"] = c.out_dir;
  return j.dump(2);
}

bool same_architecture(const RunConfig& a, const RunConfig& b) {
  const auto& x = a.model;
  const auto& y = b.model;
  return x.vocab == y.vocab && x.hidden == y.hidden && x.n_layers == y.n_layers && x.q_heads == y.q_heads &&
         x.kv_heads == y.kv_heads && x.head_dim == y.head_dim && x.intermediate == y.intermediate &&
         x.n_routed == y.n_routed && x.top_k == y.top_k && x.n_shared == y.n_shared && x.reuse == y.reuse &&
         x.rope_base == y.rope_base && x.max_seq == y.max_seq && x.norm_eps == y.norm_eps;
}

}  // namespace rexmoe
