// SPDX-License-Identifier: Apache-2.0
#include "metrics.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>

#include "error.hpp"
#include "json.hpp"
#include "ops.hpp"

namespace rexmoe {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::int64_t RoutingTrace::pool_size_for_layer(int layer) const {
  const int first = (layer / reuse) * reuse;
  return n_routed * std::min(reuse, n_layers - first);
}

void RoutingTrace::validate() const {
  for (const auto& r : records) {
    if (r.layer < 0 || r.layer >= n_layers)
      throw OutOfRangeError("trace: layer " + std::to_string(r.layer) + " out of range");
    if (r.top_k != top_k)
      throw ParseError("trace: record at step " + std::to_string(r.step) + " layer " +
                       std::to_string(r.layer) + " has " + std::to_string(r.top_k) +
                       " selections per token, expected " + std::to_string(top_k));
    const auto pool = pool_size_for_layer(r.layer);
    for (std::size_t i = 0; i < r.slots.size(); ++i) {
      if (r.slots[i] < 0 || r.slots[i] >= pool)
        throw OutOfRangeError("trace: slot " + std::to_string(r.slots[i]) + " outside pool of " +
                              std::to_string(pool) + " at step " + std::to_string(r.step) +
                              " layer " + std::to_string(r.layer));
    }
  }
}

RoutingTrace make_trace(const TransformerConfig& cfg) {
  RoutingTrace t;
  t.n_layers = cfg.n_layers;
  t.n_routed = cfg.n_routed;
  t.reuse = cfg.reuse;
  t.top_k = cfg.top_k;
  return t;
}

void append_forward(RoutingTrace& trace, std::int64_t step, const ForwardResult& result) {
  for (std::size_t l = 0; l < result.routing.size(); ++l) {
    const auto& r = result.routing[l];
    TraceRecord rec;
    rec.step = step;
    rec.layer = static_cast<int>(l);
    rec.n_t = result.n_t[l];
    rec.top_k = r.top_k;
    rec.slots = r.slots;
    rec.gates = r.gates;
    trace.records.push_back(std::move(rec));
  }
}

void write_trace_record(std::ostream& os, const TraceRecord& r) {
  char buf[64];
  os << "{\"step\":" << r.step << ",\"layer\":" << r.layer << ",\"n_t\":" << r.n_t
     << ",\"selections\":[";
  const auto n = r.tokens();
  for (std::int64_t t = 0; t < n; ++t) {
    if (t) os << ',';
    os << '[';
    for (std::int64_t j = 0; j < r.top_k; ++j) {
      if (j) os << ',';
      std::snprintf(buf, sizeof buf, "%.17g", r.gates[t * r.top_k + j]);
      os << '[' << r.slots[t * r.top_k + j] << ',' << buf << ']';
    }
    os << ']';
  }
  os << "]}\n";
}

void read_trace_jsonl(std::istream& is, RoutingTrace& trace) {
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = "trace line " + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + e.what());
    }
    try {
      if (!j.is_object()) throw ParseError(where + "record is not an object");
      for (const char* key : {"step", "layer", "n_t", "selections"})
        if (!j.contains(key)) throw ParseError(where + "missing field '" + key + "'");
      for (auto it = j.begin(); it != j.end(); ++it)
        if (it.key() != "step" && it.key() != "layer" && it.key() != "n_t" && it.key() != "selections")
          throw ParseError(where + "unknown field '" + it.key() + "'");
      TraceRecord rec;
      rec.step = j.at("step").get<std::int64_t>();
      rec.layer = j.at("layer").get<int>();
      rec.n_t = j.at("n_t").get<std::int64_t>();
      rec.top_k = trace.top_k;
      const auto& sel = j.at("selections");
      if (!sel.is_array()) throw ParseError(where + "'selections' is not an array");
      for (const auto& tok : sel) {
        if (!tok.is_array() || static_cast<std::int64_t>(tok.size()) != trace.top_k)
          throw ParseError(where + "each token needs exactly " + std::to_string(trace.top_k) +
                           " [slot, gate] pairs");
        for (const auto& pair : tok) {
          if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number_integer() || !pair[1].is_number())
            throw ParseError(where + "malformed [slot, gate] pair");
          rec.slots.push_back(pair[0].get<std::int32_t>());
          rec.gates.push_back(pair[1].get<double>());
        }
      }
      if (rec.layer < 0 || rec.layer >= trace.n_layers)
        throw ParseError(where + "layer " + std::to_string(rec.layer) + " out of range");
      const auto pool = trace.pool_size_for_layer(rec.layer);
      for (auto s : rec.slots)
        if (s < 0 || s >= pool)
          throw ParseError(where + "slot " + std::to_string(s) + " outside pool of " + std::to_string(pool));
      trace.records.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + e.what());
    }
  }
}

void read_trace_file(const std::string& path, RoutingTrace& trace) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace file " + path);
  read_trace_jsonl(in, trace);
}

std::vector<double> lbv_from_loads(std::span<const std::int64_t> loads) {
  if (loads.empty()) throw EmptyError("lbv: no experts");
  std::int64_t total = 0;
  for (auto l : loads) total += l;
  if (total == 0) throw EmptyError("lbv: all loads are zero");
  const double mean = static_cast<double>(total) / static_cast<double>(loads.size());
  std::vector<double> out;
  out.reserve(loads.size());
  for (auto l : loads) out.push_back((static_cast<double>(l) - mean) / mean);
  return out;
}

LoadStats compute_lbv(const RoutingTrace& trace, const LayerGroup& group, double tau) {
  LoadStats s;
  s.group = group.index;
  s.tau = tau;
  const auto pool = group.experts_per_layer * group.size();
  s.load.assign(static_cast<std::size_t>(pool), 0);
  s.gate_load.assign(static_cast<std::size_t>(pool), 0.0);
  bool any = false;
  for (const auto& r : trace.records) {
    if (!group.contains(r.layer)) continue;
    any = true;
    s.routed_tokens += r.tokens();
    for (std::size_t i = 0; i < r.slots.size(); ++i) {
      const auto slot = r.slots[i];
      if (slot < 0 || slot >= pool)
        throw OutOfRangeError("compute_lbv: slot " + std::to_string(slot) + " outside pool of " +
                              std::to_string(pool));
      s.load[slot] += 1;
      s.gate_load[slot] += r.gates[i];
    }
  }
  if (!any || s.routed_tokens == 0)
    throw EmptyError("compute_lbv: trace has no records for group " + std::to_string(group.index));
  std::int64_t total = 0;
  for (auto l : s.load) total += l;
  s.mean = static_cast<double>(total) / static_cast<double>(pool);
  s.lbv = lbv_from_loads(s.load);
  s.under_utilized_ratio = under_utilized_ratio(s, tau);
  return s;
}

std::vector<LoadStats> compute_all_lbv(const RoutingTrace& trace, double tau) {
  std::vector<LoadStats> out;
  for (const auto& g : build_groups(trace.n_layers, trace.reuse, trace.n_routed))
    out.push_back(compute_lbv(trace, g, tau));
  return out;
}

double under_utilized_ratio(const LoadStats& stats, double tau) {
  if (stats.load.empty()) return 0.0;
  std::int64_t below = 0;
  for (auto l : stats.load)
    if (static_cast<double>(l) < tau * stats.mean) ++below;
  return static_cast<double>(below) / static_cast<double>(stats.load.size());
}

std::vector<double> activation_ratio(const RoutingTrace& trace, int layer) {
  const auto pool = trace.pool_size_for_layer(layer);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(pool), 0);
  std::int64_t total = 0;
  for (const auto& r : trace.records) {
    if (r.layer != layer) continue;
    for (auto s : r.slots) {
      if (s < 0 || s >= pool) throw OutOfRangeError("activation_ratio: slot out of range");
      ++counts[s];
      ++total;
    }
  }
  if (total == 0) throw EmptyError("activation_ratio: no records for layer " + std::to_string(layer));
  std::vector<double> out;
  out.reserve(counts.size());
  for (auto c : counts) out.push_back(static_cast<double>(c) / static_cast<double>(total));
  return out;
}

void write_stats_csv(std::ostream& os, const std::vector<LoadStats>& stats, double tau) {
  os << "group,slot,load,lbv\n";
  std::int64_t below = 0, experts = 0;
  for (const auto& s : stats) {
    for (std::size_t i = 0; i < s.load.size(); ++i)
      os << s.group << ',' << i << ',' << s.load[i] << ',' << format_double(s.lbv[i]) << '\n';
    for (auto l : s.load)
      if (static_cast<double>(l) < tau * s.mean) ++below;
    experts += static_cast<std::int64_t>(s.load.size());
  }
  const double ratio = experts == 0 ? 0.0 : static_cast<double>(below) / static_cast<double>(experts);
  os << "under_utilized_ratio=" << format_double(ratio) << ",tau=" << format_double(tau) << '\n';
}

void write_activation_csv(std::ostream& os, const RoutingTrace& trace) {
  std::int64_t widest = 0;
  for (int l = 0; l < trace.n_layers; ++l) widest = std::max(widest, trace.pool_size_for_layer(l));
  os << "layer";
  for (std::int64_t s = 0; s < widest; ++s) os << ",slot_" << s;
  os << '\n';
  for (int l = 0; l < trace.n_layers; ++l) {
    bool present = false;
    for (const auto& r : trace.records)
      if (r.layer == l) { present = true; break; }
    if (!present) continue;
    const auto ratio = activation_ratio(trace, l);
    os << l;
    for (std::int64_t s = 0; s < widest; ++s)
      os << ',' << format_double(s < static_cast<std::int64_t>(ratio.size()) ? ratio[s] : 0.0);
    os << '\n';
  }
}

PerplexityResult perplexity(const Model& model, std::span<const std::uint8_t> eval_bytes,
                            std::int64_t seq_len, std::int64_t max_sequences, std::int64_t batch,
                            MaskMode mode) {
  if (mode == MaskMode::Psr) throw ConfigError("perplexity: evaluation does not apply PSR masks");
  if (seq_len < 1 || batch < 1) throw ConfigError("perplexity: seq_len and batch must be positive");
  const auto n = static_cast<std::int64_t>(eval_bytes.size());
  std::int64_t windows = n > seq_len ? (n - 1) / seq_len : 0;
  if (max_sequences > 0) windows = std::min(windows, max_sequences);
  if (windows == 0) throw EmptyError("perplexity: eval set shorter than one sequence");

  PerplexityResult res;
  res.trace = make_trace(model.config());
  ForwardOptions opt;
  opt.mask_mode = mode;
  double loss_sum = 0.0;
  for (std::int64_t first = 0; first < windows; first += batch) {
    const std::int64_t b = std::min(batch, windows - first);
    std::vector<std::int32_t> inputs, targets;
    inputs.reserve(static_cast<std::size_t>(b * seq_len));
    targets.reserve(inputs.capacity());
    for (std::int64_t w = first; w < first + b; ++w) {
      const std::int64_t start = w * seq_len;
      for (std::int64_t i = 0; i < seq_len; ++i) {
        inputs.push_back(eval_bytes[start + i]);
        targets.push_back(eval_bytes[start + i + 1]);
      }
    }
    ForwardResult fr = model.forward(inputs, b, seq_len, opt);
    const double loss = cross_entropy(fr.logits, targets).item();
    loss_sum += loss * static_cast<double>(b * seq_len);
    append_forward(res.trace, first, fr);
  }
  res.sequences = windows;
  res.tokens = windows * seq_len;
  res.mean_loss = loss_sum / static_cast<double>(res.tokens);
  res.perplexity = std::exp(res.mean_loss);
  return res;
}

}  // namespace rexmoe
