// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "model.hpp"
#include "rex_pool.hpp"

namespace rexmoe {

/// Routing of every token at one (step, layer).
struct TraceRecord {
  std::int64_t step = 0;
  int layer = 0;
  std::int64_t n_t = 0;
  std::int64_t top_k = 0;
  std::vector<std::int32_t> slots;  // [token * top_k + j]
  std::vector<double> gates;

  std::int64_t tokens() const { return top_k == 0 ? 0 : static_cast<std::int64_t>(slots.size()) / top_k; }
};

struct RoutingTrace {
  int n_layers = 0;
  std::int64_t n_routed = 0;
  int reuse = 1;
  std::int64_t top_k = 0;
  std::vector<TraceRecord> records;

  std::int64_t pool_size_for_layer(int layer) const;
  void validate() const;
};

RoutingTrace make_trace(const TransformerConfig& cfg);
void append_forward(RoutingTrace& trace, std::int64_t step, const ForwardResult& result);

// One JSON object per line: {"step","layer","n_t","selections":[[[slot,gate],...],...]}
// with gates printed to 17 significant digits.
void write_trace_record(std::ostream& os, const TraceRecord& r);
// Reads records against the layout of `trace` (whose config echo must be
// set). Malformed lines raise ParseError with the line number.
void read_trace_jsonl(std::istream& is, RoutingTrace& trace);
void read_trace_file(const std::string& path, RoutingTrace& trace);

struct LoadStats {
  int group = 0;
  std::vector<std::int64_t> load;  // per pool slot, one unit per selection
  std::vector<double> gate_load;   // per pool slot, gate-weighted
  double mean = 0.0;
  std::vector<double> lbv;
  double under_utilized_ratio = 0.0;
  double tau = 0.1;
  std::int64_t routed_tokens = 0;  // (layer, token) pairs routed in the group
};

// (load_i - mean) / mean over the slots.
std::vector<double> lbv_from_loads(std::span<const std::int64_t> loads);

LoadStats compute_lbv(const RoutingTrace& trace, const LayerGroup& group, double tau = 0.1);
std::vector<LoadStats> compute_all_lbv(const RoutingTrace& trace, double tau = 0.1);

// Fraction of slots with load < tau * mean.
double under_utilized_ratio(const LoadStats& stats, double tau);

// Per-slot selection frequency over all records of `layer`; sums to 1.
std::vector<double> activation_ratio(const RoutingTrace& trace, int layer);

// CSV "group,slot,load,lbv" rows, then "under_utilized_ratio=<x>,tau=<tau>".
void write_stats_csv(std::ostream& os, const std::vector<LoadStats>& stats, double tau);
// CSV "layer,slot_0,...": one row per layer, padded with 0 for smaller pools.
void write_activation_csv(std::ostream& os, const RoutingTrace& trace);

struct PerplexityResult {
  double perplexity = 0.0;
  double mean_loss = 0.0;
  std::int64_t sequences = 0;
  std::int64_t tokens = 0;
  RoutingTrace trace;
};

/// exp(mean next-token cross-entropy) over consecutive windows of
/// seq_len + 1 bytes (stride seq_len), up to max_sequences windows.
PerplexityResult perplexity(const Model& model, std::span<const std::uint8_t> eval_bytes,
                            std::int64_t seq_len, std::int64_t max_sequences, std::int64_t batch,
                            MaskMode mode = MaskMode::None);

// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace rexmoe
