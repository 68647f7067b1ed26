// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "model.hpp"
#include "optim.hpp"
#include "rex_pool.hpp"

namespace rexmoe {

struct TrainConfig {
  std::int64_t batch_size = 8;
  std::int64_t seq_len = 128;
  std::int64_t total_steps = 2000;
  double clip_norm = 1.0;
  std::uint64_t global_seed = 42;
  std::int64_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::int64_t trace_every = 0;       // 0 disables the trace file
  std::string corpus_path;
  double aux_loss_coeff = 0.0;
  LrSchedule lr;
  AdamWConfig adam;
};

struct MetricsConfig {
  double tau = 0.1;
  std::string eval_corpus_path;
  std::int64_t eval_sequences = 64;
  std::int64_t eval_batch = 8;
};

/// Everything a run needs, loaded from one JSON document. Unknown keys are
/// rejected; omitted keys take the desk-scale defaults.
struct RunConfig {
  TransformerConfig model;
  PsrSchedule psr;  // n_base and reuse mirror the model
  TrainConfig train;
  MetricsConfig metrics;
  std::string out_dir = "runs/default";

  void validate() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path, std::span<const std::string> overrides = {});
// Canonical JSON with every field spelled out.
std::string run_config_to_json(const RunConfig& cfg);

// Applies "dotted.path=value" to a JSON document. The value is parsed as
// JSON when possible and kept as a string otherwise.
std::string apply_override(const std::string& json_text, const std::string& assignment);

// True when both configs describe the same parameter layout.
bool same_architecture(const RunConfig& a, const RunConfig& b);

}  // namespace rexmoe
