// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "optim.hpp"

namespace rexmoe {

struct StepReport {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::int64_t pool_size = 0;  // N_t of a full group
  double grad_norm = 0.0;      // before clipping
  RoutingTrace trace;
};

class Trainer {
 public:
  Trainer(RunConfig cfg, Corpus corpus);

  const RunConfig& config() const { return cfg_; }
  const Model& model() const { return *model_; }
  Model& model() { return *model_; }
  const AdamW& optimizer() const { return opt_; }
  const Corpus& corpus() const { return corpus_; }
  std::int64_t next_step() const { return next_step_; }

  // One optimization step at iteration next_step().
  StepReport step();

  Checkpoint to_checkpoint() const;
  void save_checkpoint(const std::string& path) const;
  // Restores weights, optimizer state and step. The stored config must
  // describe the same architecture as this trainer's.
  void load_checkpoint(const std::string& path);
  void restore(const Checkpoint& ck);

 private:
  RunConfig cfg_;
  Corpus corpus_;
  std::unique_ptr<Model> model_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  AdamW opt_;
  std::int64_t next_step_ = 0;
};

// Throws an Internal-kind Error if any selected slot was masked at its
// (iteration, layer).
void check_masks_respected(const Model& model, const PsrSchedule& psr, std::uint64_t seed,
                           std::int64_t iteration, const ForwardResult& fr);

// Model rebuilt from a checkpoint's stored config and weights. When
// `runtime` is given its architecture must match the stored one.
std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ck, const RunConfig* runtime = nullptr);

struct TrainRunOptions {
  std::string out_dir;
  std::int64_t until_step = -1;  // -1: config total_steps
  std::function<void(const StepReport&)> on_step;
};

/// Runs steps until `until_step`, writing out_dir/metrics.csv,
/// out_dir/trace.jsonl and checkpoints under out_dir/checkpoints. Files are
/// truncated when starting from step 0 and appended to otherwise.
void run_training(Trainer& trainer, const TrainRunOptions& opt);

std::string checkpoint_path_for(const std::string& out_dir, std::int64_t step);
std::string final_checkpoint_path(const std::string& out_dir);

// "step,loss,lr,pool_size,grad_norm" row for a report.
std::string metrics_row(const StepReport& r);

}  // namespace rexmoe
