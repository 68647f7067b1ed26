// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "moe_block.hpp"

namespace rexmoe {

/// Consecutive layers whose routed experts form one candidate pool. Every
/// member layer routes over the same pool object.
struct LayerGroup {
  int index = 0;
  std::vector<int> member_layers;
  std::shared_ptr<ExpertPool> pool;
  std::int64_t experts_per_layer = 0;

  int size() const { return static_cast<int>(member_layers.size()); }
  bool contains(int layer) const;
  // Position of `layer` within the group; its local experts occupy pool
  // slots [position * N, (position + 1) * N).
  int position_of(int layer) const;
};

using ExpertFactory = std::function<ExpertPtr(int home_layer, std::int64_t local_index)>;

/// Partitions [0, layers) into ceil(layers / reuse) groups of `reuse`
/// consecutive layers (the last may be smaller). Pools are filled in layer
/// order by `make`; without a factory, experts carry ids but no weights.
std::vector<LayerGroup> build_groups(int layers, int reuse, std::int64_t experts_per_layer,
                                     const ExpertFactory& make = {});

enum class PsrMode { Off, Linear, Stepwise };

std::string to_string(PsrMode mode);
PsrMode psr_mode_from_string(const std::string& s);

struct PsrSchedule {
  std::int64_t n_base = 8;
  int reuse = 1;
  std::int64_t t_start = 0;
  std::int64_t t_end = 1;
  PsrMode mode = PsrMode::Linear;
  // Stepwise: (iteration, pool size) pairs; the size applies from that
  // iteration on. Sizes refer to a full group of `reuse` layers.
  std::vector<std::pair<std::int64_t, std::int64_t>> step_points;

  void validate(std::int64_t top_k) const;
};

// Candidate pool size N_t for a full group.
std::int64_t pool_size_at(const PsrSchedule& s, std::int64_t t);
// For a group of `group_size` layers (remainder groups scale to group_size * N).
std::int64_t pool_size_at(const PsrSchedule& s, std::int64_t t, int group_size);

struct IterationMask {
  std::int64_t iteration = 0;
  int layer = 0;
  std::vector<std::uint8_t> keep;  // one flag per pool slot
  std::uint64_t rng_seed_used = 0;

  std::int64_t kept() const;
};

std::uint64_t mask_key(std::uint64_t global_seed, std::int64_t iteration, int layer);

/// Keeps N_t of the group_size * N slots, drawn uniformly without
/// replacement from a stream keyed by (global_seed, t, layer).
IterationMask sample_mask(const PsrSchedule& s, std::int64_t t, int layer,
                          std::uint64_t global_seed, int group_size);

/// Keeps exactly the slots whose home layer is `layer`.
IterationMask local_only_mask(const LayerGroup& group, int layer);

}  // namespace rexmoe
