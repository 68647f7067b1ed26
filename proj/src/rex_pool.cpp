// SPDX-License-Identifier: Apache-2.0
#include "rex_pool.hpp"

#include <algorithm>
#include <numeric>

#include "error.hpp"
#include "rng.hpp"

namespace rexmoe {

bool LayerGroup::contains(int layer) const {
  return std::find(member_layers.begin(), member_layers.end(), layer) != member_layers.end();
}

int LayerGroup::position_of(int layer) const {
  auto it = std::find(member_layers.begin(), member_layers.end(), layer);
  if (it == member_layers.end())
    throw OutOfRangeError("layer " + std::to_string(layer) + " is not in group " +
                          std::to_string(index));
  return static_cast<int>(it - member_layers.begin());
}

std::vector<LayerGroup> build_groups(int layers, int reuse, std::int64_t experts_per_layer,
                                     const ExpertFactory& make) {
  if (layers < 1) throw ConfigError("build_groups: need at least one layer");
  if (reuse < 1) throw ConfigError("build_groups: reuse factor must be >= 1");
  if (reuse > layers)
    throw ConfigError("build_groups: reuse factor " + std::to_string(reuse) +
                      " exceeds layer count " + std::to_string(layers));
  if (experts_per_layer < 1) throw ConfigError("build_groups: need at least one expert per layer");

  std::vector<LayerGroup> groups;
  for (int first = 0; first < layers; first += reuse) {
    LayerGroup g;
    g.index = static_cast<int>(groups.size());
    g.experts_per_layer = experts_per_layer;
    g.pool = std::make_shared<ExpertPool>();
    for (int l = first; l < std::min(first + reuse, layers); ++l) {
      g.member_layers.push_back(l);
      for (std::int64_t i = 0; i < experts_per_layer; ++i) {
        ExpertPtr e = make ? make(l, i) : std::make_shared<ExpertFfn>();
        e->expert_id = static_cast<std::int64_t>(l) * experts_per_layer + i;
        e->home_layer = l;
        g.pool->push_back(std::move(e));
      }
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

std::string to_string(PsrMode mode) {
  switch (mode) {
    case PsrMode::Off: return "off";
    case PsrMode::Linear: return "linear";
    case PsrMode::Stepwise: return "stepwise";
  }
  return "off";
}

PsrMode psr_mode_from_string(const std::string& s) {
  if (s == "off") return PsrMode::Off;
  if (s == "linear") return PsrMode::Linear;
  if (s == "stepwise") return PsrMode::Stepwise;
  throw ConfigError("psr.mode: expected off|linear|stepwise, got '" + s + "'");
}

void PsrSchedule::validate(std::int64_t top_k) const {
  if (n_base < 1) throw ConfigError("psr: n_base must be >= 1");
  if (reuse < 1) throw ConfigError("psr: reuse must be >= 1");
  if (top_k > n_base)
    throw ConfigError("psr: top_k " + std::to_string(top_k) + " exceeds the minimum pool size " +
                      std::to_string(n_base));
  if (mode == PsrMode::Off) return;
  if (t_start < 0 || !(t_start < t_end))
    throw ConfigError("psr: need 0 <= t_start < t_end, got t_start=" + std::to_string(t_start) +
                      " t_end=" + std::to_string(t_end));
  if (mode == PsrMode::Stepwise) {
    std::int64_t prev_t = -1, prev_n = n_base;
    for (const auto& [t, n] : step_points) {
      if (t <= prev_t) throw ConfigError("psr.step_points: iterations must increase");
      if (n < prev_n) throw ConfigError("psr.step_points: pool sizes must be nondecreasing");
      if (n > n_base * reuse)
        throw ConfigError("psr.step_points: pool size " + std::to_string(n) + " exceeds r*N = " +
                          std::to_string(n_base * reuse));
      prev_t = t;
      prev_n = n;
    }
  }
}

std::int64_t pool_size_at(const PsrSchedule& s, std::int64_t t) { return pool_size_at(s, t, s.reuse); }

std::int64_t pool_size_at(const PsrSchedule& s, std::int64_t t, int group_size) {
  const std::int64_t n = s.n_base;
  const std::int64_t full = n * group_size;
  switch (s.mode) {
    case PsrMode::Off:
      return full;
    case PsrMode::Linear: {
      if (t <= s.t_start) return n;
      if (t > s.t_end) return full;
      // floor((1 + (g-1)(t-ts)/(te-ts)) * N) in exact integer arithmetic.
      const std::int64_t num = static_cast<std::int64_t>(group_size - 1) * n * (t - s.t_start);
      return n + num / (s.t_end - s.t_start);
    }
    case PsrMode::Stepwise: {
      std::int64_t size = n * s.reuse;
      bool any = false;
      for (const auto& [ti, ni] : s.step_points) {
        if (ti > t) break;
        size = ni;
        any = true;
      }
      if (!any) return n;
      if (group_size != s.reuse) size = size * group_size / s.reuse;
      return std::clamp(size, n, full);
    }
  }
  return full;
}

std::int64_t IterationMask::kept() const {
  return std::count(keep.begin(), keep.end(), std::uint8_t{1});
}

std::uint64_t mask_key(std::uint64_t global_seed, std::int64_t iteration, int layer) {
  std::uint64_t k = combine_keys(global_seed, hash_name("psr-mask"));
  k = combine_keys(k, static_cast<std::uint64_t>(iteration));
  return combine_keys(k, static_cast<std::uint64_t>(layer));
}

IterationMask sample_mask(const PsrSchedule& s, std::int64_t t, int layer,
                          std::uint64_t global_seed, int group_size) {
  const std::int64_t total = s.n_base * group_size;
  const std::int64_t n_t = pool_size_at(s, t, group_size);
  IterationMask m;
  m.iteration = t;
  m.layer = layer;
  m.rng_seed_used = mask_key(global_seed, t, layer);
  m.keep.assign(static_cast<std::size_t>(total), 0);
  if (n_t >= total) {
    std::fill(m.keep.begin(), m.keep.end(), std::uint8_t{1});
    return m;
  }
  // Partial Fisher-Yates: the first n_t positions are a uniform sample.
  std::vector<std::int64_t> slots(static_cast<std::size_t>(total));
  std::iota(slots.begin(), slots.end(), 0);
  CounterRng rng(m.rng_seed_used);
  for (std::int64_t i = 0; i < n_t; ++i) {
    const auto j = i + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(total - i)));
    std::swap(slots[i], slots[j]);
    m.keep[slots[i]] = 1;
  }
  return m;
}

IterationMask local_only_mask(const LayerGroup& group, int layer) {
  if (!group.contains(layer))
    throw OutOfRangeError("local_only_mask: layer " + std::to_string(layer) + " not in group " +
                          std::to_string(group.index));
  IterationMask m;
  m.layer = layer;
  const auto n = group.experts_per_layer;
  m.keep.assign(static_cast<std::size_t>(n * group.size()), 0);
  const auto pos = group.position_of(layer);
  std::fill_n(m.keep.begin() + pos * n, n, std::uint8_t{1});
  return m;
}

}  // namespace rexmoe
