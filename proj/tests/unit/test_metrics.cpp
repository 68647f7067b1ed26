// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "error.hpp"
#include "corpus.hpp"
#include "metrics.hpp"
#include "ops.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "test_support.hpp"

using namespace rexmoe;

namespace {

RoutingTrace empty_trace(int layers, std::int64_t n, int reuse, std::int64_t k) {
  RoutingTrace t;
  t.n_layers = layers;
  t.n_routed = n;
  t.reuse = reuse;
  t.top_k = k;
  return t;
}

// Random trace with distinct slots per token, drawn from a seeded stream.
RoutingTrace random_trace(std::uint64_t seed, int layers, std::int64_t n, int reuse, std::int64_t k,
                          std::int64_t tokens, int steps) {
  auto t = empty_trace(layers, n, reuse, k);
  CounterRng rng(seed);
  for (int s = 0; s < steps; ++s)
    for (int l = 0; l < layers; ++l) {
      TraceRecord r;
      r.step = s * 10;
      r.layer = l;
      r.top_k = k;
      const auto pool = t.pool_size_for_layer(l);
      r.n_t = pool;
      for (std::int64_t i = 0; i < tokens; ++i) {
        std::vector<std::int32_t> chosen;
        while (static_cast<std::int64_t>(chosen.size()) < k) {
          // Skewed toward low slots so loads are uneven.
          auto a = static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(pool)));
          auto b = static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(pool)));
          auto slot = std::min(a, b);
          if (std::find(chosen.begin(), chosen.end(), slot) == chosen.end()) chosen.push_back(slot);
        }
        for (auto c : chosen) {
          r.slots.push_back(c);
          r.gates.push_back(0.01 + 0.99 * rng.next_unit());
        }
      }
      t.records.push_back(std::move(r));
    }
  return t;
}

TraceRecord single_record(int layer, std::vector<std::int32_t> slots, std::int64_t k) {
  TraceRecord r;
  r.layer = layer;
  r.top_k = k;
  r.slots = std::move(slots);
  r.gates.assign(r.slots.size(), 0.5);
  return r;
}

}  // namespace

TEST(Lbv, PerfectBalanceIsZero) {
  std::vector<std::int64_t> loads{10, 10, 10, 10};
  EXPECT_EQ(lbv_from_loads(loads), (std::vector<double>{0, 0, 0, 0}));
}

TEST(Lbv, SingleHotExpert) {
  std::vector<std::int64_t> loads{40, 0, 0, 0};
  EXPECT_EQ(lbv_from_loads(loads), (std::vector<double>{3, -1, -1, -1}));
}

TEST(Lbv, EmptyErrors) {
  EXPECT_THROW(lbv_from_loads(std::vector<std::int64_t>{}), EmptyError);
  EXPECT_THROW(lbv_from_loads(std::vector<std::int64_t>{0, 0}), EmptyError);
  auto t = empty_trace(2, 2, 1, 1);
  auto gs = build_groups(2, 1, 2);
  EXPECT_THROW(compute_lbv(t, gs[0]), EmptyError);
}

TEST(Lbv, ComputeFromSingleExpertTrace) {
  auto t = empty_trace(1, 4, 1, 1);
  t.records.push_back(single_record(0, std::vector<std::int32_t>(40, 0), 1));
  auto s = compute_lbv(t, build_groups(1, 1, 4)[0]);
  EXPECT_EQ(s.load, (std::vector<std::int64_t>{40, 0, 0, 0}));
  EXPECT_EQ(s.lbv, (std::vector<double>{3, -1, -1, -1}));
  EXPECT_EQ(s.mean, 10.0);
  EXPECT_EQ(s.under_utilized_ratio, 0.75);
  EXPECT_EQ(s.routed_tokens, 40);
}

// Independent recount over dictionaries keyed by (group, slot).
TEST(Lbv, MatchesBruteForceRecount) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const int layers = 2 + static_cast<int>(seed % 5);
    const int reuse = 1 + static_cast<int>(seed % 3) % layers;
    const std::int64_t n = 2 + static_cast<std::int64_t>(seed % 4), k = 1 + static_cast<std::int64_t>(seed % 2);
    auto t = random_trace(seed, layers, n, reuse, k, 1000 / layers, 2);
    std::map<std::pair<int, int>, std::int64_t> counts;
    std::map<int, std::int64_t> tokens;
    for (const auto& r : t.records) {
      const int g = r.layer / reuse;
      tokens[g] += static_cast<std::int64_t>(r.slots.size()) / k;
      for (auto s : r.slots) counts[{g, s}] += 1;
    }
    auto stats = compute_all_lbv(t);
    ASSERT_EQ(static_cast<int>(stats.size()), (layers + reuse - 1) / reuse);
    for (const auto& st : stats) {
      std::int64_t sum = 0;
      for (std::size_t i = 0; i < st.load.size(); ++i) {
        auto it = counts.find({st.group, static_cast<int>(i)});
        EXPECT_EQ(st.load[i], it == counts.end() ? 0 : it->second);
        sum += st.load[i];
      }
      EXPECT_EQ(sum, k * st.routed_tokens);
      EXPECT_EQ(st.routed_tokens, tokens[st.group]);
      double mean_lbv = 0;
      for (double v : st.lbv) mean_lbv += v;
      EXPECT_NEAR(mean_lbv / static_cast<double>(st.lbv.size()), 0.0, 1e-12);
      for (std::size_t i = 0; i < st.lbv.size(); ++i)
        EXPECT_EQ(st.lbv[i], (static_cast<double>(st.load[i]) - st.mean) / st.mean);
    }
  }
}

TEST(Lbv, PermutationEquivariant) {
  std::vector<std::int64_t> loads{5, 17, 0, 9, 3};
  auto base = lbv_from_loads(loads);
  std::vector<int> perm{4, 2, 0, 3, 1};
  std::vector<std::int64_t> p(5);
  for (int i = 0; i < 5; ++i) p[i] = loads[perm[i]];
  auto permuted = lbv_from_loads(p);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(permuted[i], base[perm[i]]);
}

TEST(UnderUtilized, Examples) {
  LoadStats s;
  s.load = {10, 10, 10, 10};
  s.mean = 10;
  EXPECT_EQ(under_utilized_ratio(s, 0.1), 0.0);
  EXPECT_EQ(under_utilized_ratio(s, 0.99), 0.0);
  s.load = {40, 0, 0, 0};
  EXPECT_EQ(under_utilized_ratio(s, 0.1), 0.75);
  s.load = {11, 10, 10, 9};
  EXPECT_GE(under_utilized_ratio(s, 1.0 - 1e-12), 0.25);
}

TEST(ActivationRatio, ForcedSlotAndNormalization) {
  auto t = empty_trace(2, 3, 2, 1);
  t.records.push_back(single_record(1, {4, 4, 4}, 1));
  auto a = activation_ratio(t, 1);
  EXPECT_EQ(a, (std::vector<double>{0, 0, 0, 0, 1, 0}));
  EXPECT_THROW(activation_ratio(t, 0), EmptyError);

  auto rt = random_trace(3, 4, 4, 2, 2, 333, 3);
  for (int l = 0; l < 4; ++l) {
    auto f = activation_ratio(rt, l);
    double s = 0;
    for (double v : f) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
    // Frequencies times total selections recover integer counts.
    std::vector<std::int64_t> counts(f.size(), 0);
    std::int64_t total = 0;
    for (const auto& r : rt.records)
      if (r.layer == l)
        for (auto slot : r.slots) ++counts[slot], ++total;
    EXPECT_EQ(total, 2 * 333 * 3);
    for (std::size_t i = 0; i < f.size(); ++i)
      EXPECT_EQ(std::llround(f[i] * static_cast<double>(total)), counts[i]);
  }
}

TEST(Trace, JsonlRoundTripIsExact) {
  auto t = random_trace(11, 3, 4, 2, 2, 7, 2);
  std::ostringstream os;
  for (const auto& r : t.records) write_trace_record(os, r);
  auto back = empty_trace(3, 4, 2, 2);
  std::istringstream is(os.str());
  read_trace_jsonl(is, back);
  ASSERT_EQ(back.records.size(), t.records.size());
  for (std::size_t i = 0; i < t.records.size(); ++i) {
    EXPECT_EQ(back.records[i].step, t.records[i].step);
    EXPECT_EQ(back.records[i].layer, t.records[i].layer);
    EXPECT_EQ(back.records[i].n_t, t.records[i].n_t);
    EXPECT_EQ(back.records[i].slots, t.records[i].slots);
    EXPECT_EQ(back.records[i].gates, t.records[i].gates);
  }
  std::ostringstream again;
  for (const auto& r : back.records) write_trace_record(again, r);
  EXPECT_EQ(again.str(), os.str());
}

TEST(Trace, RecordFormat) {
  TraceRecord r;
  r.step = 3;
  r.layer = 1;
  r.n_t = 8;
  r.top_k = 2;
  r.slots = {5, 0};
  r.gates = {0.5, 0.25};
  std::ostringstream os;
  write_trace_record(os, r);
  EXPECT_EQ(os.str(), "{\"step\":3,\"layer\":1,\"n_t\":8,\"selections\":[[[5,0.5],[0,0.25]]]}\n");
}

TEST(Trace, MalformedLinesReportLineNumbers) {
  auto check = [](const std::string& text, const std::string& needle) {
    auto t = empty_trace(2, 2, 1, 1);
    std::istringstream is(text);
    try {
      read_trace_jsonl(is, t);
      ADD_FAILURE() << "expected ParseError for " << text;
    } catch (const ParseError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  const std::string good = "{\"step\":0,\"layer\":0,\"n_t\":2,\"selections\":[[[1,0.5]]]}\n";
  check(good + "{not json\n", "line 2");
  check(good + good + "{\"step\":0,\"layer\":0,\"n_t\":2}\n", "line 3");
  check("{\"step\":0,\"layer\":5,\"n_t\":2,\"selections\":[]}\n", "line 1");
  check("{\"step\":0,\"layer\":0,\"n_t\":2,\"selections\":[[[7,0.5]]]}\n", "outside pool");
  check("{\"step\":0,\"layer\":0,\"n_t\":2,\"selections\":[[[0,0.5],[1,0.2]]]}\n", "exactly 1");
  check("{\"step\":0,\"layer\":0,\"n_t\":2,\"selections\":[],\"x\":1}\n", "unknown field");
}

TEST(StatsCsv, UniformAndSingleExpert) {
  auto t = empty_trace(1, 4, 1, 1);
  t.records.push_back(single_record(0, {0, 1, 2, 3, 0, 1, 2, 3}, 1));
  std::ostringstream os;
  write_stats_csv(os, compute_all_lbv(t), 0.1);
  EXPECT_EQ(os.str(), "group,slot,load,lbv\n0,0,2,0\n0,1,2,0\n0,2,2,0\n0,3,2,0\nunder_utilized_ratio=0,tau=0.1\n");

  auto s = empty_trace(1, 4, 1, 1);
  s.records.push_back(single_record(0, std::vector<std::int32_t>(8, 2), 1));
  std::ostringstream os2;
  write_stats_csv(os2, compute_all_lbv(s), 0.1);
  EXPECT_EQ(os2.str(), "group,slot,load,lbv\n0,0,0,-1\n0,1,0,-1\n0,2,8,3\n0,3,0,-1\nunder_utilized_ratio=0.75,tau=0.1\n");
}

TEST(ActivationCsv, RowsSumToOne) {
  auto t = random_trace(5, 3, 2, 2, 1, 50, 1);
  std::ostringstream os;
  write_activation_csv(os, t);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "layer,slot_0,slot_1,slot_2,slot_3");
  int rows = 0;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    double sum = 0;
    while (std::getline(ss, cell, ',')) sum += std::stod(cell);
    EXPECT_NEAR(sum, 1.0, 1e-12);
    ++rows;
  }
  EXPECT_EQ(rows, 3);
}

std::vector<std::uint8_t> text_bytes(std::size_t n, std::uint64_t seed) {
  auto s = synthetic_corpus(n, seed);
  return {s.begin(), s.end()};
}

TEST(Perplexity, ZeroHeadIsExactlyVocabSize) {
  TransformerConfig cfg;
  cfg.n_layers = 2;
  Model m(cfg, 1);
  std::fill(m.head().data().begin(), m.head().data().end(), 0.0);
  auto r = perplexity(m, text_bytes(4 * 32 + 1, 2), 32, 0, 2);
  EXPECT_EQ(r.sequences, 4);
  EXPECT_EQ(r.tokens, 128);
  EXPECT_NEAR(r.perplexity, 256.0, 1e-9);
}

TEST(Perplexity, RandomInitIsNearVocabSize) {
  TransformerConfig cfg;
  cfg.reuse = 2;
  Model m(cfg, 42);
  auto r = perplexity(m, text_bytes(8 * 64 + 1, 3), 64, 0, 4);
  EXPECT_NEAR(r.perplexity, 256.0, 2.0);
  EXPECT_EQ(r.trace.records.size(), 2u * 8u);
}

TEST(Perplexity, EqualsExpOfBatchLoss) {
  TransformerConfig cfg;
  cfg.n_layers = 2;
  Model m(cfg, 4);
  auto bytes = text_bytes(33, 5);
  auto r = perplexity(m, bytes, 32, 0, 1);
  std::vector<std::int32_t> in(bytes.begin(), bytes.begin() + 32), tgt(bytes.begin() + 1, bytes.end());
  ForwardOptions opt;
  const double loss = cross_entropy(m.forward(in, 1, 32, opt).logits, tgt).item();
  EXPECT_EQ(r.mean_loss, loss);
  EXPECT_EQ(r.perplexity, std::exp(loss));
}

TEST(Perplexity, Errors) {
  TransformerConfig cfg;
  cfg.n_layers = 1;
  Model m(cfg, 4);
  auto bytes = text_bytes(16, 5);
  EXPECT_THROW(perplexity(m, bytes, 32, 0, 1), EmptyError);
  EXPECT_THROW(perplexity(m, text_bytes(100, 5), 32, 0, 1, MaskMode::Psr), ConfigError);
}

// Training on a repeated 4-byte pattern drives perplexity on it toward 1.
TEST(Perplexity, MemorizedPatternApproachesOne) {
  TransformerConfig cfg;
  cfg.hidden = 32;
  cfg.n_layers = 2;
  cfg.q_heads = 2;
  cfg.kv_heads = 1;
  cfg.intermediate = 32;
  cfg.n_routed = 4;
  cfg.top_k = 1;
  cfg.reuse = 2;
  cfg.max_seq = 16;
  Model m(cfg, 7);
  std::vector<std::uint8_t> pattern;
  for (int i = 0; i < 4 * 40; ++i) pattern.push_back(static_cast<std::uint8_t>("abcd"[i % 4]));
  std::vector<Tensor> params;
  for (const auto& p : m.named_parameters()) params.push_back(p.tensor);
  AdamWConfig ac;
  ac.weight_decay = 0.0;
  AdamW opt(ac, params);
  std::vector<std::int32_t> in, tgt;
  for (int b = 0; b < 4; ++b)
    for (int i = 0; i < 16; ++i) {
      in.push_back(pattern[b + i]);
      tgt.push_back(pattern[b + i + 1]);
    }
  const double before = perplexity(m, pattern, 16, 0, 4).perplexity;
  for (int step = 0; step < 150; ++step) {
    for (auto& p : params) p.zero_grad();
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      ForwardOptions fo;
      loss = cross_entropy(m.forward(in, 4, 16, fo).logits, tgt);
    }
    tape.backward(loss);
    clip_grads(params, 1.0);
    opt.step(params, 1e-2);
  }
  const double after = perplexity(m, pattern, 16, 0, 4).perplexity;
  EXPECT_GT(before, 100.0);
  EXPECT_LT(after, 1.05);
}
