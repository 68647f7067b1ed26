// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "error.hpp"
#include "gradcheck.hpp"
#include "moe_block.hpp"
#include "ops.hpp"
#include "rex_pool.hpp"
#include "rng.hpp"
#include "test_support.hpp"

using namespace rexmoe;
using rexmoe::testing::random_tensor;
using rexmoe::testing::to_vector;

namespace {

ExpertPtr make_expert(std::int64_t d, std::int64_t f, std::uint64_t seed, bool grad = false) {
  auto e = std::make_shared<ExpertFfn>();
  e->w_gate = random_tensor({d, f}, seed * 3 + 0, 0.5, grad);
  e->w_up = random_tensor({d, f}, seed * 3 + 1, 0.5, grad);
  e->w_down = random_tensor({f, d}, seed * 3 + 2, 0.5, grad);
  e->expert_id = static_cast<std::int64_t>(seed);
  return e;
}

ExpertPool make_pool(std::int64_t n, std::int64_t d, std::int64_t f, std::uint64_t seed, bool grad = false) {
  ExpertPool p;
  for (std::int64_t i = 0; i < n; ++i) p.push_back(make_expert(d, f, seed * 100 + i, grad));
  return p;
}

IterationMask mask_from(std::vector<std::uint8_t> keep) {
  IterationMask m;
  m.keep = std::move(keep);
  return m;
}

// Random row-stochastic score matrix with occasional exact ties.
Tensor random_scores(std::int64_t t, std::int64_t e, CounterRng& rng) {
  std::vector<double> v(static_cast<std::size_t>(t * e));
  for (std::int64_t i = 0; i < t; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < e; ++j) {
      double x = rng.next_unit();
      if (rng.next_below(4) == 0) x = 0.5;
      v[i * e + j] = x;
      s += x;
    }
    for (std::int64_t j = 0; j < e; ++j) v[i * e + j] /= s;
  }
  return Tensor::from({t, e}, std::move(v));
}

}  // namespace

TEST(MoeBlockConfig, Validation) {
  MoeBlockConfig c;
  EXPECT_NO_THROW(c.validate());
  c.top_k = 9;
  EXPECT_THROW(c.validate(), ConfigError);
  c.top_k = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.n_shared = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ExpertForward, ZeroWeightsGiveZero) {
  ExpertFfn e;
  e.w_gate = Tensor::zeros({4, 6});
  e.w_up = Tensor::zeros({4, 6});
  e.w_down = Tensor::zeros({6, 4});
  auto y = expert_forward(e, random_tensor({5, 4}, 1));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(ExpertForward, ScalarHandExample) {
  ExpertFfn e;
  e.w_gate = Tensor::from({1, 1}, {1.0});
  e.w_up = Tensor::from({1, 1}, {1.0});
  e.w_down = Tensor::from({1, 1}, {1.0});
  auto y = expert_forward(e, Tensor::from({1, 1}, {1.0}));
  EXPECT_NEAR(y.data()[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(y.data()[0], 0.7311, 5e-5);
}

TEST(ExpertForward, ShapeFollowsInput) {
  auto e = make_expert(6, 10, 1);
  for (std::int64_t t : {1, 2, 7, 33}) {
    auto y = expert_forward(*e, random_tensor({t, 6}, 10 + t));
    EXPECT_EQ(y.shape(), (std::vector<std::int64_t>{t, 6}));
  }
}

TEST(RouterScores, ZeroWeightsAreUniform) {
  RouterWeights rw{Tensor::zeros({5, 3}), 0, 5};
  auto s = router_scores(random_tensor({4, 3}, 2), rw);
  for (double v : s.data()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(RouterScores, HandExample) {
  RouterWeights rw{Tensor::from({3, 2}, {1, 0, 0, 1, -1, 0}), 0, 3};
  auto s = to_vector(router_scores(Tensor::from({1, 2}, {1, 0}), rw));
  const double z = std::exp(1.0) + 1.0 + std::exp(-1.0);
  EXPECT_NEAR(s[0], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(s[1], 1.0 / z, 1e-15);
  EXPECT_NEAR(s[2], std::exp(-1.0) / z, 1e-15);
  EXPECT_NEAR(s[0], 0.66524, 5e-6);
  EXPECT_NEAR(s[1], 0.24473, 5e-6);
  EXPECT_NEAR(s[2], 0.09003, 5e-6);
}

TEST(RouterScores, RowPermutationPermutesScores) {
  auto w = random_tensor({6, 4}, 3);
  auto h = random_tensor({5, 4}, 4);
  std::vector<std::int32_t> perm{3, 0, 5, 1, 4, 2};
  auto base = to_vector(router_scores(h, {w, 0, 6}));
  auto permuted = to_vector(router_scores(h, {gather_rows(w, perm), 0, 6}));
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 6; ++j) EXPECT_DOUBLE_EQ(permuted[i * 6 + j], base[i * 6 + perm[j]]);
}

TEST(RouterScores, RowsSumToOneAndWrongPoolThrows) {
  auto s = router_scores(random_tensor({7, 4}, 5, 3.0), {random_tensor({9, 4}, 6, 3.0), 0, 9});
  for (int i = 0; i < 7; ++i) {
    double sum = 0;
    for (int j = 0; j < 9; ++j) sum += s.data()[i * 9 + j];
    EXPECT_NEAR(sum, 1.0, 1e-14);
  }
  EXPECT_THROW(router_scores(random_tensor({2, 4}, 7), {random_tensor({9, 4}, 8), 0, 8}), DimensionError);
}

TEST(TopkSelect, HandExamples) {
  auto scores = Tensor::from({1, 3}, {0.6652, 0.2447, 0.0900});
  auto g = topk_select(scores, 2, nullptr).gate_vector(0);
  EXPECT_EQ(g.values, (std::vector<double>{0.6652, 0.2447, 0.0}));
  EXPECT_EQ(g.selected, (std::vector<std::int32_t>{0, 1}));

  auto m = mask_from({0, 1, 1});
  g = topk_select(scores, 2, &m).gate_vector(0);
  EXPECT_EQ(g.values, (std::vector<double>{0.0, 0.2447, 0.0900}));
  EXPECT_EQ(g.selected, (std::vector<std::int32_t>{1, 2}));

  auto uniform = Tensor::from({1, 4}, {0.25, 0.25, 0.25, 0.25});
  g = topk_select(uniform, 2, nullptr).gate_vector(0);
  EXPECT_EQ(g.selected, (std::vector<std::int32_t>{0, 1}));
}

TEST(TopkSelect, Errors) {
  auto scores = Tensor::from({1, 3}, {0.5, 0.3, 0.2});
  EXPECT_THROW(topk_select(scores, 4, nullptr), ConfigError);
  auto m = mask_from({1, 0, 0});
  EXPECT_THROW(topk_select(scores, 2, &m), ConfigError);
  auto wrong = mask_from({1, 1});
  EXPECT_THROW(topk_select(scores, 1, &wrong), DimensionError);
}

// Masked slots stay out even when every unmasked score is smaller.
TEST(TopkSelect, MaskedSlotNeverSelectedOverRandomDraws) {
  CounterRng rng(1234);
  for (int draw = 0; draw < 10000; ++draw) {
    const std::int64_t e = 2 + static_cast<std::int64_t>(rng.next_below(15));
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(e)));
    // Random keep set of size in [k, e].
    const std::int64_t n_keep = k + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(e - k + 1)));
    std::vector<std::int64_t> order(static_cast<std::size_t>(e));
    std::iota(order.begin(), order.end(), 0);
    for (std::int64_t i = 0; i < n_keep; ++i)
      std::swap(order[i], order[i + rng.next_below(static_cast<std::uint64_t>(e - i))]);
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(e), 0);
    for (std::int64_t i = 0; i < n_keep; ++i) keep[order[i]] = 1;
    auto m = mask_from(keep);
    auto scores = random_scores(3, e, rng);
    auto r = topk_select(scores, k, &m);
    for (auto s : r.slots) ASSERT_EQ(keep[s], 1) << "draw " << draw;
  }
}

TEST(TopkSelect, GateInvariantsOnRandomInputs) {
  CounterRng rng(77);
  for (int draw = 0; draw < 500; ++draw) {
    const std::int64_t e = 2 + static_cast<std::int64_t>(rng.next_below(20));
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(e)));
    auto x = random_tensor({4, e}, 1000 + draw, 4.0);
    auto scores = softmax(x);
    auto r = topk_select(scores, k, nullptr);
    auto sv = to_vector(scores);
    for (std::int64_t t = 0; t < 4; ++t) {
      auto g = r.gate_vector(t);
      ASSERT_EQ(static_cast<std::int64_t>(g.selected.size()), k);
      int nonzero = 0;
      double sum = 0.0;
      for (std::int64_t j = 0; j < e; ++j) {
        if (g.values[j] != 0.0) {
          ++nonzero;
          EXPECT_EQ(g.values[j], sv[t * e + j]);
        }
        sum += g.values[j];
      }
      EXPECT_EQ(nonzero, k);
      EXPECT_GT(sum, 0.0);
      EXPECT_LE(sum, 1.0 + 1e-15);
      // Selected scores dominate every unselected score.
      double min_sel = 1.0;
      for (auto s : g.selected) min_sel = std::min(min_sel, sv[t * e + s]);
      for (std::int64_t j = 0; j < e; ++j)
        if (g.values[j] == 0.0) EXPECT_LE(sv[t * e + j], min_sel);
    }
  }
}

TEST(TopkSelect, RefreshGatesKeepsSlots) {
  auto a = softmax(random_tensor({3, 5}, 40, 2.0));
  auto b = softmax(random_tensor({3, 5}, 41, 2.0));
  auto r = topk_select(a, 2, nullptr);
  auto f = refresh_gates(r, b);
  EXPECT_EQ(f.slots, r.slots);
  for (std::size_t i = 0; i < f.slots.size(); ++i)
    EXPECT_EQ(f.gates[i], b.data()[(i / 2) * 5 + f.slots[i]]);
  EXPECT_THROW(refresh_gates(r, softmax(random_tensor({3, 4}, 42))), DimensionError);
}

TEST(MoeForward, ZeroGatesGiveZero) {
  auto pool = make_pool(4, 3, 5, 1);
  std::vector<GateVector> gates(2);
  for (auto& g : gates) {
    g.values.assign(4, 0.0);
    g.selected = {0, 2};
  }
  auto y = moe_forward(random_tensor({2, 3}, 2), pool, gates, {});
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(MoeForward, DeltaGateEqualsExpert) {
  auto pool = make_pool(4, 3, 5, 2);
  auto h = random_tensor({3, 3}, 3);
  std::vector<GateVector> gates(3);
  for (auto& g : gates) {
    g.values = {0, 0, 1, 0};
    g.selected = {2};
  }
  auto y = to_vector(moe_forward(h, pool, gates, {}));
  auto ref = to_vector(expert_forward(*pool[2], h));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], ref[i]);
}

// Dense oracle: evaluate every expert and sum gate-weighted outputs.
TEST(MoeForward, SparseEqualsDenseSum) {
  CounterRng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t e = 3 + trial % 6, k = 1 + trial % 3, t = 5, d = 4, f = 6;
    auto pool = make_pool(e, d, f, 50 + trial);
    std::vector<ExpertPtr> shared;
    if (trial % 2) shared.push_back(make_expert(d, f, 9000 + trial));
    auto h = random_tensor({t, d}, 60 + trial);
    auto scores = softmax(random_tensor({t, e}, 70 + trial, 2.0));
    auto r = topk_select(scores, std::min(k, e), nullptr);
    auto sparse = to_vector(moe_forward(h, pool, scores, r, shared));

    std::vector<double> dense(static_cast<std::size_t>(t * d), 0.0);
    for (std::int64_t j = 0; j < e; ++j) {
      auto y = to_vector(expert_forward(*pool[j], h));
      for (std::int64_t i = 0; i < t; ++i) {
        const double g = r.gate_vector(i).values[j];
        for (std::int64_t c = 0; c < d; ++c) dense[i * d + c] += g * y[i * d + c];
      }
    }
    for (const auto& s : shared) {
      auto y = to_vector(expert_forward(*s, h));
      for (std::size_t i = 0; i < dense.size(); ++i) dense[i] += y[i];
    }
    for (std::size_t i = 0; i < dense.size(); ++i) EXPECT_NEAR(sparse[i], dense[i], 1e-10);

    // GateVector entry point agrees with the score-based one.
    std::vector<GateVector> gv;
    for (std::int64_t i = 0; i < t; ++i) gv.push_back(r.gate_vector(i));
    auto via_gates = to_vector(moe_forward(h, pool, gv, shared));
    for (std::size_t i = 0; i < dense.size(); ++i) EXPECT_NEAR(via_gates[i], sparse[i], 1e-14);
  }
}

TEST(MoeForward, Errors) {
  auto pool = make_pool(3, 2, 2, 3);
  std::vector<GateVector> gates(1);
  gates[0].values = {0, 1, 0, 0};
  gates[0].selected = {1};
  EXPECT_THROW(moe_forward(random_tensor({1, 2}, 1), pool, gates, {}), DimensionError);
  gates[0].values = {0, 1, 0};
  gates[0].selected = {5};
  EXPECT_THROW(moe_forward(random_tensor({1, 2}, 1), pool, gates, {}), OutOfRangeError);
}

TEST(MoeForward, GradientsReachOnlySelectedExperts) {
  const std::int64_t t = 4, d = 3, f = 4, e = 5;
  auto pool = make_pool(e, d, f, 4, true);
  auto shared = std::vector<ExpertPtr>{make_expert(d, f, 777, true)};
  RouterWeights rw{random_tensor({e, d}, 11, 1.0, true), 0, e};
  auto h = random_tensor({t, d}, 12, 1.0, true);
  auto w = to_vector(random_tensor({t, d}, 13));

  auto scores0 = router_scores(h, rw);
  auto routing = topk_select(scores0, 2, nullptr);
  std::vector<std::uint8_t> used(static_cast<std::size_t>(e), 0);
  for (auto s : routing.slots) used[s] = 1;
  ASSERT_LT(std::count(used.begin(), used.end(), 1), e) << "test needs an idle expert";

  auto f_eval = [&] {
    auto scores = router_scores(h, rw);
    return dot_const(moe_forward(h, pool, scores, refresh_gates(routing, scores), shared), w);
  };
  {
    Tape tape;
    TapeScope scope(tape);
    auto loss = f_eval();
    tape.backward(loss);
  }
  for (std::int64_t j = 0; j < e; ++j) {
    const auto g = pool[j]->w_gate.grad();
    const bool any = !g.empty() && std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
    EXPECT_EQ(any, used[j] == 1) << "expert " << j;
  }
  // Every router row receives gradient through the softmax coupling.
  auto rg = rw.w.grad();
  for (std::int64_t j = 0; j < e; ++j) {
    double n = 0;
    for (std::int64_t c = 0; c < d; ++c) n += std::abs(rg[j * d + c]);
    EXPECT_GT(n, 0.0) << "router row " << j;
  }
  for (auto* x : {&rw.w, &h, &shared[0]->w_up, &pool[routing.slots[0]]->w_down}) {
    auto r = finite_diff_check(f_eval, *x, 1e-5, 1e-7);
    EXPECT_LT(r.max_rel_error, 1e-6);
  }
}

TEST(BalanceLoss, UniformRoutingValue) {
  // Uniform scores and uniform selection: E * sum_j (1/E)(1/E) = 1.
  const std::int64_t e = 4, t = 4;
  auto scores = Tensor::from({t, e}, std::vector<double>(16, 0.25));
  RoutingDecision r;
  r.tokens = t;
  r.pool_size = e;
  r.top_k = 1;
  r.slots = {0, 1, 2, 3};
  r.gates.assign(4, 0.25);
  EXPECT_NEAR(balance_loss(scores, r, 1.0).item(), 1.0, 1e-15);
  EXPECT_NEAR(balance_loss(scores, r, 0.01).item(), 0.01, 1e-17);
}
