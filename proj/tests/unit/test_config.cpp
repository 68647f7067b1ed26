// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "config.hpp"
#include "error.hpp"
#include "test_support.hpp"

using namespace rexmoe;

namespace {

void expect_config_error(const std::string& json, const std::string& needle) {
  try {
    parse_run_config(json);
    ADD_FAILURE() << "expected ConfigError for " << json;
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

std::string source_path(const std::string& rel) { return std::string(REXMOE_SOURCE_DIR) + "/" + rel; }

}  // namespace

TEST(RunConfig, EmptyDocumentGivesDeskDefaults) {
  auto c = parse_run_config("{}");
  EXPECT_EQ(c.model.vocab, 256);
  EXPECT_EQ(c.model.hidden, 64);
  EXPECT_EQ(c.model.n_layers, 8);
  EXPECT_EQ(c.model.reuse, 1);
  EXPECT_EQ(c.train.batch_size, 8);
  EXPECT_EQ(c.train.seq_len, 128);
  EXPECT_EQ(c.train.total_steps, 2000);
  EXPECT_EQ(c.train.global_seed, 42u);
  EXPECT_EQ(c.psr.mode, PsrMode::Linear);
  EXPECT_EQ(c.psr.t_start, 200);
  EXPECT_EQ(c.psr.t_end, 1000);
  EXPECT_EQ(c.metrics.tau, 0.1);
  EXPECT_EQ(c.train.lr.lr_max, 3e-4);
  EXPECT_EQ(c.train.lr.lr_min, 3e-5);
  EXPECT_EQ(c.train.lr.warmup_steps, 100);
  EXPECT_EQ(c.train.adam.beta2, 0.95);
  EXPECT_EQ(c.train.adam.weight_decay, 0.1);
}

TEST(RunConfig, CanonicalJsonRoundTrips) {
  auto c = parse_run_config(R"({"reuse":2,"psr":{"mode":"stepwise","step_points":[[300,12],[600,16]]},"train":{"total_steps":900}})");
  const auto text = run_config_to_json(c);
  auto back = parse_run_config(text);
  EXPECT_EQ(run_config_to_json(back), text);
  EXPECT_EQ(back.psr.step_points, (std::vector<std::pair<std::int64_t, std::int64_t>>{{300, 12}, {600, 16}}));
  EXPECT_TRUE(same_architecture(c, back));
}

TEST(RunConfig, MirroredFields) {
  auto c = parse_run_config(R"({"model":{"n_routed":6,"top_k":1},"reuse":4,"train":{"total_steps":777}})");
  EXPECT_EQ(c.psr.n_base, 6);
  EXPECT_EQ(c.psr.reuse, 4);
  EXPECT_EQ(c.train.lr.total_steps, 777);
}

TEST(RunConfig, RejectsUnknownKeysWithPath) {
  expect_config_error(R"({"modle":{}})", "unknown config key 'modle'");
  expect_config_error(R"({"model":{"hiden":3}})", "unknown config key 'model.hiden'");
  expect_config_error(R"({"train":{"lr":1}})", "unknown config key 'train.lr'");
  expect_config_error(R"({"psr":{"start":1}})", "unknown config key 'psr.start'");
}

TEST(RunConfig, FieldLevelValidation) {
  expect_config_error(R"({"model":{"top_k":9}})", "top_k");
  expect_config_error(R"({"model":{"hidden":"wide"}})", "model.hidden");
  expect_config_error(R"({"train":{"seq_len":129}})", "train.seq_len");
  expect_config_error(R"({"train":{"clip_norm":0}})", "clip_norm");
  expect_config_error(R"({"psr":{"mode":"cosine"}})", "psr.mode");
  expect_config_error(R"({"psr":{"t_start":10,"t_end":5}})", "t_start");
  expect_config_error(R"({"reuse":9})", "reuse");
  expect_config_error(R"({"metrics":{"tau":1.5}})", "tau");
  expect_config_error("{not json", "not valid JSON");
  expect_config_error(R"({"train":{"warmup_steps":3000}})", "warmup");
}

TEST(RunConfig, PsrOffSkipsScheduleChecks) {
  auto c = parse_run_config(R"({"psr":{"mode":"off","t_start":10,"t_end":5}})");
  EXPECT_EQ(c.psr.mode, PsrMode::Off);
}

TEST(Overrides, DottedPathsAndTypes) {
  auto j = apply_override("{}", "psr.mode=off");
  auto c = parse_run_config(j);
  EXPECT_EQ(c.psr.mode, PsrMode::Off);
  c = parse_run_config(apply_override("{}", "reuse=1"));
  EXPECT_EQ(c.model.reuse, 1);
  c = parse_run_config(apply_override(apply_override("{}", "train.lr_max=0.001"), "out_dir=runs/x"));
  EXPECT_EQ(c.train.lr.lr_max, 0.001);
  EXPECT_EQ(c.out_dir, "runs/x");
  c = parse_run_config(apply_override("{}", "psr.step_points=[[300,10]]"));
  EXPECT_EQ(c.psr.step_points.size(), 1u);
  EXPECT_THROW(apply_override("{}", "no_equals"), ConfigError);
  EXPECT_THROW(parse_run_config(apply_override("{}", "model.bogus=1")), ConfigError);
}

TEST(Overrides, AppliedOnLoad) {
  rexmoe::testing::TempDir dir("config");
  const auto path = dir.file("c.json");
  std::ofstream(path) << R"({"reuse":2})";
  std::vector<std::string> ov{"psr.mode=off", "model.n_shared=1"};
  auto c = load_run_config(path, ov);
  EXPECT_EQ(c.model.reuse, 2);
  EXPECT_EQ(c.psr.mode, PsrMode::Off);
  EXPECT_EQ(c.model.n_shared, 1);
  EXPECT_THROW(load_run_config(dir.file("missing.json")), IoError);
}

TEST(Presets, ShippedConfigsLoad) {
  for (const char* name : {"desk_vanilla", "desk_r2", "desk_r4", "desk_r2_se", "desk_r4_stepwise"}) {
    auto c = load_run_config(source_path(std::string("configs/") + name + ".json"));
    EXPECT_EQ(c.model.hidden, 64) << name;
    EXPECT_EQ(c.train.total_steps, 2000) << name;
  }
  EXPECT_EQ(load_run_config(source_path("configs/desk_vanilla.json")).model.reuse, 1);
  EXPECT_EQ(load_run_config(source_path("configs/desk_r2_se.json")).model.n_shared, 1);
  for (const char* name : {"moe_0.5b_a0.07b_r4", "moe_0.5b_a0.07b_se_r4", "moe_2.3b_a0.3b_r4",
                           "moe_2.3b_a0.3b_r4_stepwise", "moe_2.3b_a0.3b_se_r4", "moe_7b_a3b_se_r4"}) {
    auto c = load_run_config(source_path(std::string("configs/reference/") + name + ".json"));
    EXPECT_EQ(c.model.reuse, 4) << name;
    EXPECT_EQ(c.psr.t_start, 10000) << name;
    EXPECT_EQ(c.psr.t_end, 30000) << name;
  }
  auto sw = load_run_config(source_path("configs/reference/moe_2.3b_a0.3b_r4_stepwise.json"));
  EXPECT_EQ(pool_size_at(sw.psr, 10000), 128);
  EXPECT_EQ(pool_size_at(sw.psr, 20000), 192);
  EXPECT_EQ(pool_size_at(sw.psr, 30000), 256);
}

TEST(SameArchitecture, DetectsLayoutChanges) {
  auto a = parse_run_config("{}");
  auto b = parse_run_config(R"({"train":{"batch_size":2},"psr":{"mode":"off"}})");
  EXPECT_TRUE(same_architecture(a, b));
  auto c = parse_run_config(R"({"reuse":2})");
  EXPECT_FALSE(same_architecture(a, c));
  auto d = parse_run_config(R"({"model":{"n_shared":1}})");
  EXPECT_FALSE(same_architecture(a, d));
}
