// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

// Runs the CLI with the given arguments; stdout is captured, stderr discarded.
Result cli(const std::string& args) {
  const std::string cmd = std::string("'") + REXMOE_CLI_PATH + "' " + args + " 2>/dev/null";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    static std::atomic<int> n{0};
    dir_ = fs::temp_directory_path() / ("rexmoe_cli_" + std::to_string(getpid()) + "_" + std::to_string(n++));
    fs::create_directories(dir_);
    std::ofstream(file("small.json")) << R"({
      "model": {"hidden": 32, "n_layers": 4, "q_heads": 2, "kv_heads": 1, "head_dim": 16,
                "intermediate": 32, "n_routed": 4, "top_k": 2, "max_seq": 32},
      "reuse": 2,
      "psr": {"mode": "linear", "t_start": 2, "t_end": 6},
      "train": {"batch_size": 2, "seq_len": 32, "total_steps": 10, "warmup_steps": 2,
                "trace_every": 2, "checkpoint_every": 5},
      "metrics": {"eval_sequences": 4, "eval_batch": 2}
    })";
  }
  void TearDown() override {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }
  std::string file(const std::string& name) const { return (dir_ / name).string(); }
  std::string q(const std::string& name) const { return "'" + file(name) + "'"; }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("train").code, 2);
  EXPECT_EQ(cli("frobnicate --config x").code, 2);
  EXPECT_EQ(cli("eval --config " + q("small.json") + " --mask everything").code, 2);
}

TEST_F(CliTest, ConfigErrorsExitTwo) {
  EXPECT_EQ(cli("schedule-preview --config " + q("small.json") + " --override model.top_k=9").code, 2);
  EXPECT_EQ(cli("schedule-preview --config " + q("small.json") + " --override model.nope=1").code, 2);
  std::ofstream(file("broken.json")) << "{";
  EXPECT_EQ(cli("train --config " + q("broken.json")).code, 2);
}

TEST_F(CliTest, IoErrorsExitFour) {
  EXPECT_EQ(cli("schedule-preview --config " + q("missing.json")).code, 4);
  EXPECT_EQ(cli("train --config " + q("small.json") + " --corpus " + q("missing.txt")).code, 4);
}

TEST_F(CliTest, SchedulePreview) {
  const std::string ref = std::string(REXMOE_SOURCE_DIR) + "/configs/reference/";
  auto lin = cli("schedule-preview --config '" + ref + "moe_2.3b_a0.3b_r4.json' --from 10000 --to 30000 --stride 10000");
  EXPECT_EQ(lin.code, 0);
  EXPECT_EQ(lin.out, "step,pool_size\n10000,64\n20000,160\n30000,256\n");
  auto sw = cli("schedule-preview --config '" + ref + "moe_2.3b_a0.3b_r4_stepwise.json' --from 9999 --to 30001 --stride 10001");
  EXPECT_EQ(sw.out, "step,pool_size\n9999,64\n20000,192\n30001,256\n");
  auto sw2 = cli("schedule-preview --config '" + ref + "moe_2.3b_a0.3b_r4_stepwise.json' --from 10000 --to 10000");
  EXPECT_EQ(sw2.out, "step,pool_size\n10000,128\n");
  auto off = cli("schedule-preview --config '" + ref + "moe_2.3b_a0.3b_r4.json' --override psr.mode=off --to 20000 --stride 10000");
  EXPECT_EQ(off.out, "step,pool_size\n0,256\n10000,256\n20000,256\n");
  EXPECT_EQ(cli("schedule-preview --config " + q("small.json")).out,
            cli("schedule-preview --config " + q("small.json")).out);
  EXPECT_EQ(cli("schedule-preview --config " + q("small.json") + " --out " + q("sp")).code, 0);
  EXPECT_EQ(slurp(file("sp/schedule_preview.csv")), cli("schedule-preview --config " + q("small.json")).out);
}

TEST_F(CliTest, TrainEvalTraceAreReproducible) {
  ASSERT_EQ(cli("gen-corpus --out " + q("c.txt") + " --bytes 32768 --seed 1").code, 0);
  ASSERT_EQ(cli("gen-corpus --out " + q("e.txt") + " --bytes 4096 --seed 2").code, 0);
  EXPECT_EQ(fs::file_size(file("c.txt")), 32768u);
  for (const char* run : {"a", "b"}) {
    auto r = cli("train --config " + q("small.json") + " --corpus " + q("c.txt") + " --out " + q(run) +
                 " --progress-every -1");
    ASSERT_EQ(r.code, 0);
  }
  EXPECT_EQ(slurp(file("a/metrics.csv")), slurp(file("b/metrics.csv")));
  EXPECT_EQ(slurp(file("a/trace.jsonl")), slurp(file("b/trace.jsonl")));
  EXPECT_EQ(slurp(file("a/checkpoints/final.rxmo")), slurp(file("b/checkpoints/final.rxmo")));
  EXPECT_TRUE(fs::exists(file("a/checkpoints/step_000005.rxmo")));

  const std::string eval = "eval --config " + q("small.json") + " --corpus " + q("e.txt") + " --out " + q("a");
  auto e1 = cli(eval);
  ASSERT_EQ(e1.code, 0);
  const auto eval_txt = slurp(file("a/eval.txt"));
  auto e2 = cli(eval);
  EXPECT_EQ(e1.out, e2.out);
  EXPECT_EQ(slurp(file("a/eval.txt")), eval_txt);
  EXPECT_NE(e1.out.find("perplexity="), std::string::npos);
  EXPECT_NE(e1.out.find("mask=none"), std::string::npos);
  auto local = cli(eval + " --mask local_only");
  EXPECT_EQ(local.code, 0);
  EXPECT_NE(local.out.find("mask=local_only"), std::string::npos);

  const std::string trace = "trace --config " + q("small.json") + " --out " + q("a");
  ASSERT_EQ(cli(trace).code, 0);
  const auto lbv = slurp(file("a/lbv.csv")), act = slurp(file("a/activation.csv"));
  ASSERT_EQ(cli(trace).code, 0);
  EXPECT_EQ(slurp(file("a/lbv.csv")), lbv);
  EXPECT_EQ(slurp(file("a/activation.csv")), act);
  EXPECT_EQ(lbv.rfind("group,slot,load,lbv\n", 0), 0u);

  // Resume from the step-5 checkpoint reproduces the uninterrupted files.
  ASSERT_EQ(cli("train --config " + q("small.json") + " --corpus " + q("c.txt") + " --out " + q("r") +
                " --until 5 --progress-every -1").code, 0);
  ASSERT_EQ(cli("train --config " + q("small.json") + " --corpus " + q("c.txt") + " --out " + q("r") +
                " --resume " + q("r/checkpoints/step_000005.rxmo") + " --progress-every -1").code, 0);
  EXPECT_EQ(slurp(file("r/metrics.csv")), slurp(file("a/metrics.csv")));

  // Corrupted checkpoint on resume is an I/O-class failure.
  auto bytes = slurp(file("a/checkpoints/final.rxmo"));
  bytes[64] ^= 1;
  std::ofstream(file("bad.rxmo"), std::ios::binary) << bytes;
  EXPECT_EQ(cli("eval --config " + q("small.json") + " --corpus " + q("e.txt") + " --checkpoint " + q("bad.rxmo")).code, 4);
}

TEST_F(CliTest, VanillaOverrideTrains) {
  ASSERT_EQ(cli("gen-corpus --out " + q("c.txt") + " --bytes 16384 --seed 3").code, 0);
  auto r = cli("train --config " + q("small.json") + " --override reuse=1 --corpus " + q("c.txt") + " --out " +
               q("v") + " --until 2 --progress-every -1");
  EXPECT_EQ(r.code, 0);
  const auto m = slurp(file("v/metrics.csv"));
  // Vanilla pools hold N = 4 slots throughout.
  EXPECT_NE(m.find("\n0,"), std::string::npos);
  std::istringstream is(m);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string cell;
    for (int i = 0; i < 4; ++i) std::getline(ss, cell, ',');
    EXPECT_EQ(cell, "4");
  }
}

TEST_F(CliTest, TraceParseErrorExitsFour) {
  std::ofstream(file("t.jsonl")) << "{\"step\":0,\"layer\":0,\"n_t\":4,\"selections\":[]}\n{oops\n";
  EXPECT_EQ(cli("trace --config " + q("small.json") + " --trace " + q("t.jsonl") + " --out " + q("s")).code, 4);
}
