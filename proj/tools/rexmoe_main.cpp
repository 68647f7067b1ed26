// SPDX-License-Identifier: Apache-2.0
// Command-line front end. Talks to the library only through rexmoe.h.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rexmoe/rexmoe.h"

namespace {

struct ConfigFree {
  void operator()(rexmoe_config* c) const { rexmoe_config_free(c); }
};
struct TrainerFree {
  void operator()(rexmoe_trainer* t) const { rexmoe_trainer_free(t); }
};
struct StringFree {
  void operator()(char* s) const { rexmoe_string_free(s); }
};
using ConfigPtr = std::unique_ptr<rexmoe_config, ConfigFree>;
using TrainerPtr = std::unique_ptr<rexmoe_trainer, TrainerFree>;
using StringPtr = std::unique_ptr<char, StringFree>;

// Thrown after a failed library call; carries the process exit code.
struct Failure {
  int code;
};

void check(rexmoe_status s, const char* what) {
  if (s == REXMOE_OK) return;
  std::fprintf(stderr, "rexmoe: %s failed (%s): %s\n", what, rexmoe_status_name(s), rexmoe_last_error());
  throw Failure{rexmoe_exit_code(s)};
}

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Run config JSON")->required();
  cmd->add_option("--override", c.overrides, "dotted.path=value, repeatable");
  cmd->add_option("--out", c.out, "Output directory (default: the config's out_dir)");
}

ConfigPtr load(const Common& c) {
  std::vector<const char*> ov;
  for (const auto& o : c.overrides) ov.push_back(o.c_str());
  rexmoe_config* cfg = nullptr;
  check(rexmoe_config_load(c.config.c_str(), ov.data(), ov.size(), &cfg), "loading config");
  return ConfigPtr(cfg);
}

std::string out_dir_of(const Common& c, const rexmoe_config* cfg) {
  if (!c.out.empty()) return c.out;
  char* dir = nullptr;
  check(rexmoe_config_out_dir(cfg, &dir), "reading out_dir");
  return StringPtr(dir).get();
}

struct Progress {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  int64_t every = 100;
};

void on_step(const rexmoe_step_report* r, void* user) {
  auto* p = static_cast<Progress*>(user);
  if (r->step % p->every != 0) return;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - p->start).count();
  std::fprintf(stderr, "step %6lld  loss %.4f  lr %.3e  pool %lld  |g| %.3f  (%.0fs)\n",
               static_cast<long long>(r->step), r->loss, r->lr, static_cast<long long>(r->pool_size),
               r->grad_norm, secs);
}

int cmd_train(const Common& c, const std::string& corpus, const std::string& resume, int64_t until,
              int64_t progress_every) {
  auto cfg = load(c);
  const std::string out = out_dir_of(c, cfg.get());
  rexmoe_trainer* raw = nullptr;
  check(rexmoe_trainer_create(cfg.get(), corpus.empty() ? nullptr : corpus.c_str(), &raw), "creating trainer");
  TrainerPtr trainer(raw);
  if (!resume.empty()) check(rexmoe_trainer_load(trainer.get(), resume.c_str()), "loading checkpoint");
  Progress p;
  p.every = progress_every > 0 ? progress_every : 100;
  check(rexmoe_trainer_run(trainer.get(), out.c_str(), until, progress_every >= 0 ? on_step : nullptr, &p),
        "training");
  int64_t next = 0;
  check(rexmoe_trainer_next_step(trainer.get(), &next), "reading step");
  std::printf("trained to step %lld; outputs in %s\n", static_cast<long long>(next), out.c_str());
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& corpus, const std::string& mask) {
  auto cfg = load(c);
  const std::string out = out_dir_of(c, cfg.get());
  std::string ck = checkpoint;
  if (ck.empty()) ck = (std::filesystem::path(out) / "checkpoints" / "final.rxmo").string();
  rexmoe_eval_report r{};
  check(rexmoe_evaluate(cfg.get(), ck.c_str(), corpus.empty() ? nullptr : corpus.c_str(), mask.c_str(),
                        out.c_str(), &r),
        "evaluating");
  char line[256];
  std::snprintf(line, sizeof line, "perplexity=%.17g\nmean_loss=%.17g\nsequences=%lld\ntokens=%lld\nmask=%s\n",
                r.perplexity, r.mean_loss, static_cast<long long>(r.sequences), static_cast<long long>(r.tokens),
                mask.c_str());
  std::fputs(line, stdout);
  std::ofstream report(std::filesystem::path(out) / "eval.txt", std::ios::trunc);
  report << line;
  if (!report) {
    std::fprintf(stderr, "rexmoe: cannot write %s/eval.txt\n", out.c_str());
    return 4;
  }
  return 0;
}

int cmd_trace(const Common& c, const std::string& trace) {
  auto cfg = load(c);
  const std::string out = out_dir_of(c, cfg.get());
  const std::string path = trace.empty() ? (std::filesystem::path(out) / "trace.jsonl").string() : trace;
  check(rexmoe_analyze_trace(cfg.get(), path.c_str(), out.c_str()), "analyzing trace");
  std::printf("wrote %s/lbv.csv and %s/activation.csv\n", out.c_str(), out.c_str());
  return 0;
}

int cmd_schedule(const Common& c, int64_t first, int64_t last, int64_t stride) {
  auto cfg = load(c);
  if (last < 0) check(rexmoe_config_total_steps(cfg.get(), &last), "reading total_steps");
  char* csv = nullptr;
  check(rexmoe_schedule_preview(cfg.get(), first, last, stride, &csv), "previewing schedule");
  StringPtr holder(csv);
  if (c.out.empty()) {
    std::fputs(csv, stdout);
  } else {
    std::filesystem::create_directories(c.out);
    const auto path = std::filesystem::path(c.out) / "schedule_preview.csv";
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << csv;
    if (!f) {
      std::fprintf(stderr, "rexmoe: cannot write %s\n", path.string().c_str());
      return 4;
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rexmoe: train and analyze reuse-expert MoE language models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(rexmoe_version()));

  Common train_c, eval_c, trace_c, sched_c;
  std::string train_corpus, resume;
  int64_t until = -1, progress_every = 100;
  auto* train = app.add_subcommand("train", "Train a model from a config");
  add_common(train, train_c);
  train->add_option("--corpus", train_corpus, "Training corpus (default: train.corpus_path)");
  train->add_option("--resume", resume, "Checkpoint to continue from");
  train->add_option("--until", until, "Stop after this many total steps (default: train.total_steps)");
  train->add_option("--progress-every", progress_every, "Progress line interval on stderr; -1 disables");

  std::string checkpoint, eval_corpus, mask = "none";
  auto* eval = app.add_subcommand("eval", "Perplexity of a checkpoint on a byte corpus");
  add_common(eval, eval_c);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint (default: <out>/checkpoints/final.rxmo)");
  eval->add_option("--corpus", eval_corpus, "Eval corpus (default: metrics.eval_corpus_path)");
  eval->add_option("--mask", mask, "Router mask: none or local_only")->check(CLI::IsMember({"none", "local_only"}));

  std::string trace_path;
  auto* trace = app.add_subcommand("trace", "LBV and activation statistics from a routing trace");
  add_common(trace, trace_c);
  trace->add_option("--trace", trace_path, "Trace JSONL (default: <out>/trace.jsonl)");

  int64_t first = 0, last = -1, stride = 1;
  auto* sched = app.add_subcommand("schedule-preview", "Candidate pool size per step as CSV");
  add_common(sched, sched_c);
  sched->add_option("--from", first, "First step");
  sched->add_option("--to", last, "Last step (default: train.total_steps)");
  sched->add_option("--stride", stride, "Step stride");

  std::string corpus_out;
  uint64_t corpus_bytes = 1 << 20, corpus_seed = 42;
  auto* gen = app.add_subcommand("gen-corpus", "Write a deterministic English-like byte corpus");
  gen->add_option("--out", corpus_out, "Output file")->required();
  gen->add_option("--bytes", corpus_bytes, "Size in bytes");
  gen->add_option("--seed", corpus_seed, "Generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(train_c, train_corpus, resume, until, progress_every);
    if (*eval) return cmd_eval(eval_c, checkpoint, eval_corpus, mask);
    if (*trace) return cmd_trace(trace_c, trace_path);
    if (*sched) return cmd_schedule(sched_c, first, last, stride);
    if (*gen) {
      check(rexmoe_write_synthetic_corpus(corpus_out.c_str(), corpus_bytes, corpus_seed), "writing corpus");
      return 0;
    }
  } catch (const Failure& f) {
    return f.code;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "rexmoe: %s\n", e.what());
    return 1;
  }
  return 1;
}
