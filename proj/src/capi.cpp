// SPDX-License-Identifier: Apache-2.0
#include "rexmoe/rexmoe.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <new>
#include <sstream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "trainer.hpp"

struct rexmoe_config {
  rexmoe::RunConfig cfg;
};

struct rexmoe_trainer {
  std::unique_ptr<rexmoe::Trainer> trainer;
};

namespace {

thread_local std::string g_last_error;

rexmoe_status status_of(rexmoe::ErrorKind k) {
  using rexmoe::ErrorKind;
  switch (k) {
    case ErrorKind::Config: return REXMOE_ERR_CONFIG;
    case ErrorKind::Numeric: return REXMOE_ERR_NUMERIC;
    case ErrorKind::Io: return REXMOE_ERR_IO;
    case ErrorKind::Dimension: return REXMOE_ERR_DIMENSION;
    case ErrorKind::Checksum: return REXMOE_ERR_CHECKSUM;
    case ErrorKind::Version: return REXMOE_ERR_VERSION;
    case ErrorKind::Parse: return REXMOE_ERR_PARSE;
    case ErrorKind::Empty: return REXMOE_ERR_EMPTY;
    case ErrorKind::OutOfRange: return REXMOE_ERR_OUT_OF_RANGE;
    case ErrorKind::Internal: break;
  }
  return REXMOE_ERR_INTERNAL;
}

rexmoe_status fail(rexmoe_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

template <typename F>
rexmoe_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return REXMOE_OK;
  } catch (const rexmoe::Error& e) {
    return fail(status_of(e.kind()), e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(REXMOE_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(REXMOE_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(REXMOE_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(REXMOE_ERR_INTERNAL, "unknown exception");
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

#define REXMOE_REQUIRE(cond, what) \
  if (!(cond)) return fail(REXMOE_ERR_INVALID_ARGUMENT, what)

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw rexmoe::IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw rexmoe::IoError("write failed for " + path.string());
}

void write_reports(const rexmoe::RoutingTrace& trace, double tau, const std::filesystem::path& dir,
                   const std::string& prefix) {
  std::filesystem::create_directories(dir);
  std::ostringstream lbv, act;
  rexmoe::write_stats_csv(lbv, rexmoe::compute_all_lbv(trace, tau), tau);
  rexmoe::write_activation_csv(act, trace);
  write_text(dir / (prefix + "lbv.csv"), lbv.str());
  write_text(dir / (prefix + "activation.csv"), act.str());
}

rexmoe_step_report to_c(const rexmoe::StepReport& r) {
  return {r.step, r.loss, r.lr, r.pool_size, r.grad_norm};
}

}  // namespace

extern "C" {

const char* rexmoe_version(void) { return "0.1.0"; }

const char* rexmoe_last_error(void) { return g_last_error.c_str(); }

const char* rexmoe_status_name(rexmoe_status status) {
  switch (status) {
    case REXMOE_OK: return "ok";
    case REXMOE_ERR_INTERNAL: return "internal error";
    case REXMOE_ERR_CONFIG: return "config error";
    case REXMOE_ERR_NUMERIC: return "numeric error";
    case REXMOE_ERR_IO: return "i/o error";
    case REXMOE_ERR_DIMENSION: return "dimension error";
    case REXMOE_ERR_CHECKSUM: return "checksum error";
    case REXMOE_ERR_VERSION: return "version error";
    case REXMOE_ERR_PARSE: return "parse error";
    case REXMOE_ERR_EMPTY: return "empty input";
    case REXMOE_ERR_OUT_OF_RANGE: return "out of range";
    case REXMOE_ERR_INVALID_ARGUMENT: return "invalid argument";
  }
  return "unknown status";
}

int rexmoe_exit_code(rexmoe_status status) {
  switch (status) {
    case REXMOE_OK: return 0;
    case REXMOE_ERR_CONFIG: return 2;
    case REXMOE_ERR_NUMERIC: return 3;
    case REXMOE_ERR_IO:
    case REXMOE_ERR_CHECKSUM:
    case REXMOE_ERR_VERSION:
    case REXMOE_ERR_PARSE: return 4;
    default: return 1;
  }
}

void rexmoe_string_free(char* s) { std::free(s); }

rexmoe_status rexmoe_config_load(const char* path, const char* const* overrides, size_t n_overrides,
                                 rexmoe_config** out) {
  REXMOE_REQUIRE(path && out, "rexmoe_config_load: null argument");
  REXMOE_REQUIRE(overrides || n_overrides == 0, "rexmoe_config_load: null overrides");
  *out = nullptr;
  return guarded([&] {
    std::vector<std::string> ov;
    for (size_t i = 0; i < n_overrides; ++i) {
      if (!overrides[i]) throw rexmoe::ConfigError("null override string");
      ov.emplace_back(overrides[i]);
    }
    auto c = std::make_unique<rexmoe_config>();
    c->cfg = rexmoe::load_run_config(path, ov);
    *out = c.release();
  });
}

rexmoe_status rexmoe_config_parse(const char* json, rexmoe_config** out) {
  REXMOE_REQUIRE(json && out, "rexmoe_config_parse: null argument");
  *out = nullptr;
  return guarded([&] {
    auto c = std::make_unique<rexmoe_config>();
    c->cfg = rexmoe::parse_run_config(json);
    *out = c.release();
  });
}

rexmoe_status rexmoe_config_to_json(const rexmoe_config* cfg, char** out_json) {
  REXMOE_REQUIRE(cfg && out_json, "rexmoe_config_to_json: null argument");
  return guarded([&] { *out_json = dup_string(rexmoe::run_config_to_json(cfg->cfg)); });
}

rexmoe_status rexmoe_config_out_dir(const rexmoe_config* cfg, char** out_dir) {
  REXMOE_REQUIRE(cfg && out_dir, "rexmoe_config_out_dir: null argument");
  return guarded([&] { *out_dir = dup_string(cfg->cfg.out_dir); });
}

rexmoe_status rexmoe_config_total_steps(const rexmoe_config* cfg, int64_t* out) {
  REXMOE_REQUIRE(cfg && out, "rexmoe_config_total_steps: null argument");
  *out = cfg->cfg.train.total_steps;
  return REXMOE_OK;
}

void rexmoe_config_free(rexmoe_config* cfg) { delete cfg; }

rexmoe_status rexmoe_parameter_count(const rexmoe_config* cfg, rexmoe_param_count* out) {
  REXMOE_REQUIRE(cfg && out, "rexmoe_parameter_count: null argument");
  return guarded([&] {
    const auto c = rexmoe::count_parameters(cfg->cfg.model);
    *out = {c.total, c.active_per_token, c.router, c.routed_experts, c.shared_experts,
            c.attention, c.embedding, c.head, c.norms};
  });
}

rexmoe_status rexmoe_schedule_preview(const rexmoe_config* cfg, int64_t first, int64_t last, int64_t stride,
                                      char** out_csv) {
  REXMOE_REQUIRE(cfg && out_csv, "rexmoe_schedule_preview: null argument");
  REXMOE_REQUIRE(first >= 0 && last >= first && stride >= 1,
                 "rexmoe_schedule_preview: need 0 <= first <= last and stride >= 1");
  return guarded([&] {
    std::string csv = "step,pool_size\n";
    for (int64_t t = first; t <= last; t += stride) {
      csv += std::to_string(t) + "," + std::to_string(rexmoe::pool_size_at(cfg->cfg.psr, t)) + "\n";
      if (last - t < stride) break;
    }
    *out_csv = dup_string(csv);
  });
}

rexmoe_status rexmoe_trainer_create(const rexmoe_config* cfg, const char* corpus_path, rexmoe_trainer** out) {
  REXMOE_REQUIRE(cfg && out, "rexmoe_trainer_create: null argument");
  *out = nullptr;
  return guarded([&] {
    const std::string path = corpus_path ? corpus_path : cfg->cfg.train.corpus_path;
    if (path.empty()) throw rexmoe::ConfigError("train.corpus_path is empty");
    auto t = std::make_unique<rexmoe_trainer>();
    t->trainer = std::make_unique<rexmoe::Trainer>(cfg->cfg, rexmoe::Corpus::load(path));
    *out = t.release();
  });
}

rexmoe_status rexmoe_trainer_step(rexmoe_trainer* t, rexmoe_step_report* out) {
  REXMOE_REQUIRE(t && t->trainer, "rexmoe_trainer_step: null trainer");
  return guarded([&] {
    const auto r = t->trainer->step();
    if (out) *out = to_c(r);
  });
}

rexmoe_status rexmoe_trainer_next_step(const rexmoe_trainer* t, int64_t* out) {
  REXMOE_REQUIRE(t && t->trainer && out, "rexmoe_trainer_next_step: null argument");
  *out = t->trainer->next_step();
  return REXMOE_OK;
}

rexmoe_status rexmoe_trainer_run(rexmoe_trainer* t, const char* out_dir, int64_t until_step,
                                 rexmoe_step_callback cb, void* user) {
  REXMOE_REQUIRE(t && t->trainer, "rexmoe_trainer_run: null trainer");
  return guarded([&] {
    rexmoe::TrainRunOptions opt;
    opt.out_dir = out_dir ? out_dir : t->trainer->config().out_dir;
    opt.until_step = until_step;
    if (cb)
      opt.on_step = [cb, user](const rexmoe::StepReport& r) {
        const auto c = to_c(r);
        cb(&c, user);
      };
    rexmoe::run_training(*t->trainer, opt);
  });
}

rexmoe_status rexmoe_trainer_save(const rexmoe_trainer* t, const char* path) {
  REXMOE_REQUIRE(t && t->trainer && path, "rexmoe_trainer_save: null argument");
  return guarded([&] { t->trainer->save_checkpoint(path); });
}

rexmoe_status rexmoe_trainer_load(rexmoe_trainer* t, const char* path) {
  REXMOE_REQUIRE(t && t->trainer && path, "rexmoe_trainer_load: null argument");
  return guarded([&] { t->trainer->load_checkpoint(path); });
}

void rexmoe_trainer_free(rexmoe_trainer* t) { delete t; }

rexmoe_status rexmoe_evaluate(const rexmoe_config* cfg, const char* checkpoint_path, const char* corpus_path,
                              const char* mask_mode, const char* out_dir, rexmoe_eval_report* out) {
  REXMOE_REQUIRE(cfg && checkpoint_path && out, "rexmoe_evaluate: null argument");
  return guarded([&] {
    const auto& rc = cfg->cfg;
    const std::string path = corpus_path ? corpus_path : rc.metrics.eval_corpus_path;
    if (path.empty()) throw rexmoe::ConfigError("metrics.eval_corpus_path is empty");
    const auto mode = rexmoe::mask_mode_from_string(mask_mode ? mask_mode : "none");
    if (mode == rexmoe::MaskMode::Psr) throw rexmoe::ConfigError("eval mask must be none or local_only");
    const auto ck = rexmoe::read_checkpoint(checkpoint_path);
    const auto model = rexmoe::model_from_checkpoint(ck, &rc);
    const auto corpus = rexmoe::Corpus::load(path);
    const auto res = rexmoe::perplexity(*model, corpus.bytes(), rc.train.seq_len, rc.metrics.eval_sequences,
                                        rc.metrics.eval_batch, mode);
    if (out_dir) write_reports(res.trace, rc.metrics.tau, out_dir, "eval_");
    *out = {res.perplexity, res.mean_loss, res.sequences, res.tokens};
  });
}

rexmoe_status rexmoe_analyze_trace(const rexmoe_config* cfg, const char* trace_path, const char* out_dir) {
  REXMOE_REQUIRE(cfg && trace_path && out_dir, "rexmoe_analyze_trace: null argument");
  return guarded([&] {
    auto trace = rexmoe::make_trace(cfg->cfg.model);
    rexmoe::read_trace_file(trace_path, trace);
    write_reports(trace, cfg->cfg.metrics.tau, out_dir, "");
  });
}

rexmoe_status rexmoe_write_synthetic_corpus(const char* path, uint64_t bytes, uint64_t seed) {
  REXMOE_REQUIRE(path, "rexmoe_write_synthetic_corpus: null path");
  REXMOE_REQUIRE(bytes > 0, "rexmoe_write_synthetic_corpus: bytes must be positive");
  return guarded([&] { rexmoe::write_synthetic_corpus(path, static_cast<std::size_t>(bytes), seed); });
}

}  // extern "C"
