/* SPDX-License-Identifier: Apache-2.0 */
#ifndef REXMOE_REXMOE_H
#define REXMOE_REXMOE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(REXMOE_BUILDING_LIBRARY)
#    define REXMOE_API __declspec(dllexport)
#  else
#    define REXMOE_API __declspec(dllimport)
#  endif
#else
#  define REXMOE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum rexmoe_status {
  REXMOE_OK = 0,
  REXMOE_ERR_INTERNAL = 1,
  REXMOE_ERR_CONFIG = 2,
  REXMOE_ERR_NUMERIC = 3,
  REXMOE_ERR_IO = 4,
  REXMOE_ERR_DIMENSION = 5,
  REXMOE_ERR_CHECKSUM = 6,
  REXMOE_ERR_VERSION = 7,
  REXMOE_ERR_PARSE = 8,
  REXMOE_ERR_EMPTY = 9,
  REXMOE_ERR_OUT_OF_RANGE = 10,
  REXMOE_ERR_INVALID_ARGUMENT = 11
} rexmoe_status;

REXMOE_API const char* rexmoe_version(void);

/* Message for the most recent failure on the calling thread ("" if none). */
REXMOE_API const char* rexmoe_last_error(void);
REXMOE_API const char* rexmoe_status_name(rexmoe_status status);
/* Process exit code for a status: 0 ok, 2 config, 3 numeric, 4 I/O
   (including checksum, version and parse failures), 1 otherwise. */
REXMOE_API int rexmoe_exit_code(rexmoe_status status);

/* Strings returned through char** are owned by the caller. */
REXMOE_API void rexmoe_string_free(char* s);

typedef struct rexmoe_config rexmoe_config;

/* overrides: n_overrides strings of the form "dotted.path=value". */
REXMOE_API rexmoe_status rexmoe_config_load(const char* path, const char* const* overrides,
                                            size_t n_overrides, rexmoe_config** out);
REXMOE_API rexmoe_status rexmoe_config_parse(const char* json, rexmoe_config** out);
REXMOE_API rexmoe_status rexmoe_config_to_json(const rexmoe_config* cfg, char** out_json);
REXMOE_API rexmoe_status rexmoe_config_out_dir(const rexmoe_config* cfg, char** out_dir);
REXMOE_API rexmoe_status rexmoe_config_total_steps(const rexmoe_config* cfg, int64_t* out);
REXMOE_API void rexmoe_config_free(rexmoe_config* cfg);

typedef struct rexmoe_param_count {
  int64_t total;
  int64_t active_per_token;
  int64_t router;
  int64_t routed_experts;
  int64_t shared_experts;
  int64_t attention;
  int64_t embedding;
  int64_t head;
  int64_t norms;
} rexmoe_param_count;

REXMOE_API rexmoe_status rexmoe_parameter_count(const rexmoe_config* cfg, rexmoe_param_count* out);

/* CSV "step,pool_size" for steps first, first + stride, ... <= last. */
REXMOE_API rexmoe_status rexmoe_schedule_preview(const rexmoe_config* cfg, int64_t first, int64_t last,
                                                 int64_t stride, char** out_csv);

typedef struct rexmoe_trainer rexmoe_trainer;

typedef struct rexmoe_step_report {
  int64_t step;
  double loss;
  double lr;
  int64_t pool_size;
  double grad_norm;
} rexmoe_step_report;

typedef void (*rexmoe_step_callback)(const rexmoe_step_report* report, void* user);

/* corpus_path may be NULL to use train.corpus_path from the config. */
REXMOE_API rexmoe_status rexmoe_trainer_create(const rexmoe_config* cfg, const char* corpus_path,
                                               rexmoe_trainer** out);
REXMOE_API rexmoe_status rexmoe_trainer_step(rexmoe_trainer* t, rexmoe_step_report* out);
REXMOE_API rexmoe_status rexmoe_trainer_next_step(const rexmoe_trainer* t, int64_t* out);
/* Trains until `until_step` (-1: total_steps), writing metrics.csv,
   trace.jsonl and checkpoints under out_dir (NULL: the config's out_dir). */
REXMOE_API rexmoe_status rexmoe_trainer_run(rexmoe_trainer* t, const char* out_dir, int64_t until_step,
                                            rexmoe_step_callback cb, void* user);
REXMOE_API rexmoe_status rexmoe_trainer_save(const rexmoe_trainer* t, const char* path);
/* On failure the trainer is left unchanged. */
REXMOE_API rexmoe_status rexmoe_trainer_load(rexmoe_trainer* t, const char* path);
REXMOE_API void rexmoe_trainer_free(rexmoe_trainer* t);

typedef struct rexmoe_eval_report {
  double perplexity;
  double mean_loss;
  int64_t sequences;
  int64_t tokens;
} rexmoe_eval_report;

/* Perplexity of a checkpoint on a byte corpus. mask_mode is "none" or
   "local_only". When out_dir is non-NULL, eval_lbv.csv and
   eval_activation.csv are written there from the evaluation routing. */
REXMOE_API rexmoe_status rexmoe_evaluate(const rexmoe_config* cfg, const char* checkpoint_path,
                                         const char* corpus_path, const char* mask_mode,
                                         const char* out_dir, rexmoe_eval_report* out);

/* Reads a trace JSONL laid out for cfg and writes lbv.csv and
   activation.csv into out_dir. */
REXMOE_API rexmoe_status rexmoe_analyze_trace(const rexmoe_config* cfg, const char* trace_path,
                                              const char* out_dir);

REXMOE_API rexmoe_status rexmoe_write_synthetic_corpus(const char* path, uint64_t bytes, uint64_t seed);

#ifdef __cplusplus
}
#endif

#endif
