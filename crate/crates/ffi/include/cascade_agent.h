#ifndef CASCADE_AGENT_H
#define CASCADE_AGENT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum CaStatus {
  CA_STATUS_OK = 0,
  CA_STATUS_NULL_POINTER = 1,
  CA_STATUS_INVALID_UTF8 = 2,
  CA_STATUS_INVALID_ARGUMENT = 3,
  CA_STATUS_CONFIG_ERROR = 4,
  CA_STATUS_TASK_ERROR = 5,
  CA_STATUS_PARSE_FAILURE = 6,
  CA_STATUS_RUN_ERROR = 7,
  CA_STATUS_REPORT_ERROR = 8,
  CA_STATUS_PANIC = 9,
} CaStatus;

// A loaded run configuration.
typedef struct CaConfig CaConfig;

// A loaded task package.
typedef struct CaTask CaTask;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string. Never free it.
const char *ca_version(void);

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *ca_last_error(void);

// Frees a string returned through an `out_json` or `out_cost` argument.
//
// # Safety
// `s` is null or a string returned by this library and not yet freed.
void ca_string_free(char *s);

// Loads a TOML run configuration.
//
// # Safety
// `path` is a NUL-terminated string; `out` is a valid pointer.
enum CaStatus ca_config_load(const char *path, struct CaConfig **out);

// Overrides the action budget.
//
// # Safety
// `config` is a live handle from [`ca_config_load`].
enum CaStatus ca_config_set_max_actions(struct CaConfig *config, size_t max_actions);

// Turns long-term retrieval on or off.
//
// # Safety
// `config` is a live handle from [`ca_config_load`].
enum CaStatus ca_config_set_retrieval(struct CaConfig *config, bool enabled);

// The effective configuration as written to trace headers.
//
// # Safety
// `config` is a live handle; `out_json` is a valid pointer.
enum CaStatus ca_config_to_json(const struct CaConfig *config, char **out_json);

// # Safety
// `config` is null or a handle from [`ca_config_load`] not yet freed.
void ca_config_free(struct CaConfig *config);

// Loads and validates a task package directory.
//
// # Safety
// `dir` is a NUL-terminated string; `out` is a valid pointer.
enum CaStatus ca_task_load(const char *dir, struct CaTask **out);

// # Safety
// `task` is null or a handle from [`ca_task_load`] not yet freed.
void ca_task_free(struct CaTask *task);

// Runs `task` once as run number `run_index` (1-based). The workspace and
// trace go under `out_dir/workspaces` and `out_dir/traces`. The run result
// is written to `out_json`; in-run failures are reported in its `status`.
//
// # Safety
// Handles are live; `out_dir` is a NUL-terminated string; `out_json` is a
// valid pointer.
enum CaStatus ca_run_task(const struct CaTask *task,
                          const struct CaConfig *config,
                          const char *out_dir,
                          size_t run_index,
                          char **out_json);

// Runs `task` `n_runs` times with at most `parallelism` runs at once and
// writes the batch report to `out_json`.
//
// # Safety
// As for [`ca_run_task`].
enum CaStatus ca_run_batch(const struct CaTask *task,
                           const struct CaConfig *config,
                           size_t n_runs,
                           size_t parallelism,
                           const char *out_dir,
                           char **out_json);

// Improvement of `final_score` over `baseline` and whether it exceeds 10%.
// `relative` selects relative (divide by |baseline|) or absolute improvement.
//
// # Safety
// `out_improvement` and `out_success` are valid pointers.
enum CaStatus ca_evaluate_success(double final_score,
                                  double baseline,
                                  bool higher_is_better,
                                  bool relative,
                                  double *out_improvement,
                                  bool *out_success);

// Parses a planner reply. `allowed_json` is a JSON array of action names,
// or null for every planner action. On success `out_json` holds the parsed
// response; on [`CaStatus::ParseFailure`] it holds the classified failure.
//
// # Safety
// `text` is a NUL-terminated string, `allowed_json` is null or one, and
// `out_json` is a valid pointer.
enum CaStatus ca_parse_planner_response(const char *text,
                                        const char *allowed_json,
                                        char **out_json);

// Cost in dollars of one call, from prices quoted in dollars per million
// tokens (decimal strings such as "0.50"). Writes a 6-decimal string.
//
// # Safety
// The price arguments are NUL-terminated strings; `out_cost` is a valid
// pointer.
enum CaStatus ca_cost_of(uint64_t tokens_in,
                         uint64_t tokens_out,
                         const char *input_per_million,
                         const char *output_per_million,
                         char **out_cost);

// Summarizes every trace in `dir` (or `dir/traces`) as a JSON report.
//
// # Safety
// `dir` is a NUL-terminated string; `out_json` is a valid pointer.
enum CaStatus ca_report(const char *dir, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CASCADE_AGENT_H */
