#ifndef LOOKAHEAD_KV_H
#define LOOKAHEAD_KV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LkvStatus {
  LKV_STATUS_OK = 0,
  LKV_STATUS_NULL_ARGUMENT = 1,
  LKV_STATUS_INVALID_UTF8 = 2,
  /*
   The JSON document did not parse or did not match the schema.
   */
  LKV_STATUS_PARSE = 3,
  /*
   The input parsed but was rejected.
   */
  LKV_STATUS_INVALID = 4,
  /*
   A run or sweep failed part way.
   */
  LKV_STATUS_FAILED = 5,
  /*
   A Rust panic was caught at the boundary.
   */
  LKV_STATUS_PANIC = 6,
} LkvStatus;

/*
 A validated simulation config.
 */
typedef struct LkvConfig LkvConfig;

/*
 The result of one simulation run.
 */
typedef struct LkvRun LkvRun;

typedef struct LkvMetrics {
  double token_hit_rate;
  double avg_workflow_latency;
  double avg_ttft;
  uint64_t prompt_tokens;
  uint64_t device_hit_tokens;
  uint64_t host_hit_tokens;
  uint64_t miss_tokens;
  uint64_t invocations;
  uint64_t workflows;
  uint64_t steps;
  uint64_t evictions;
  uint64_t prefetched_tokens;
  uint64_t shortfalls;
} LkvMetrics;

typedef struct LkvTheoryOptions {
  uint64_t seed;
  size_t emc_instances;
  size_t emc_trajectories;
  size_t lipschitz_instances;
  size_t ranking_pairs;
  size_t regret_instances;
} LkvTheoryOptions;

typedef struct LkvTheorySummary {
  double max_emc_z;
  size_t emc_outside_3_sigma;
  double max_lipschitz_ratio;
  size_t lipschitz_violations;
  size_t ranking_premise_met;
  size_t ranking_violations;
  size_t regret_violations;
  size_t regret_enumeration_mismatches;
  size_t regret_nonzero_under_perfect_prediction;
  /*
   Bound violations, not counting sampling misses.
   */
  size_t violations;
} LkvTheorySummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null if the last
 call succeeded. Valid until the next call on the same thread.
 */
const char *lkv_last_error(void);

/*
 Library version as a static string.
 */
const char *lkv_version(void);

/*
 Parses and validates a simulation config given as JSON.

 # Safety
 `json` must be a nul-terminated string and `out` a valid pointer.
 */
enum LkvStatus lkv_config_from_json(const char *json, struct LkvConfig **out);

/*
 # Safety
 `config` must come from [`lkv_config_from_json`] and not be freed yet.
 */
enum LkvStatus lkv_config_set_seed(struct LkvConfig *config, uint64_t seed);

/*
 Sets device and host capacity in tokens.

 # Safety
 `config` must come from [`lkv_config_from_json`] and not be freed yet.
 */
enum LkvStatus lkv_config_set_capacity(struct LkvConfig *config, size_t device, size_t host);

/*
 Peak working set of the config's workload, in tokens.

 # Safety
 `config` must be a live handle and `out` a valid pointer.
 */
enum LkvStatus lkv_peak_working_set(const struct LkvConfig *config, size_t *out);

/*
 # Safety
 `config` must come from [`lkv_config_from_json`]; null is ignored.
 */
void lkv_config_free(struct LkvConfig *config);

/*
 Runs one simulation.

 # Safety
 `config` must be a live handle and `out` a valid pointer.
 */
enum LkvStatus lkv_run(const struct LkvConfig *config, struct LkvRun **out);

/*
 # Safety
 `run` must be a live handle and `out` a valid pointer.
 */
enum LkvStatus lkv_run_metrics(const struct LkvRun *run, struct LkvMetrics *out);

/*
 Full metrics as JSON, owned by the run handle.

 # Safety
 `run` must be a live handle and `out` a valid pointer. The string is
 freed with the handle.
 */
enum LkvStatus lkv_run_metrics_json(const struct LkvRun *run, const char **out);

/*
 # Safety
 `run` must come from [`lkv_run`]; null is ignored.
 */
void lkv_run_free(struct LkvRun *run);

/*
 Lookahead score of one cache node.

 `forecasts` holds `workflows * horizon * (num_agents + 1)` probabilities:
 per workflow, per step, one entry per agent then END. `masks[w]` has bit
 `a` set if agent `a` of workflow `w` reads the node.

 # Safety
 The arrays must hold the lengths described above.
 */
enum LkvStatus lkv_score(size_t num_agents,
                         size_t horizon,
                         double gamma,
                         size_t workflows,
                         const double *forecasts,
                         const uint64_t *masks,
                         double *out);

/*
 Default sweep sizes.
 */
struct LkvTheoryOptions lkv_theory_default_options(void);

/*
 Runs the bound checks. A clean run still returns `Ok` when bounds are
 violated; check `violations` in the summary.

 # Safety
 `options` and `out` must be valid pointers.
 */
enum LkvStatus lkv_theory_run(const struct LkvTheoryOptions *options, struct LkvTheorySummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOOKAHEAD_KV_H */
