#ifndef IBROLAB_H
#define IBROLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum IbroStatus {
  IBRO_STATUS_OK = 0,
  IBRO_STATUS_NULL_POINTER = 1,
  IBRO_STATUS_INVALID_ARGUMENT = 2,
  IBRO_STATUS_IO = 3,
  IBRO_STATUS_CONFIG = 4,
  IBRO_STATUS_NON_FINITE = 5,
  IBRO_STATUS_FINISHED = 6,
  IBRO_STATUS_INTERNAL = 7,
  IBRO_STATUS_PANIC = 8,
} IbroStatus;

/**
 * Opaque policy loaded from a checkpoint.
 */
typedef struct IbroPolicy IbroPolicy;

/**
 * Opaque training session.
 */
typedef struct IbroTrainer IbroTrainer;

/**
 * Scalars logged for one training step.
 */
typedef struct IbroStepMetrics {
  size_t step;
  double mean_token_entropy;
  double mean_response_length;
  double train_reward_mean;
  /**
   * Set only when `has_eval` is nonzero.
   */
  double eval_avg_at_k;
  int32_t has_eval;
  double pg_loss;
  double entropy_reg_value;
  double value_loss;
  double clip_fraction;
  double param_l2_from_init;
  size_t groups_dropped;
  int32_t done;
} IbroStepMetrics;

typedef struct IbroRunSummary {
  size_t steps;
  double initial_avg_at_k;
  double final_avg_at_k;
  double best_avg_at_k;
  double final_entropy;
  double final_response_length;
  size_t num_evals;
} IbroRunSummary;

/**
 * Exact entropies (nats) and bound terms for a policy on an enumerable
 * environment.
 */
typedef struct IbroOracleReport {
  double beta;
  double h_r;
  double h_r_given_q;
  double h_r_given_a;
  double h_r_given_qa;
  double h_q_given_a;
  double i_q_r;
  double i_r_a;
  double ibro_value;
  double surrogate_value;
  double bound_residual;
  double chain_rule_gap_q;
  double chain_rule_gap_qa;
} IbroOracleReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *ibro_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ibro_version(void);

/**
 * Creates a trainer from TOML config text. `run_dir` may be null for an
 * in-memory run; otherwise artifacts are written there.
 *
 * # Safety
 * `config_toml` and a non-null `run_dir` must be NUL-terminated strings;
 * `out_trainer` must be writable.
 */
enum IbroStatus ibro_trainer_new(const char *config_toml,
                                 const char *run_dir,
                                 struct IbroTrainer **out_trainer);

/**
 * Runs one optimizer step. Returns `IBRO_STATUS_FINISHED` once the
 * configured step budget or stop target has been reached.
 *
 * # Safety
 * `trainer` must come from [`ibro_trainer_new`]; `out_metrics` may be null.
 */
enum IbroStatus ibro_trainer_step(struct IbroTrainer *trainer, struct IbroStepMetrics *out_metrics);

/**
 * Writes 1 to `out_done` when no further steps will run.
 *
 * # Safety
 * `trainer` must come from [`ibro_trainer_new`].
 */
enum IbroStatus ibro_trainer_is_done(const struct IbroTrainer *trainer, int32_t *out_done);

/**
 * Final evaluation, final checkpoint and summary. The handle stays valid
 * but accepts no more steps.
 *
 * # Safety
 * `trainer` must come from [`ibro_trainer_new`]; `out_summary` may be null.
 */
enum IbroStatus ibro_trainer_finish(struct IbroTrainer *trainer,
                                    struct IbroRunSummary *out_summary);

/**
 * # Safety
 * `trainer` must be null or come from [`ibro_trainer_new`], and must not be
 * used afterwards.
 */
void ibro_trainer_free(struct IbroTrainer *trainer);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_policy` must be writable.
 */
enum IbroStatus ibro_policy_load(const char *path, struct IbroPolicy **out_policy);

/**
 * Number of scalar parameters in the policy.
 *
 * # Safety
 * `policy` must come from [`ibro_policy_load`].
 */
enum IbroStatus ibro_policy_num_params(const struct IbroPolicy *policy, size_t *out_count);

/**
 * avg@k on the evaluation set and sampler described by `config_toml`,
 * with the same seeds the trainer uses.
 *
 * # Safety
 * `policy` must come from [`ibro_policy_load`]; `config_toml` must be a
 * NUL-terminated string; `out_avg` must be writable.
 */
enum IbroStatus ibro_policy_eval(const struct IbroPolicy *policy,
                                 const char *config_toml,
                                 double *out_avg);

/**
 * # Safety
 * `policy` must be null or come from [`ibro_policy_load`], and must not be
 * used afterwards.
 */
void ibro_policy_free(struct IbroPolicy *policy);

/**
 * Exact report for a policy on the enumerable environment in `env_toml`.
 * A null `checkpoint` selects the environment's seeded random policy.
 *
 * # Safety
 * `env_toml` and a non-null `checkpoint` must be NUL-terminated strings;
 * `out_report` must be writable.
 */
enum IbroStatus ibro_oracle_report(const char *env_toml,
                                   const char *checkpoint,
                                   double beta,
                                   struct IbroOracleReport *out_report);

/**
 * Group-normalized advantages with the population standard deviation.
 * `out_advantages` must hold `n` values. `out_zero_variance` may be null.
 *
 * # Safety
 * `rewards` must point to `n` readable values and `out_advantages` to `n`
 * writable ones.
 */
enum IbroStatus ibro_group_advantages(const double *rewards,
                                      size_t n,
                                      double *out_advantages,
                                      int32_t *out_zero_variance);

/**
 * Runs the 64-bit finite-difference suite and writes the worst relative
 * error and the number of checks.
 *
 * # Safety
 * The output pointers must be writable.
 */
enum IbroStatus ibro_gradcheck(uint64_t seed, double *out_max_relative_error, size_t *out_checks);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IBROLAB_H */
