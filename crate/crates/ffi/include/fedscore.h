#ifndef FEDSCORE_H
#define FEDSCORE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum FsStatus {
  FS_STATUS_OK = 0,
  FS_STATUS_NULL_POINTER = 1,
  FS_STATUS_INVALID_UTF8 = 2,
  FS_STATUS_INVALID_CONFIG = 3,
  FS_STATUS_RUNTIME = 4,
  FS_STATUS_OUT_OF_RANGE = 5,
  FS_STATUS_PANIC = 6,
} FsStatus;

typedef enum FsCeMethod {
  FS_CE_METHOD_SV = 0,
  FS_CE_METHOD_GTG = 1,
  FS_CE_METHOD_LOO = 2,
  FS_CE_METHOD_ADP = 3,
} FsCeMethod;

typedef enum FsTail {
  FS_TAIL_GREATER = 0,
  FS_TAIL_LESS = 1,
  FS_TAIL_TWO_SIDED = 2,
} FsTail;

/**
 * Parsed, validated experiment configuration.
 */
typedef struct FsConfig FsConfig;

/**
 * Outcome of [`fs_run_experiment`].
 */
typedef struct FsResult FsResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *fs_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *fs_version(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void fs_string_free(char *s);

/**
 * Parse and validate a TOML configuration. Relative CSV paths are taken
 * relative to the working directory.
 *
 * # Safety
 * `toml` must be a nul-terminated string; `out` must be writable.
 */
enum FsStatus fs_config_from_toml(const char *toml, struct FsConfig **out);

/**
 * # Safety
 * `cfg` must be null or a live handle from [`fs_config_from_toml`].
 */
void fs_config_free(struct FsConfig *cfg);

/**
 * Override the base seed.
 *
 * # Safety
 * `cfg` must be a live config handle.
 */
enum FsStatus fs_config_set_seed(struct FsConfig *cfg, uint64_t seed);

/**
 * Override the repetition count (at least 1).
 *
 * # Safety
 * `cfg` must be a live config handle.
 */
enum FsStatus fs_config_set_repetitions(struct FsConfig *cfg, size_t repetitions);

/**
 * Hex digest identifying the configuration. Free with [`fs_string_free`].
 *
 * # Safety
 * `cfg` must be a live config handle; `out` must be writable.
 */
enum FsStatus fs_config_hash(const struct FsConfig *cfg, char **out);

/**
 * Run every repetition of the experiment.
 *
 * # Safety
 * `cfg` must be a live config handle; `out` must be writable.
 */
enum FsStatus fs_run_experiment(const struct FsConfig *cfg, struct FsResult **out);

/**
 * # Safety
 * `res` must be null or a live handle from [`fs_run_experiment`].
 */
void fs_result_free(struct FsResult *res);

/**
 * Number of runs (repetitions), rounds per run and clients. Any output
 * pointer may be null.
 *
 * # Safety
 * `res` must be a live result handle.
 */
enum FsStatus fs_result_dims(const struct FsResult *res,
                             size_t *runs,
                             size_t *rounds,
                             size_t *clients);

/**
 * Final normalised scores of one run and method, written to `out[0..clients]`.
 *
 * # Safety
 * `res` must be a live result handle; `out` must hold `len` doubles.
 */
enum FsStatus fs_result_final_scores(const struct FsResult *res,
                                     size_t run,
                                     uint32_t method,
                                     double *out,
                                     size_t len);

/**
 * Global validation loss and accuracy after `round` (0-based) of `run`.
 * Either output may be null.
 *
 * # Safety
 * `res` must be a live result handle.
 */
enum FsStatus fs_result_round_metrics(const struct FsResult *res,
                                      size_t run,
                                      size_t round,
                                      double *loss,
                                      double *accuracy);

/**
 * The result as scores.csv text, byte-identical to the `run` command's
 * file. Free with [`fs_string_free`].
 *
 * # Safety
 * `res` must be a live result handle; `out` must be writable.
 */
enum FsStatus fs_result_scores_csv(const struct FsResult *res, char **out);

/**
 * Two-sample Anderson-Darling test. Either output may be null.
 *
 * # Safety
 * `a` and `b` must hold `na` and `nb` doubles.
 */
enum FsStatus fs_anderson_darling(const double *a,
                                  size_t na,
                                  const double *b,
                                  size_t nb,
                                  double *statistic,
                                  double *p_value);

/**
 * One-sample t-test on paired differences. Either output may be null.
 *
 * # Safety
 * `diffs` must hold `n` doubles.
 */
enum FsStatus fs_paired_t_test(const double *diffs,
                               size_t n,
                               uint32_t tail,
                               double *t,
                               double *p_value);

/**
 * Exact Shapley values of a game given as `2^players` coalition values
 * indexed by bitmask. Writes `players` values to `out`.
 *
 * # Safety
 * `values` must hold `2^players` doubles and `out` `players` doubles.
 */
enum FsStatus fs_exact_shapley(const double *values, size_t players, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDSCORE_H */
