#ifndef ECGI_H
#define ECGI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EcgiStatus {
  ECGI_STATUS_OK = 0,
  ECGI_STATUS_NULL_POINTER = 1,
  ECGI_STATUS_INVALID_ARGUMENT = 2,
  ECGI_STATUS_CONFIG = 3,
  ECGI_STATUS_NUMERIC_FAILURE = 4,
  ECGI_STATUS_CONVERGENCE_FAILURE = 5,
  ECGI_STATUS_UNDEFINED_METRIC = 6,
  ECGI_STATUS_IO = 7,
  ECGI_STATUS_PANIC = 8,
} EcgiStatus;

typedef enum EcgiMethod {
  ECGI_METHOD_PROPOSED = 0,
  ECGI_METHOD_BASELINE = 1,
} EcgiMethod;

// Opaque experiment configuration.
typedef struct EcgiConfig EcgiConfig;

// Opaque result of a scar sweep.
typedef struct EcgiSummary EcgiSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Free with
// `ecgi_string_free`.
char *ecgi_last_error_message(void);

// # Safety
// `s` must be NULL or a string returned by this library, freed once.
void ecgi_string_free(char *s);

// Log density of `n` i.i.d. generalized Gaussian components.
//
// # Safety
// `x` must point to `n` doubles; `out` must be writable.
enum EcgiStatus ecgi_gg_log_density(const double *x, size_t n, double p, double alpha, double *out);

// Log of the Gaussian lower bound with precisions `lambda`.
//
// # Safety
// `x` and `lambda` must each point to `n` doubles; `out` must be writable.
enum EcgiStatus ecgi_bound_log_density(const double *x,
                                       const double *lambda,
                                       size_t n,
                                       double p,
                                       double alpha,
                                       double *out);

// Variational parameter making the bound tight at second moment `x_sq`.
//
// # Safety
// `out` must be writable.
enum EcgiStatus ecgi_optimal_tau(double x_sq, double p, double alpha, double tau_min, double *out);

// # Safety
// `out` must be writable.
enum EcgiStatus ecgi_config_default(struct EcgiConfig **out);

// Parses and validates a JSON experiment config; absent fields take their
// defaults.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum EcgiStatus ecgi_config_from_json(const char *json, struct EcgiConfig **out);

// # Safety
// `cfg` must be a live handle; `out` must be writable. Free the result with
// `ecgi_string_free`.
enum EcgiStatus ecgi_config_to_json(const struct EcgiConfig *cfg, char **out);

// Replaces the scar segments of the sweep.
//
// # Safety
// `cfg` must be a live handle; `segments` must point to `n` values.
enum EcgiStatus ecgi_config_set_segments(struct EcgiConfig *cfg, const size_t *segments, size_t n);

// Sets the master seed, re-deriving every stream.
//
// # Safety
// `cfg` must be a live handle.
enum EcgiStatus ecgi_config_set_seed(struct EcgiConfig *cfg, uint64_t seed);

// Directory for per-trial exports; NULL disables file output.
//
// # Safety
// `cfg` must be a live handle; `dir` NULL or a NUL-terminated string.
enum EcgiStatus ecgi_config_set_output_dir(struct EcgiConfig *cfg, const char *dir);

// # Safety
// `cfg` must be NULL or a handle from this library, freed once.
void ecgi_config_free(struct EcgiConfig *cfg);

// Runs both methods over every configured scar segment. Per-trial failures
// are recorded in the summary, not returned.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum EcgiStatus ecgi_run_sweep(const struct EcgiConfig *cfg, struct EcgiSummary **out);

// Trial counts: completed, skipped and failed.
//
// # Safety
// `summary` must be a live handle; out-pointers may be NULL to skip.
enum EcgiStatus ecgi_summary_counts(const struct EcgiSummary *summary,
                                    size_t *completed,
                                    size_t *skipped,
                                    size_t *failed);

// Mean dice of one method; UNDEFINED_METRIC when no trial completed.
//
// # Safety
// `summary` must be a live handle; `out` must be writable.
enum EcgiStatus ecgi_summary_mean_dice(const struct EcgiSummary *summary,
                                       enum EcgiMethod method,
                                       double *out);

// Welch t statistic and two-sided p of proposed against baseline dice.
//
// # Safety
// `summary` must be a live handle; `t` and `p` must be writable.
enum EcgiStatus ecgi_summary_welch(const struct EcgiSummary *summary, double *t, double *p);

// # Safety
// `summary` must be a live handle; `out` must be writable. Free the result
// with `ecgi_string_free`.
enum EcgiStatus ecgi_summary_to_json(const struct EcgiSummary *summary, char **out);

// # Safety
// `summary` must be NULL or a handle from this library, freed once.
void ecgi_summary_free(struct EcgiSummary *summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECGI_H */
