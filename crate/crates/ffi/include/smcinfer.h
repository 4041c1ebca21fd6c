#ifndef SMCINFER_H
#define SMCINFER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. The non-zero engine codes match the command-line exit
// codes.
typedef enum SmcStatus {
  SMC_STATUS_OK = 0,
  // Bad configuration, unsupported request or invalid state.
  SMC_STATUS_CONFIG = 2,
  // Malformed data or I/O failure.
  SMC_STATUS_INGESTION = 3,
  // Numerical degeneracy: zero evidence, singular information, etc.
  SMC_STATUS_NUMERIC = 4,
  // An iterative algorithm did not converge.
  SMC_STATUS_CONVERGENCE = 5,
  // A required pointer argument was null.
  SMC_STATUS_NULL_POINTER = 10,
  // An argument was malformed (bad UTF-8, bad JSON, short buffer).
  SMC_STATUS_INVALID_ARGUMENT = 11,
  // The engine panicked; the handle involved must not be reused.
  SMC_STATUS_PANIC = 12,
} SmcStatus;

// Opaque updater handle.
typedef struct SmcUpdater SmcUpdater;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// The most recent error message on this thread, or null. The pointer stays
// valid until the next call into this library on the same thread.
const char *smc_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *smc_version(void);

// Creates an updater with `n_particles` particles drawn from `prior_json`
// using the default Liu–West resampler. On success `*out` receives the
// handle.
//
// # Safety
// String arguments must be NUL-terminated; `out` must be writable.
enum SmcStatus smc_updater_new(const char *model_json,
                               const char *prior_json,
                               size_t n_particles,
                               uint64_t seed,
                               struct SmcUpdater **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `u` must be null or a handle not yet freed.
void smc_updater_free(struct SmcUpdater *u);

// Incorporates one datum. A missing `n_meas` falls back to the model
// chain's default. On error the updater is unchanged.
//
// # Safety
// `u` must be a live handle; `experiment_json` NUL-terminated.
enum SmcStatus smc_updater_update(struct SmcUpdater *u,
                                  uint64_t outcome,
                                  const char *experiment_json);

// Number of model parameters `d`.
//
// # Safety
// `u` must be a live handle; `out` writable.
enum SmcStatus smc_updater_n_params(const struct SmcUpdater *u, size_t *out);

// Posterior mean into `out[0..d]`.
//
// # Safety
// `u` must be a live handle; `out` valid for `len` writes.
enum SmcStatus smc_updater_est_mean(const struct SmcUpdater *u, double *out, size_t len);

// Posterior covariance, row-major, into `out[0..d*d]`.
//
// # Safety
// `u` must be a live handle; `out` valid for `len` writes.
enum SmcStatus smc_updater_est_covariance(const struct SmcUpdater *u, double *out, size_t len);

// Effective sample size of the current weights.
//
// # Safety
// `u` must be a live handle; `out` writable.
enum SmcStatus smc_updater_ess(const struct SmcUpdater *u, double *out);

// Log model evidence of the data seen so far (0 before any data).
//
// # Safety
// `u` must be a live handle; `out` writable.
enum SmcStatus smc_updater_log_evidence(const struct SmcUpdater *u, double *out);

// Randomized-benchmarking estimate from rows `(counts, m, n_shots)`.
// Writes `(p, A, B)` to `mean_out[0..3]` and the row-major covariance to
// `cov_out[0..9]`.
//
// # Safety
// Column pointers valid for `n_rows` reads; `mean_out` for 3 writes and
// `cov_out` for 9.
enum SmcStatus smc_simple_est_rb(const uint64_t *counts,
                                 const double *ms,
                                 const uint64_t *n_shots,
                                 size_t n_rows,
                                 size_t n_particles,
                                 double p_min,
                                 double p_max,
                                 uint64_t seed,
                                 double *mean_out,
                                 double *cov_out);

// Frequency estimate from rows `(counts, t, n_shots)` with a uniform prior
// on `[omega_min, omega_max]`. Writes the mean and variance of ω.
//
// # Safety
// Column pointers valid for `n_rows` reads; outputs writable.
enum SmcStatus smc_simple_est_prec(const uint64_t *counts,
                                   const double *ts,
                                   const uint64_t *n_shots,
                                   size_t n_rows,
                                   size_t n_particles,
                                   double omega_min,
                                   double omega_max,
                                   uint64_t seed,
                                   double *mean_out,
                                   double *var_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SMCINFER_H */
