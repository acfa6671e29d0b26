#ifndef IVQR_H
#define IVQR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IvqrStatus {
  IVQR_STATUS_OK = 0,
  /**
   * Estimation failed: singular design, no convergence, bad domain.
   */
  IVQR_STATUS_NUMERICAL = 1,
  /**
   * Invalid argument, shape mismatch or unparsable input.
   */
  IVQR_STATUS_USAGE = 2,
  /**
   * File or network failure.
   */
  IVQR_STATUS_IO = 3,
  IVQR_STATUS_NULL_POINTER = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  IVQR_STATUS_INTERNAL = 5,
} IvqrStatus;

typedef enum IvqrWeighting {
  IVQR_WEIGHTING_IDENTITY = 0,
  IVQR_WEIGHTING_INVERSE_GAMMA_COV = 1,
} IvqrWeighting;

typedef enum IvqrCovariance {
  IVQR_COVARIANCE_HC0 = 0,
  IVQR_COVARIANCE_HC1 = 1,
  IVQR_COVARIANCE_CLASSICAL = 2,
} IvqrCovariance;

/**
 * Opaque dataset handle.
 */
typedef struct IvqrDataset IvqrDataset;

/**
 * Opaque first-stage handle.
 */
typedef struct IvqrFirstStage IvqrFirstStage;

/**
 * Opaque IVQR fit handle.
 */
typedef struct IvqrFitHandle IvqrFitHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ivqr_last_error_message(void);

/**
 * Builds a dataset from column-major arrays: `y` and `d` of length `n`,
 * `x` of `n * k` and `z` of `n * p` values. `x` may be NULL when `k == 0`.
 *
 * # Safety
 * Every non-null pointer must reference the stated number of readable
 * doubles; `out` must be writable.
 */
enum IvqrStatus ivqr_dataset_new(size_t n,
                                 const double *y,
                                 const double *d,
                                 const double *x,
                                 size_t k,
                                 const double *z,
                                 size_t p,
                                 bool add_intercept,
                                 struct IvqrDataset **out);

/**
 * Reads a headed CSV under a role mapping file.
 *
 * # Safety
 * `data_path` and `map_path` must be NUL-terminated strings; `out` must be
 * writable.
 */
enum IvqrStatus ivqr_dataset_load_csv(const char *data_path,
                                      const char *map_path,
                                      struct IvqrDataset **out);

/**
 * Number of observations, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t ivqr_dataset_n(const struct IvqrDataset *ds);

/**
 * Number of exogenous regressors including any intercept.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t ivqr_dataset_k(const struct IvqrDataset *ds);

/**
 * Number of instruments.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t ivqr_dataset_p(const struct IvqrDataset *ds);

/**
 * # Safety
 * `ds` must be NULL or a handle not yet freed.
 */
void ivqr_dataset_free(struct IvqrDataset *ds);

/**
 * IVQR grid search over `lo, lo + step, ..., hi`.
 *
 * # Safety
 * `ds` must be a live dataset handle and `out` writable.
 */
enum IvqrStatus ivqr_fit(const struct IvqrDataset *ds,
                         double tau,
                         double lo,
                         double step,
                         double hi,
                         enum IvqrWeighting weighting,
                         struct IvqrFitHandle **out);

/**
 * Estimated coefficient on the endogenous variable; NaN for NULL.
 *
 * # Safety
 * `fit` must be NULL or a live fit handle.
 */
double ivqr_fit_alpha(const struct IvqrFitHandle *fit);

/**
 * Number of grid points, the length needed by [`ivqr_fit_objective`].
 *
 * # Safety
 * `fit` must be NULL or a live fit handle.
 */
size_t ivqr_fit_grid_len(const struct IvqrFitHandle *fit);

/**
 * Number of warnings raised by the fit (flat curve, boundary minimum,
 * discontinuity).
 *
 * # Safety
 * `fit` must be NULL or a live fit handle.
 */
size_t ivqr_fit_warning_count(const struct IvqrFitHandle *fit);

/**
 * Copies the grid and the objective value at each point.
 *
 * # Safety
 * `fit` must be a live fit handle; `alphas` and `values` must each hold
 * `len` writable doubles.
 */
enum IvqrStatus ivqr_fit_objective(const struct IvqrFitHandle *fit,
                                   double *alphas,
                                   double *values,
                                   size_t len);

/**
 * Copies `theta = (alpha, beta, gamma)`, of length `1 + k + p`.
 *
 * # Safety
 * `fit` must be a live fit handle; `out` must hold `len` writable doubles.
 */
enum IvqrStatus ivqr_fit_theta(const struct IvqrFitHandle *fit, double *out, size_t len);

/**
 * # Safety
 * `fit` must be NULL or a handle not yet freed.
 */
void ivqr_fit_free(struct IvqrFitHandle *fit);

/**
 * Sparsity density weights at `tau`, `n` values written to `out`.
 *
 * # Safety
 * `ds` must be a live dataset handle; `out` must hold `len` writable doubles.
 */
enum IvqrStatus ivqr_sparsity_weights(const struct IvqrDataset *ds,
                                      double tau,
                                      double lo,
                                      double step,
                                      double hi,
                                      enum IvqrWeighting weighting,
                                      double *out,
                                      size_t len);

/**
 * Weighted first stage. `weights` may be NULL for unit weights (the 2SLS
 * first stage); otherwise it holds `n` nonnegative values.
 *
 * # Safety
 * `ds` must be a live dataset handle, `weights` NULL or `n` readable
 * doubles, and `out` writable.
 */
enum IvqrStatus ivqr_first_stage(const struct IvqrDataset *ds,
                                 const double *weights,
                                 enum IvqrCovariance covariance,
                                 struct IvqrFirstStage **out);

/**
 * Number of first-stage coefficients, `k + p`.
 *
 * # Safety
 * `fs` must be NULL or a live first-stage handle.
 */
size_t ivqr_first_stage_len(const struct IvqrFirstStage *fs);

/**
 * Copies `(psi, delta)`: exogenous coefficients, then instruments.
 *
 * # Safety
 * `fs` must be a live first-stage handle; `out` must hold `len` writable
 * doubles.
 */
enum IvqrStatus ivqr_first_stage_coefficients(const struct IvqrFirstStage *fs,
                                              double *out,
                                              size_t len);

/**
 * Copies the standard errors, aligned with the coefficients.
 *
 * # Safety
 * As [`ivqr_first_stage_coefficients`].
 */
enum IvqrStatus ivqr_first_stage_std_errors(const struct IvqrFirstStage *fs,
                                            double *out,
                                            size_t len);

/**
 * Wald test that the instrument coefficients at positions `tested`
 * (0-based, among the `p` instruments) are zero. At least one instrument
 * must stay untested.
 *
 * # Safety
 * `fs` must be a live first-stage handle, `tested` must hold `m` readable
 * indices, and `statistic` and `p_value` must be writable.
 */
enum IvqrStatus ivqr_wald_test(const struct IvqrFirstStage *fs,
                               const size_t *tested,
                               size_t m,
                               double *statistic,
                               double *p_value);

/**
 * # Safety
 * `fs` must be NULL or a handle not yet freed.
 */
void ivqr_first_stage_free(struct IvqrFirstStage *fs);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IVQR_H */
