#ifndef HOFILT_H
#define HOFILT_H

/* Generated by cbindgen from hofilt-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the CLI exit codes, plus FFI-specific ones.
 */
typedef enum HofiltStatus {
  HofiltStatus_Ok = 0,
  /**
   * Bad input: model text, formula, dimensions, order.
   */
  HofiltStatus_Config = 2,
  /**
   * Partition mesh not admissible for the requested order.
   */
  HofiltStatus_Mesh = 3,
  /**
   * Numerical diagnostic: overflow or degenerate weights.
   */
  HofiltStatus_Numeric = 4,
  /**
   * A required pointer was null.
   */
  HofiltStatus_NullArgument = 5,
  /**
   * A string argument was not valid UTF-8.
   */
  HofiltStatus_Utf8 = 6,
  /**
   * Internal panic; details in the last-error message.
   */
  HofiltStatus_Panic = 7,
} HofiltStatus;

/**
 * Opaque model handle.
 */
typedef struct HofiltModel HofiltModel;

/**
 * Ensemble estimate record; field meanings match the library's estimator.
 */
typedef struct HofiltEstimate {
  double rho_phi;
  double rho_one;
  double pi_phi;
  double se_rho_phi;
  double se_rho_one;
  double se_pi_phi;
} HofiltEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message for this thread into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null (query mode).
 */
uintptr_t hofilt_last_error(char *buf, uintptr_t len);

/**
 * Parse a model definition (the same JSON document the CLI accepts) into a
 * handle. On success writes the handle through `out`.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum HofiltStatus hofilt_model_from_json(const char *json, struct HofiltModel **out);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be a handle from `hofilt_model_from_json`, not yet freed.
 */
void hofilt_model_free(struct HofiltModel *model);

/**
 * Model dimensions; any output pointer may be null to skip it.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum HofiltStatus hofilt_model_dims(const struct HofiltModel *model,
                                    uintptr_t *d_x,
                                    uintptr_t *d_v,
                                    uintptr_t *d_y);

/**
 * Mesh admissibility threshold for orders >= 2 (infinity when the sensor
 * is flat).
 *
 * # Safety
 * `model` must be a live handle.
 */
double hofilt_model_delta0(const struct HofiltModel *model);

/**
 * Truncation `Gamma_{q,delta}(z)`; `|result| <= delta`.
 */
double hofilt_gamma(double q, double delta, double z);

/**
 * Taming error `Gamma_{q,delta}(z) - z`.
 */
double hofilt_epsilon(double q, double delta, double z);

/**
 * Ensemble estimate on a fresh reference-measure observation path.
 * `order < 0` selects the fine-grid reference weight.
 *
 * # Safety
 * `model` must be a live handle, `phi` a NUL-terminated string, `out` a
 * valid pointer.
 */
enum HofiltStatus hofilt_estimate(const struct HofiltModel *model,
                                  const char *phi,
                                  int32_t order,
                                  uintptr_t n,
                                  uintptr_t paths,
                                  uintptr_t refinement,
                                  double t,
                                  uint64_t x_seed,
                                  uint64_t y_seed,
                                  bool allow_inadmissible,
                                  struct HofiltEstimate *out);

/**
 * Common-random-numbers estimate of `rho(phi) - rho^{tau,m}(phi)` on a
 * fresh reference-measure observation path.
 *
 * # Safety
 * `model` must be a live handle, `phi` a NUL-terminated string; `out_value`
 * and `out_se` must be valid pointers.
 */
enum HofiltStatus hofilt_paired_error(const struct HofiltModel *model,
                                      const char *phi,
                                      uintptr_t order,
                                      uintptr_t n,
                                      uintptr_t paths,
                                      uintptr_t refinement,
                                      double t,
                                      uint64_t x_seed,
                                      uint64_t y_seed,
                                      double *out_value,
                                      double *out_se);

/**
 * Kalman-Bucy oracle for a linear-Gaussian model on a fresh
 * reference-measure observation path. Writes the conditional mean (length
 * `d_x`), covariance (row-major `d_x * d_x`) and log-evidence; any output
 * pointer may be null to skip it.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must have the stated
 * capacities.
 */
enum HofiltStatus hofilt_kalman(const struct HofiltModel *model,
                                uintptr_t n,
                                uintptr_t refinement,
                                double t,
                                uint64_t y_seed,
                                double *out_mean,
                                double *out_covariance,
                                double *out_log_evidence);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HOFILT_H */
