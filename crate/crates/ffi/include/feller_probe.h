#ifndef FELLER_PROBE_H
#define FELLER_PROBE_H

/* Generated by cbindgen from the Rust sources; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every function in this interface.
 */
typedef enum FpStatus {
  /**
   * The operation succeeded and the answer is affirmative.
   */
  FP_STATUS_OK = 0,
  /**
   * The operation succeeded and the answer is negative (a condition
   * fails, a witness was not found); a result document is still
   * produced.
   */
  FP_STATUS_NEGATIVE = 1,
  /**
   * Malformed input: unreadable JSON, invalid dimensions, null
   * pointers, out-of-range parameters.
   */
  FP_STATUS_INVALID_INPUT = 2,
  /**
   * The model is not in the class the operation requires.
   */
  FP_STATUS_CLASS_MISMATCH = 3,
  /**
   * A numerical failure: search exhaustion, internal inconsistency,
   * or an exploding simulation.
   */
  FP_STATUS_NUMERICAL = 4,
} FpStatus;

/**
 * Opaque handle to a validated model.
 */
typedef struct FpModel FpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on the calling thread, as
 * a NUL-terminated UTF-8 string. The pointer stays valid until the next
 * call into this library from the same thread; do not free it. Returns
 * an empty string when no failure has been recorded.
 */
const char *fp_last_error(void);

/**
 * Version of the library, as a static NUL-terminated string; do not
 * free it.
 */
const char *fp_version(void);

/**
 * Releases a string allocated by this library. Passing null is a no-op.
 */
void fp_string_free(char *s);

/**
 * Releases a model handle. Passing null is a no-op.
 */
void fp_model_free(struct FpModel *model);

/**
 * Parses and validates a model from JSON. On success writes a handle to
 * `out_model`; release it with [`fp_model_free`].
 */
enum FpStatus fp_model_parse(const char *json, struct FpModel **out_model);

/**
 * Checks the structural non-negativity conditions on a canonical model.
 * `Ok` when all conditions hold, `Negative` when at least one fails; the
 * report lists each condition with its signed margin.
 */
enum FpStatus fp_check_feller(const struct FpModel *model, char **out_json);

/**
 * Brings a model with proportional volatility factors to canonical form.
 * When `drop_b1` is non-zero the first intercept is also eliminated by
 * the additional coordinate shift (2-dimensional models only).
 */
enum FpStatus fp_canonicalize(const struct FpModel *model, int32_t drop_b1, char **out_json);

/**
 * Evaluates the expectation flow `x' = a x + b` at time `t`, writing
 * `{"t": ..., "mean": [...]}`.
 */
enum FpStatus fp_expectation(const struct FpModel *model, double t, char **out_json);

/**
 * Constructs a drift tilt under which the expected volatility factor is
 * negative at `t0`, certifying that the untilted process leaves the
 * non-negative range with positive probability.
 */
enum FpStatus fp_certify(const struct FpModel *model, double t0, char **out_json);

/**
 * Computes the exponential-moment constants for scale `c` and the step
 * schedule covering `[0, horizon]`.
 */
enum FpStatus fp_novikov_schedule(const struct FpModel *model,
                                  double c,
                                  double horizon,
                                  char **out_json);

/**
 * Searches for a positive vector witnessing the drift-block feasibility
 * inequality on the leading `m_factors x m_factors` block; pass zero to
 * use the model's own factor count. `Ok` with a verified witness,
 * `Negative` when the search found none.
 */
enum FpStatus fp_check_addreq(const struct FpModel *model, size_t m_factors, char **out_json);

/**
 * Runs the Euler scheme with the exponential density along each path.
 * `lambda` points to `lambda_len` tilt entries (null with length zero
 * for the untilted chain); `stopped` freezes each path's density at its
 * first factor crossing. Statistics are reported at the quarter points
 * of the horizon and are independent of the worker count.
 */
enum FpStatus fp_simulate(const struct FpModel *model,
                          double horizon,
                          double dt,
                          uint64_t n_paths,
                          uint64_t seed,
                          const double *lambda,
                          size_t lambda_len,
                          int32_t stopped,
                          char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FELLER_PROBE_H */
