#ifndef GOL_FFI_H
#define GOL_FFI_H

/* Generated by cbindgen from the gol-ffi crate sources; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call in this ABI.
 */
typedef enum GolStatus {
  /**
   * Success.
   */
  GOL_STATUS_OK = 0,
  /**
   * A pointer argument was null.
   */
  GOL_STATUS_NULL_POINTER = 1,
  /**
   * An argument failed validation.
   */
  GOL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Input text could not be parsed.
   */
  GOL_STATUS_PARSE = 3,
  /**
   * Training diverged or produced non-finite numbers.
   */
  GOL_STATUS_NUMERIC = 4,
  /**
   * An internal invariant was violated.
   */
  GOL_STATUS_INTERNAL = 5,
} GolStatus;

/**
 * A trained model together with its run report.
 */
typedef struct GolModel GolModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Number of bytes, excluding the trailing NUL, needed for the last error
 * message of the calling thread.
 */
size_t gol_last_error_length(void);

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string. `len` is the capacity of `buf` in bytes; the
 * message is truncated if it does not fit.
 */
enum GolStatus gol_last_error_message(char *buf, size_t len);

/**
 * Gumbel CDF `exp(-exp(-q / sigma))` at one point.
 */
enum GolStatus gol_gumbel_cdf(double q, double sigma, double *out);

/**
 * Classifier bias giving a zero initial total gradient for `class_count`
 * one-vs-all Gumbel heads.
 */
enum GolStatus gol_solve_bias(size_t class_count, double *out);

/**
 * Total gradient over one balanced pass at a uniform bias; zero at the
 * bias returned by `gol_solve_bias`.
 */
enum GolStatus gol_initial_total_gradient(size_t class_count, double bias, double *out);

/**
 * Gumbel cross-entropy over `len` classes. `targets[i]` is 0 or 1. Writes
 * the total loss to `out_total` and, when `out_grad` is non-null, the
 * per-class gradient d(total)/d(scores[i]) into `out_grad[0..len]`.
 */
enum GolStatus gol_gumbel_loss(const double *scores,
                               const uint8_t *targets,
                               size_t len,
                               double sigma,
                               double *out_total,
                               double *out_grad);

/**
 * Trains a model from the same JSON configuration the `gol train`
 * subcommand accepts and returns an owned handle through `out`. The handle
 * must be released with `gol_model_free`.
 */
enum GolStatus gol_train_json(const char *config_json, struct GolModel **out);

/**
 * Number of input features the model expects.
 */
enum GolStatus gol_model_feature_dim(const struct GolModel *model, size_t *out);

/**
 * Number of classes the model scores.
 */
enum GolStatus gol_model_class_count(const struct GolModel *model, size_t *out);

/**
 * Predicted class index for one feature vector of length
 * `gol_model_feature_dim`.
 */
enum GolStatus gol_model_predict(const struct GolModel *model,
                                 const double *features,
                                 size_t len,
                                 size_t *out_class);

/**
 * Serializes the handle's run report as JSON. The string must be released
 * with `gol_string_free`.
 */
enum GolStatus gol_model_report_json(const struct GolModel *model, char **out);

/**
 * Releases a handle returned by `gol_train_json`. Null is a no-op.
 */
void gol_model_free(struct GolModel *model);

/**
 * Releases a string returned by `gol_model_report_json`. Null is a no-op.
 */
void gol_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GOL_FFI_H */
