#ifndef CETC_H
#define CETC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CetcStatus {
  CETC_STATUS_OK = 0,
  CETC_STATUS_NULL_POINTER = 1,
  CETC_STATUS_INVALID_ARGUMENT = 2,
  CETC_STATUS_SHAPE = 3,
  CETC_STATUS_CONFIG = 4,
  CETC_STATUS_CHECKPOINT = 5,
  CETC_STATUS_IO = 6,
  CETC_STATUS_NON_FINITE = 7,
  CETC_STATUS_DATA = 8,
  CETC_STATUS_BUFFER_TOO_SMALL = 9,
  CETC_STATUS_PANIC = 10,
} CetcStatus;

/**
 * A model architecture together with its parameters.
 */
typedef struct CetcModel CetcModel;

/**
 * Metric values in the order ACC, NPV, PPV, SEN, SPE, FOS as fractions;
 * `defined[i]` is 0 when the metric's denominator is zero (its value is then NaN).
 */
typedef struct CetcMetrics {
  double values[6];
  uint8_t defined[6];
} CetcMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *cetc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cetc_version(void);

/**
 * Create a model from a named preset ("desk", "full", "tiny" or "micro")
 * with parameters initialized from `seed`.
 *
 * # Safety
 * `preset_name` must be a NUL-terminated string; `out` must be writable.
 */
enum CetcStatus cetc_model_new(const char *preset_name, uint64_t seed, struct CetcModel **out);

/**
 * Create a model from a JSON model configuration.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum CetcStatus cetc_model_new_from_json(const char *config_json,
                                         uint64_t seed,
                                         struct CetcModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from `cetc_model_new*` not yet freed.
 */
void cetc_model_free(struct CetcModel *model);

/**
 * Side length of the square input images the model expects; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t cetc_model_image_size(const struct CetcModel *model);

/**
 * Total number of scalar parameters; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t cetc_model_num_params(const struct CetcModel *model);

/**
 * Replace the model's parameters with those stored in a checkpoint file.
 * Every model tensor must be present with a matching shape.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum CetcStatus cetc_model_load_checkpoint(struct CetcModel *model, const char *path);

/**
 * Write the model's parameters to a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum CetcStatus cetc_model_save_checkpoint(const struct CetcModel *model, const char *path);

/**
 * Class logits for a batch of preprocessed images.
 *
 * `input` holds `batch * 3 * S * S` values in (batch, channel, row, column)
 * order, where S is [`cetc_model_image_size`]. `coeffs` points to the three
 * ensemble coefficients (alpha, beta, gamma), which must lie in [0, 1] and sum
 * to 1. `logits_out` receives `batch * 2` values.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum CetcStatus cetc_model_predict(const struct CetcModel *model,
                                   const double *input,
                                   size_t input_len,
                                   size_t batch,
                                   const double *coeffs,
                                   double *logits_out,
                                   size_t logits_len);

/**
 * The six metrics for a confusion matrix.
 *
 * # Safety
 * `out` must be writable.
 */
enum CetcStatus cetc_compute_metrics(uint64_t tp,
                                     uint64_t fp,
                                     uint64_t tn,
                                     uint64_t fn_,
                                     struct CetcMetrics *out);

/**
 * Copy the seven coefficient groups as 21 values (alpha, beta, gamma per group).
 *
 * # Safety
 * `out` must be valid for `len` writes.
 */
enum CetcStatus cetc_coefficient_groups(double *out, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CETC_H */
