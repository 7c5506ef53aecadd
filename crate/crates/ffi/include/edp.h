#ifndef EDP_H
#define EDP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call. Shared kinds use the CLI exit codes.
 */
typedef enum EdpStatus {
  EDP_STATUS_OK = 0,
  /*
   Null pointer, invalid UTF-8 path or buffer of the wrong length.
   */
  EDP_STATUS_INVALID_ARGUMENT = 1,
  EDP_STATUS_IO = 4,
  EDP_STATUS_FORMAT = 5,
  EDP_STATUS_CONTRACT = 6,
  EDP_STATUS_NUMERIC = 7,
  /*
   A Rust panic was caught at the boundary.
   */
  EDP_STATUS_PANIC = 8,
} EdpStatus;

/*
 Averaged-feature ensemble of backbones under a shared head.
 */
typedef struct EdpEnsemble EdpEnsemble;

/*
 A full model or a backbone, with its privacy record when it has one.
 */
typedef struct EdpModel EdpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer stays
 valid until the next call into this library on the same thread.
 */
const char *edp_last_error(void);

/*
 Build the reference CNN for `height`×`width` grayscale images with
 `classes` outputs and Glorot-initialized weights from `seed`.

 # Safety
 `out` must be a valid pointer to writable handle storage.
 */
enum EdpStatus edp_model_reference(size_t height,
                                   size_t width,
                                   size_t classes,
                                   uint64_t seed,
                                   struct EdpModel **out);

/*
 Load a model file (full model or backbone) from `path`.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EdpStatus edp_model_load(const char *path, struct EdpModel **out);

/*
 Decode a model from `len` bytes at `bytes`.

 # Safety
 `bytes` must point to `len` readable bytes; `out` must be writable.
 */
enum EdpStatus edp_model_from_bytes(const uint8_t *bytes, size_t len, struct EdpModel **out);

/*
 Write `model` to `path`.

 # Safety
 `model` must be a live handle and `path` a NUL-terminated string.
 */
enum EdpStatus edp_model_save(const struct EdpModel *model, const char *path);

/*
 Encoded size of `model` in bytes, for sizing a buffer for
 [`edp_model_to_bytes`].

 # Safety
 `model` must be a live handle and `out_len` writable.
 */
enum EdpStatus edp_model_encoded_len(const struct EdpModel *model, size_t *out_len);

/*
 Encode `model` into `buf`, which must hold exactly the encoded length.

 # Safety
 `model` must be a live handle; `buf` must point to `len` writable bytes.
 */
enum EdpStatus edp_model_to_bytes(const struct EdpModel *model, uint8_t *buf, size_t len);

/*
 Number of input values (height × width × channels), or 0 for null.

 # Safety
 `model` must be null or a live handle.
 */
size_t edp_model_input_len(const struct EdpModel *model);

/*
 Number of output values, or 0 for null.

 # Safety
 `model` must be null or a live handle.
 */
size_t edp_model_output_len(const struct EdpModel *model);

/*
 Number of trainable scalars, or 0 for null.

 # Safety
 `model` must be null or a live handle.
 */
size_t edp_model_param_count(const struct EdpModel *model);

/*
 1 if `model` is a backbone (no head), 0 otherwise.

 # Safety
 `model` must be null or a live handle.
 */
int32_t edp_model_is_backbone(const struct EdpModel *model);

/*
 Forward one example. `input` is HWC-ordered with `input_len` values;
 `out` receives exactly `out_len` values.

 # Safety
 `model` must be a live handle; the buffers must hold the given lengths.
 */
enum EdpStatus edp_model_forward(const struct EdpModel *model,
                                 const double *input,
                                 size_t input_len,
                                 double *out,
                                 size_t out_len);

/*
 Release a model handle. Null is ignored.

 # Safety
 `model` must be null or a handle not yet freed.
 */
void edp_model_free(struct EdpModel *model);

/*
 Ensemble `count` backbones under the head of `initial`. `weights` may be
 null for equal weights; otherwise it holds `count` non-negative values
 summing to 1. Handles are copied, so callers keep ownership.

 # Safety
 `initial` must be live; `backbones` must point to `count` live handles;
 `weights` must be null or point to `count` values; `out` must be writable.
 */
enum EdpStatus edp_ensemble_new(const struct EdpModel *initial,
                                const struct EdpModel *const *backbones,
                                size_t count,
                                const double *weights,
                                struct EdpEnsemble **out);

/*
 Number of output values of the ensemble, or 0 for null.

 # Safety
 `ensemble` must be null or a live handle.
 */
size_t edp_ensemble_output_len(const struct EdpEnsemble *ensemble);

/*
 Forward one example through the ensemble.

 # Safety
 `ensemble` must be a live handle; the buffers must hold the given lengths.
 */
enum EdpStatus edp_ensemble_forward(const struct EdpEnsemble *ensemble,
                                    const double *input,
                                    size_t input_len,
                                    double *out,
                                    size_t out_len);

/*
 Release an ensemble handle. Null is ignored.

 # Safety
 `ensemble` must be null or a handle not yet freed.
 */
void edp_ensemble_free(struct EdpEnsemble *ensemble);

/*
 Rényi divergence of one subsampled Gaussian step at order `alpha`.

 # Safety
 `out` must be writable.
 */
enum EdpStatus edp_rdp_step(double alpha,
                            double sampling_rate,
                            double noise_multiplier,
                            double *out);

/*
 (ε, δ) after `steps` subsampled Gaussian steps over the default order
 grid. `order_out` may be null; otherwise it receives the minimizing order.

 # Safety
 `epsilon_out` must be writable; `order_out` must be null or writable.
 */
enum EdpStatus edp_compute_epsilon(double noise_multiplier,
                                   double sampling_rate,
                                   size_t steps,
                                   double delta,
                                   double *epsilon_out,
                                   double *order_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDP_H */
