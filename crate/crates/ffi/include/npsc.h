#ifndef NPSC_H
#define NPSC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define NPSC_OK 0

#define NPSC_ERR_NULL 1

#define NPSC_ERR_ARGUMENT 2

#define NPSC_ERR_SHAPE 3

#define NPSC_ERR_FORMAT 4

#define NPSC_ERR_IO 5

#define NPSC_ERR_NUMERICAL 6

#define NPSC_ERR_UNDEFINED 7

#define NPSC_ERR_SIZE 8

#define NPSC_ERR_CAPABILITY 9

#define NPSC_ERR_PANIC 10

#define NPSC_CLIP_ABSOLUTE 0

#define NPSC_CLIP_MEAN_ABS 1

#define NPSC_CAM_ACT 0

#define NPSC_CAM_ONOFF 1

#define NPSC_CAM_PATHCOUNT 2

// Opaque loaded model.
typedef struct NpscModel NpscModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *npsc_last_error_message(void);

// Loads a model file. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
int32_t npsc_model_load(const char *path, struct NpscModel **out);

// Parses a model from an in-memory buffer.
//
// # Safety
// `data` must point to `len` readable bytes and `out` must be valid.
int32_t npsc_model_from_bytes(const uint8_t *data, size_t len, struct NpscModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from a load call and not be used afterwards.
void npsc_model_free(struct NpscModel *model);

// Writes the input shape `[channels, height, width]` to `shape_out`.
//
// # Safety
// `model` must be a live handle and `shape_out` must hold 3 elements.
int32_t npsc_model_input_shape(const struct NpscModel *model, size_t *shape_out);

// Number of output classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t npsc_model_num_classes(const struct NpscModel *model);

// Number of layers, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t npsc_model_num_layers(const struct NpscModel *model);

// Number of neurons in the output of `layer`.
//
// # Safety
// `model` must be a live handle and `len_out` valid.
int32_t npsc_model_layer_len(const struct NpscModel *model, size_t layer, size_t *len_out);

// Inference logits for one input laid out as `[C, H, W]`.
//
// # Safety
// Buffers must hold the stated number of elements.
int32_t npsc_forward(const struct NpscModel *model,
                     const float *input,
                     size_t input_len,
                     float *logits_out,
                     size_t logits_len);

// On-Off pattern (1 where the output is strictly positive) of `layer`.
//
// # Safety
// Buffers must hold the stated number of elements.
int32_t npsc_onoff(const struct NpscModel *model,
                   const float *input,
                   size_t input_len,
                   size_t layer,
                   uint8_t *out,
                   size_t out_len);

// Active-path counts for every neuron of `layer`. `exact_out`, if not null,
// receives 0 when some count exceeded 2^53 and is therefore rounded.
//
// # Safety
// Buffers must hold the stated number of elements.
int32_t npsc_pathcount(const struct NpscModel *model,
                       const float *input,
                       size_t input_len,
                       size_t layer,
                       int32_t clip_mode,
                       double clip_threshold,
                       double *counts_out,
                       size_t counts_len,
                       uint8_t *exact_out);

// Kendall tau-b of two length-`n` series. Returns `NPSC_ERR_UNDEFINED`
// when either series is constant.
//
// # Safety
// `x` and `y` must hold `n` elements; `tau_out` must be valid.
int32_t npsc_kendall_tau_b(const double *x, const double *y, size_t n, double *tau_out);

// Max-normalized class activation map at input resolution (`H * W` values).
//
// # Safety
// Buffers must hold the stated number of elements.
int32_t npsc_grad_cam(const struct NpscModel *model,
                      const float *input,
                      size_t input_len,
                      size_t target,
                      int32_t variant,
                      int32_t clip_mode,
                      double clip_threshold,
                      float *map_out,
                      size_t map_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* NPSC_H */
