#ifndef BWNKT_H
#define BWNKT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BwnktStatus {
  BWNKT_STATUS_OK = 0,
  BWNKT_STATUS_NULL_POINTER = 1,
  BWNKT_STATUS_INVALID_ARGUMENT = 2,
  BWNKT_STATUS_SHAPE = 3,
  BWNKT_STATUS_CONFIG = 4,
  BWNKT_STATUS_IO = 5,
  BWNKT_STATUS_FORMAT = 6,
  BWNKT_STATUS_CHECKSUM = 7,
  BWNKT_STATUS_NON_FINITE = 8,
  BWNKT_STATUS_BUFFER_TOO_SMALL = 9,
  BWNKT_STATUS_PANIC = 10,
} BwnktStatus;

/**
 * Opaque model handle.
 */
typedef struct BwnktModel BwnktModel;

typedef struct BwnktDetection {
  uint32_t class_id;
  double score;
  double cx;
  double cy;
  double w;
  double h;
} BwnktDetection;

typedef struct BwnktSize {
  uint64_t payload_bytes;
  uint64_t fp_payload_bytes;
  uint64_t file_bytes;
  double ratio;
  uint32_t binarized_layers;
} BwnktSize;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *bwnkt_last_error(void);

/**
 * Number of bytes [`bwnkt_binarize_filter`] needs for `n` packed signs.
 */
size_t bwnkt_packed_len(size_t n);

/**
 * Binarizes one filter of `n` weights into its scale and MSB-first sign bits.
 *
 * # Safety
 * `weights` must point to `n` floats and `bits` to `bits_len` writable bytes.
 */
enum BwnktStatus bwnkt_binarize_filter(const float *weights,
                                       size_t n,
                                       float *alpha,
                                       uint8_t *bits,
                                       size_t bits_len);

/**
 * A freshly initialized full-precision detector with the default anchors.
 *
 * # Safety
 * `out` must be a valid pointer; on success it receives a handle owned by the caller.
 */
enum BwnktStatus bwnkt_model_new(uint32_t classes, uint64_t seed, struct BwnktModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum BwnktStatus bwnkt_model_load(const char *path, struct BwnktModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum BwnktStatus bwnkt_model_save(const struct BwnktModel *model, const char *path);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void bwnkt_model_free(struct BwnktModel *model);

/**
 * Applies stage `stage` (0 = M0, 1 = M1, 2 = M2) of the default schedule.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum BwnktStatus bwnkt_model_apply_stage(struct BwnktModel *model, uint32_t stage);

/**
 * Input `(channels, height, width)` and head length per image.
 *
 * # Safety
 * `model` must be a live handle; output pointers must be valid.
 */
enum BwnktStatus bwnkt_model_shape(const struct BwnktModel *model,
                                   uint32_t *channels,
                                   uint32_t *height,
                                   uint32_t *width,
                                   size_t *head_len);

/**
 * Raw head activations for `batch` NCHW images in inference mode.
 *
 * # Safety
 * `input` must hold `batch·c·h·w` floats and `out` `out_len` writable floats.
 */
enum BwnktStatus bwnkt_model_forward(const struct BwnktModel *model,
                                     const float *input,
                                     size_t batch,
                                     float *out,
                                     size_t out_len);

/**
 * Detections after thresholding and per-class NMS for one CHW image.
 * `count` receives the total; at most `capacity` are written, best first.
 *
 * # Safety
 * `image` must hold `c·h·w` floats, `out` `capacity` writable records.
 */
enum BwnktStatus bwnkt_model_detect(const struct BwnktModel *model,
                                    const float *image,
                                    double conf_thresh,
                                    double nms_iou,
                                    struct BwnktDetection *out,
                                    size_t capacity,
                                    size_t *count);

/**
 * Exact byte accounting of the model as it would be saved.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum BwnktStatus bwnkt_model_size(const struct BwnktModel *model, struct BwnktSize *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BWNKT_H */
