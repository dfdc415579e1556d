#ifndef UDA_H
#define UDA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  UDA_STATUS_OK = 0,
  UDA_STATUS_NULL_POINTER = 1,
  UDA_STATUS_INVALID_INPUT = 2,
  UDA_STATUS_CONFIG = 3,
  UDA_STATUS_IO = 4,
  UDA_STATUS_CHECKPOINT = 5,
  UDA_STATUS_NUMERIC = 6,
  UDA_STATUS_PANIC = 7,
} uda_status;

typedef enum {
  UDA_UNDEFINED_POLICY_EXCLUDE = 0,
  UDA_UNDEFINED_POLICY_COUNT_AS_ZERO = 1,
} uda_undefined_policy;

/**
 * Opaque confusion-matrix accumulator.
 */
typedef struct uda_confusion uda_confusion;

/**
 * Opaque trained model restored from a checkpoint directory.
 */
typedef struct uda_model uda_model;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes of writes.
 */
size_t uda_last_error_message(char *buf, size_t len);

/**
 * Number of `patch × patch` tiles at `stride` covering a `height × width`
 * raster, remainder dropped.
 *
 * # Safety
 * `out` must be valid for one write.
 */
uda_status uda_crop_count(size_t height, size_t width, size_t patch, size_t stride, size_t *out);

/**
 * # Safety
 * `out` must be valid for one write.
 */
uda_status uda_confusion_new(size_t num_classes, uda_confusion **out);

/**
 * Adds `len` prediction/label pixel pairs.
 *
 * # Safety
 * `handle` must come from [`uda_confusion_new`]; `pred` and `gt` must be
 * valid for `len` reads.
 */
uda_status uda_confusion_accumulate(uda_confusion *handle,
                                    const uint8_t *pred,
                                    const uint8_t *gt,
                                    size_t len);

/**
 * Mean IoU and mean F1 under `policy`. Fails when no class is defined.
 *
 * # Safety
 * `handle` must come from [`uda_confusion_new`]; the outputs must be valid
 * for one write each.
 */
uda_status uda_confusion_scores(const uda_confusion *handle,
                                uda_undefined_policy policy,
                                double *miou,
                                double *mf1);

/**
 * Per-class IoU into `out[0..num_classes]`, NaN where undefined.
 *
 * # Safety
 * `handle` must come from [`uda_confusion_new`]; `out` must be valid for
 * `len` writes.
 */
uda_status uda_confusion_class_iou(const uda_confusion *handle, double *out, size_t len);

/**
 * # Safety
 * `handle` must be null or come from [`uda_confusion_new`], and is invalid
 * afterwards.
 */
void uda_confusion_free(uda_confusion *handle);

/**
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be valid for one
 * write.
 */
uda_status uda_model_load(const char *path, uda_model **out);

/**
 * # Safety
 * `handle` must come from [`uda_model_load`].
 */
size_t uda_model_num_classes(const uda_model *handle);

/**
 * Segments one interleaved 8-bit RGB image of `height × width` pixels into
 * `classes[0..height * width]`.
 *
 * # Safety
 * `handle` must come from [`uda_model_load`]; `rgb` must be valid for
 * `height * width * 3` reads and `classes` for `height * width` writes.
 */
uda_status uda_model_predict(const uda_model *handle,
                             const uint8_t *rgb,
                             size_t height,
                             size_t width,
                             uint8_t *classes);

/**
 * # Safety
 * `handle` must be null or come from [`uda_model_load`], and is invalid
 * afterwards.
 */
void uda_model_free(uda_model *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UDA_H */
