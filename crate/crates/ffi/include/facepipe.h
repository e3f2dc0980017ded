#ifndef FACEPIPE_H
#define FACEPIPE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum FpStatus {
  FP_STATUS_OK = 0,
  FP_STATUS_NULL_POINTER = 1,
  FP_STATUS_INVALID_ARGUMENT = 2,
  FP_STATUS_IO = 3,
  FP_STATUS_GEOMETRY = 4,
  FP_STATUS_UNDEFINED = 5,
  FP_STATUS_PANIC = 6,
} FpStatus;

/**
 * Which half of the image stays visible.
 */
typedef enum FpHalf {
  FP_HALF_TOP = 0,
  FP_HALF_BOTTOM = 1,
} FpHalf;

/**
 * Opaque RGB8 image.
 */
typedef struct FpImage FpImage;

typedef struct FpPoint {
  double x;
  double y;
} FpPoint;

typedef struct FpBox {
  double x;
  double y;
  double w;
  double h;
} FpBox;

typedef struct FpLandmarks {
  struct FpPoint left_eye;
  struct FpPoint right_eye;
  struct FpPoint nose;
} FpLandmarks;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *fp_last_error(void);

/**
 * Creates an image from `len = width * height * 3` interleaved RGB bytes.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be writable.
 */
enum FpStatus fp_image_new(uint32_t width,
                           uint32_t height,
                           const uint8_t *data,
                           size_t len,
                           struct FpImage **out);

/**
 * Releases an image. Null is ignored.
 *
 * # Safety
 * `img` must come from this library and not have been freed.
 */
void fp_image_free(struct FpImage *img);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FpStatus fp_image_load_png(const char *path, struct FpImage **out);

/**
 * # Safety
 * `img` must be a live handle; `path` a NUL-terminated string.
 */
enum FpStatus fp_image_save_png(const struct FpImage *img, const char *path);

/**
 * Width in pixels, 0 for a null handle.
 *
 * # Safety
 * `img` must be null or a live handle.
 */
uint32_t fp_image_width(const struct FpImage *img);

/**
 * Height in pixels, 0 for a null handle.
 *
 * # Safety
 * `img` must be null or a live handle.
 */
uint32_t fp_image_height(const struct FpImage *img);

/**
 * Borrowed pointer to the interleaved RGB bytes; `len` receives their
 * count. Valid while the handle lives.
 *
 * # Safety
 * `img` must be null or a live handle; `len` null or writable.
 */
const uint8_t *fp_image_data(const struct FpImage *img, size_t *len);

/**
 * Per-channel histogram equalization into a new image.
 *
 * # Safety
 * `img` must be a live handle; `out` writable.
 */
enum FpStatus fp_equalize(const struct FpImage *img, struct FpImage **out);

/**
 * Zeroes the half opposite to `visible` into a new image.
 *
 * # Safety
 * `img` must be a live handle; `out` writable.
 */
enum FpStatus fp_mask_half(const struct FpImage *img, enum FpHalf visible, struct FpImage **out);

/**
 * Rotates about `center` (radians, bilinear, black corners).
 *
 * # Safety
 * `img` must be a live handle; `out` writable.
 */
enum FpStatus fp_rotate_about(const struct FpImage *img,
                              struct FpPoint center,
                              double angle,
                              struct FpImage **out);

/**
 * Full face normalization: square, zoom out, crop, equalize, level the
 * eyes, resize to `size x size`. `out_landmarks` (optional) receives the
 * landmarks in output coordinates.
 *
 * # Safety
 * `img` must be a live handle; `out` writable; `out_landmarks` null or
 * writable.
 */
enum FpStatus fp_normalize_face(const struct FpImage *img,
                                struct FpBox face,
                                struct FpLandmarks landmarks,
                                double zoom,
                                uint32_t size,
                                struct FpImage **out,
                                struct FpLandmarks *out_landmarks);

/**
 * Overall accuracy of `n` (predicted, true) class indices.
 *
 * # Safety
 * `predicted` and `truth` must point to `n` values; `out` writable.
 */
enum FpStatus fp_accuracy(const uint32_t *predicted,
                          const uint32_t *truth,
                          size_t n,
                          uint32_t num_classes,
                          double *out);

/**
 * Unweighted mean of per-class sensitivities over classes with support.
 *
 * # Safety
 * `predicted` and `truth` must point to `n` values; `out` writable.
 */
enum FpStatus fp_mean_sensitivity(const uint32_t *predicted,
                                  const uint32_t *truth,
                                  size_t n,
                                  uint32_t num_classes,
                                  double *out);

/**
 * Sample standard deviation of per-class sensitivities.
 *
 * # Safety
 * `predicted` and `truth` must point to `n` values; `out` writable.
 */
enum FpStatus fp_sensitivity_sd(const uint32_t *predicted,
                                const uint32_t *truth,
                                size_t n,
                                uint32_t num_classes,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FACEPIPE_H */
