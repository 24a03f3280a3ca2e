#ifndef MTNET_H
#define MTNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MtnetStatus {
  MTNET_STATUS_OK = 0,
  MTNET_STATUS_NULL_POINTER = 1,
  MTNET_STATUS_INVALID_ARGUMENT = 2,
  MTNET_STATUS_CONFIG = 3,
  MTNET_STATUS_IO = 4,
  MTNET_STATUS_FORMAT = 5,
  MTNET_STATUS_CHECKPOINT = 6,
  MTNET_STATUS_INTERNAL = 7,
  MTNET_STATUS_PANIC = 8,
} MtnetStatus;

typedef enum MtnetDetector {
  MTNET_DETECTOR_SOBEL = 0,
  MTNET_DETECTOR_PREWITT = 1,
} MtnetDetector;

/**
 * Opaque loaded synthesizer.
 */
typedef struct MtnetSynthesizer MtnetSynthesizer;

typedef struct MtnetScores {
  double psnr_db;
  double nmse;
  double ssim;
} MtnetScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mtnet_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next mtnet call on this thread.
 */
const char *mtnet_last_error(void);

/**
 * Loads a synthesizer checkpoint directory into `*out`.
 *
 * # Safety
 * `dir` must be a NUL-terminated UTF-8 path; `out` must be writable.
 */
enum MtnetStatus mtnet_synthesizer_load(const char *dir, struct MtnetSynthesizer **out);

/**
 * Releases a synthesizer; null is ignored.
 *
 * # Safety
 * `model` must come from `mtnet_synthesizer_load` and not be used afterwards.
 */
void mtnet_synthesizer_free(struct MtnetSynthesizer *model);

/**
 * Side length of the square images the synthesizer accepts.
 *
 * # Safety
 * `model` must be a live handle; `size` must be writable.
 */
enum MtnetStatus mtnet_synthesizer_image_size(const struct MtnetSynthesizer *model, size_t *size);

/**
 * Synthesizes the target modality of a `height x width` source image.
 *
 * # Safety
 * `source` must hold `height * width` floats and `out` `out_len` floats.
 */
enum MtnetStatus mtnet_synthesize(const struct MtnetSynthesizer *model,
                                  const float *source,
                                  size_t height,
                                  size_t width,
                                  float *out,
                                  size_t out_len);

/**
 * PSNR, NMSE and global SSIM of `pred` against `target`.
 *
 * # Safety
 * Both buffers must hold `height * width` floats; `scores` must be writable.
 */
enum MtnetStatus mtnet_metrics(const float *target,
                               const float *pred,
                               size_t height,
                               size_t width,
                               struct MtnetScores *scores);

/**
 * Normalized gradient-magnitude map of an image, written to `out`.
 *
 * # Safety
 * `pixels` must hold `height * width` floats and `out` `out_len` floats.
 */
enum MtnetStatus mtnet_edge_map(const float *pixels,
                                size_t height,
                                size_t width,
                                enum MtnetDetector detector,
                                float *out,
                                size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTNET_H */
