#ifndef TSCODE_H
#define TSCODE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TscStatus {
  TSC_STATUS_OK = 0,
  TSC_STATUS_NULL_POINTER = 1,
  TSC_STATUS_CONFIG = 2,
  TSC_STATUS_DIVERGENCE = 3,
  TSC_STATUS_SHAPE = 4,
  TSC_STATUS_IO = 5,
  TSC_STATUS_INVALID_ARGUMENT = 6,
  TSC_STATUS_BUFFER_TOO_SMALL = 7,
  TSC_STATUS_PANIC = 8,
} TscStatus;

/**
 * A detector with its weights and decoding settings.
 */
typedef struct TscDetector TscDetector;

/**
 * One detection in input-image pixels.
 */
typedef struct TscDetection {
  double x1;
  double y1;
  double x2;
  double y2;
  double score;
  uint32_t class_id;
} TscDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread, NUL-terminated and
 * truncated to `len` bytes. Returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t tsc_last_error(char *buf, size_t len);

/**
 * Builds a freshly initialized detector from TOML config text (empty text
 * means defaults).
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `out` must be writable.
 */
enum TscStatus tsc_detector_new(const char *config_toml, struct TscDetector **out);

/**
 * Loads the config and checkpoint of a finished training run.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated path; `out` must be writable.
 */
enum TscStatus tsc_detector_load(const char *run_dir, struct TscDetector **out);

/**
 * # Safety
 * `det` must be null or come from a constructor above, freed once.
 */
void tsc_detector_free(struct TscDetector *det);

/**
 * # Safety
 * `det` must be a live handle; `out` must be writable.
 */
enum TscStatus tsc_detector_num_classes(const struct TscDetector *det, uint32_t *out);

/**
 * Detects objects in one planar RGB image (`3 × height × width` values,
 * channel-major). Writes up to `capacity` detections, best first, and the
 * number found to `count`; returns `BufferTooSmall` if they did not fit.
 *
 * # Safety
 * `image` must hold `3·height·width` values; `out` must hold `capacity`
 * entries (or be null with `capacity` 0); `count` must be writable.
 */
enum TscStatus tsc_detect(const struct TscDetector *det,
                          const double *image,
                          size_t height,
                          size_t width,
                          struct TscDetection *out,
                          size_t capacity,
                          size_t *count);

/**
 * Class-aware greedy suppression. Writes the kept input indices, highest
 * score first, to `keep` and their number to `kept`; `keep` must hold `n`.
 *
 * # Safety
 * `dets` and `keep` must hold `n` entries; `kept` must be writable.
 */
enum TscStatus tsc_nms(const struct TscDetection *dets,
                       size_t n,
                       double iou_threshold,
                       size_t *keep,
                       size_t *kept);

/**
 * Full-scale (ResNet-50, 1280×800, 256 channels, 80 classes) totals for a
 * named head: `decoupled`, `coupled`, `tscode`, `sce-only` or `dpe-only`.
 * `delta_gflops` is the head's difference from the decoupled head.
 *
 * # Safety
 * `head` must be a NUL-terminated string; outputs must be writable.
 */
enum TscStatus tsc_full_scale_cost(const char *head,
                                   double *gflops,
                                   uint64_t *params,
                                   double *delta_gflops);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSCODE_H */
