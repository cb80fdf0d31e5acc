#ifndef TRACE_H
#define TRACE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum TraceStatus {
  TRACE_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  TRACE_STATUS_NULL_ARGUMENT = 1,
  TRACE_STATUS_CONFIG = 2,
  TRACE_STATUS_DATA = 3,
  TRACE_STATUS_NUMERIC = 4,
  TRACE_STATUS_INTEGRITY = 5,
  TRACE_STATUS_IO = 6,
  /**
   * Input sizes disagree with the model.
   */
  TRACE_STATUS_SHAPE = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  TRACE_STATUS_INTERNAL = 8,
} TraceStatus;

/**
 * A loaded model together with the clip geometry it was trained for.
 */
typedef struct TraceModel TraceModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *trace_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated and
 * NUL-terminated) and returns the full message length, or 0 when there is none.
 *
 * # Safety
 * `buf` must be null or point to at least `len` writable bytes.
 */
size_t trace_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint and stores a new handle in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TraceStatus trace_model_load(const char *path, struct TraceModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `trace_model_load` and not be used afterwards.
 */
void trace_model_free(struct TraceModel *model);

/**
 * Writes the expected clip geometry. Any output pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be writable.
 */
enum TraceStatus trace_model_geometry(const struct TraceModel *model,
                                      size_t *frames,
                                      size_t *height,
                                      size_t *width);

/**
 * Segments and classifies one clip.
 *
 * `frames` holds `t*3*h*w` values in `[0, 1]` laid out `[T, 3, H, W]`;
 * `gas` holds `t*h*w` values laid out `[T, H, W]`. On success `masks`
 * (`t*h*w` bytes) receives `{0, 1}` masks, `probs` (3 values) the class
 * probabilities in the order high-flux, control, low-flux, and `label`
 * the arg-max class. `probs` and `label` may be null.
 *
 * # Safety
 * All non-null pointers must reference buffers of the sizes above.
 */
enum TraceStatus trace_model_predict(const struct TraceModel *model,
                                     const float *frames,
                                     const float *gas,
                                     size_t t,
                                     size_t h,
                                     size_t w,
                                     uint8_t *masks,
                                     double *probs,
                                     uint32_t *label);

/**
 * Checks a checkpoint's framing and digest without building a model.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum TraceStatus trace_checkpoint_verify(const char *path);

/**
 * Writes a synthetic dataset, as the `generate` command does.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated string.
 */
enum TraceStatus trace_generate_dataset(const char *out_dir,
                                        size_t clips,
                                        size_t animals,
                                        uint64_t seed,
                                        size_t height,
                                        size_t width,
                                        size_t frames,
                                        bool force);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRACE_H */
