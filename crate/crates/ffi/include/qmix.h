#ifndef QMIX_H
#define QMIX_H

/* Generated by cbindgen from the qmix-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum QmixStatus {
  QMIX_STATUS_OK = 0,
  QMIX_STATUS_NULL_POINTER = 1,
  QMIX_STATUS_INVALID_UTF8 = 2,
  QMIX_STATUS_INVALID_ARGUMENT = 3,
  QMIX_STATUS_INVALID_GRAPH = 4,
  QMIX_STATUS_NOT_CALIBRATED = 5,
  QMIX_STATUS_NO_CALIBRATION_DATA = 6,
  QMIX_STATUS_SHAPE_MISMATCH = 7,
  QMIX_STATUS_DTYPE_MISMATCH = 8,
  QMIX_STATUS_IO = 9,
  QMIX_STATUS_FORMAT = 10,
  QMIX_STATUS_UNSUPPORTED = 11,
  QMIX_STATUS_BUFFER_TOO_SMALL = 12,
  QMIX_STATUS_INTERNAL = 13,
} QmixStatus;

/**
 * A loaded network ready for inference.
 */
typedef struct QmixNet QmixNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call into the library on this thread.
 */
const char *qmix_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *qmix_version(void);

/**
 * Loads a graph, optionally with a model file, rewrites it to
 * `precision` ("fp32", "fp16", "int16", "int8"; null keeps the graph's
 * own types) and prepares it for inference. Quantized precisions need a
 * calibrated model.
 *
 * # Safety
 * String arguments are null or NUL-terminated; `out` is writable.
 */
enum QmixStatus qmix_net_load(const char *graph_path,
                              const char *model_path,
                              const char *precision,
                              uint64_t seed,
                              struct QmixNet **out);

/**
 * Releases a network. Null is ignored.
 *
 * # Safety
 * `net` is null or came from [`qmix_net_load`] and is not used again.
 */
void qmix_net_free(struct QmixNet *net);

/**
 * Values per sample of the input and output blobs.
 *
 * # Safety
 * `net` is a live handle; the out pointers are writable or null.
 */
enum QmixStatus qmix_net_sample_sizes(const struct QmixNet *net, size_t *input, size_t *output);

/**
 * Runs `batch` samples, row-major, and writes `batch * output_size`
 * floats to `output`. Nothing is written on failure.
 *
 * # Safety
 * `input` holds `batch * input_size` floats; `output` has room for
 * `capacity` floats.
 */
enum QmixStatus qmix_net_infer(const struct QmixNet *net,
                               const float *input,
                               size_t batch,
                               float *output,
                               size_t capacity);

/**
 * Observes `batch` FP32 samples and writes the calibrated model to
 * `model_out`, replacing it atomically.
 *
 * # Safety
 * Strings are null or NUL-terminated; `samples` holds `batch` samples.
 */
enum QmixStatus qmix_calibrate(const char *graph_path,
                               const char *model_path,
                               const float *samples,
                               size_t batch,
                               uint64_t seed,
                               const char *model_out);

/**
 * Emits kernel source for `op` ("relu") at `precision` in `dialect`
 * ("cuda" or "opencl"). `*source` receives a string to release with
 * [`qmix_string_free`]; `hash`, if not null, receives 32 bytes.
 *
 * # Safety
 * Strings are NUL-terminated; `source` is writable; `hash` is null or
 * has room for 32 bytes.
 */
enum QmixStatus qmix_emit_kernel(const char *op,
                                 const char *precision,
                                 const char *dialect,
                                 char **source,
                                 uint8_t *hash);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` is null or came from this library and is not used again.
 */
void qmix_string_free(char *s);

/**
 * Peak activation bytes of a graph's memory plan, with or without buffer
 * reuse, after optionally rewriting it to `precision`.
 *
 * # Safety
 * Strings are null or NUL-terminated; `peak_bytes` is writable.
 */
enum QmixStatus qmix_mem_plan(const char *graph_path,
                              const char *precision,
                              bool reuse,
                              size_t *peak_bytes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QMIX_H */
