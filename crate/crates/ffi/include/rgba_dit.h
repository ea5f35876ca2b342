#ifndef RGBA_DIT_H
#define RGBA_DIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define RD_OK 0

/**
 * Null pointer, bad UTF-8 or undersized buffer.
 */
#define RD_ERR_ARGUMENT 1

#define RD_ERR_DIMENSION 2

#define RD_ERR_CONFIG 3

#define RD_ERR_NUMERIC 4

#define RD_ERR_CONTRACT 5

/**
 * Not enough data to produce a value, e.g. an IoU with no foreground.
 */
#define RD_ERR_NO_DATA 6

#define RD_ERR_FORMAT 7

#define RD_ERR_IO 8

#define RD_ERR_PANIC 9

/**
 * Experiment configuration.
 */
typedef struct RdConfig RdConfig;

/**
 * A loaded checkpoint.
 */
typedef struct RdModel RdModel;

/**
 * An RGBA video, straight alpha, values in [0, 1].
 */
typedef struct RdVideo RdVideo;

/**
 * Static facts about a loaded model.
 */
typedef struct RdModelInfo {
  size_t frames;
  size_t height;
  size_t width;
  /**
   * 0 for an RGB-only base model, 1 for a model that also generates alpha.
   */
  int32_t has_alpha;
  size_t trainable_params;
} RdModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rd_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t rd_last_error(char *buf, size_t len);

/**
 * Loads a config: defaults, then the TOML file at `path` (may be null),
 * then `n_overrides` `key=value` strings.
 *
 * # Safety
 * `path` is null or a NUL-terminated string; `overrides` points to
 * `n_overrides` such strings (or is null when `n_overrides` is 0); `out`
 * is writable.
 */
int32_t rd_config_load(const char *path,
                       const char *const *overrides,
                       size_t n_overrides,
                       struct RdConfig **out);

/**
 * # Safety
 * `config` is null or came from `rd_config_load` and is not used again.
 */
void rd_config_free(struct RdConfig *config);

/**
 * # Safety
 * `path` is a NUL-terminated string and `out` is writable.
 */
int32_t rd_model_load(const char *path, struct RdModel **out);

/**
 * # Safety
 * `model` is null or came from `rd_model_load` and is not used again.
 */
void rd_model_free(struct RdModel *model);

/**
 * # Safety
 * `model` is a live handle and `out` is writable.
 */
int32_t rd_model_info(const struct RdModel *model, struct RdModelInfo *out);

/**
 * Samples one video for class `cond_id`. `steps == 0` uses the config's
 * sampler steps. The config's model section must match the checkpoint.
 *
 * # Safety
 * `model` and `config` are live handles and `out` is writable.
 */
int32_t rd_sample(const struct RdModel *model,
                  const struct RdConfig *config,
                  size_t cond_id,
                  uint64_t seed,
                  size_t steps,
                  struct RdVideo **out);

/**
 * Reads a video directory (numbered RGBA frames plus `video.json`).
 *
 * # Safety
 * `dir` is a NUL-terminated string and `out` is writable.
 */
int32_t rd_video_read_dir(const char *dir, struct RdVideo **out);

/**
 * # Safety
 * `video` is null or came from this library and is not used again.
 */
void rd_video_free(struct RdVideo *video);

/**
 * # Safety
 * `video` is a live handle; the out pointers are writable.
 */
int32_t rd_video_dims(const struct RdVideo *video, size_t *frames, size_t *height, size_t *width);

/**
 * Copies the samples, frame-major then row-major, four per pixel.
 * `len` must be at least `frames * height * width * 4`.
 *
 * # Safety
 * `video` is a live handle and `buf` points to `len` writable doubles.
 */
int32_t rd_video_copy_rgba(const struct RdVideo *video, double *buf, size_t len);

/**
 * Mean flow difference between the RGB and alpha streams, with the
 * config's flow parameters fitted to the frame size.
 *
 * # Safety
 * `video` and `config` are live handles and `out` is writable.
 */
int32_t rd_video_flow_difference(const struct RdVideo *video,
                                 const struct RdConfig *config,
                                 double *out);

/**
 * IoU between the thresholded alpha and the foreground derived from RGB.
 *
 * # Safety
 * `video` and `config` are live handles and `out` is writable.
 */
int32_t rd_video_alignment_iou(const struct RdVideo *video,
                               const struct RdConfig *config,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RGBA_DIT_H */
