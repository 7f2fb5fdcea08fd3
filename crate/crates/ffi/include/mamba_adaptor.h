#ifndef MAMBA_ADAPTOR_H
#define MAMBA_ADAPTOR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MaStatus {
  MA_STATUS_OK = 0,
  MA_STATUS_NULL_POINTER = 1,
  MA_STATUS_SHAPE = 2,
  MA_STATUS_NON_FINITE = 3,
  MA_STATUS_DOMAIN = 4,
  MA_STATUS_CONFIG = 5,
  MA_STATUS_CONTRACT = 6,
  MA_STATUS_FORMAT = 7,
  MA_STATUS_IO = 8,
  MA_STATUS_INTERNAL = 9,
} MaStatus;

/**
 * One vision-Mamba block with its weights.
 */
typedef struct MaBlock MaBlock;

/**
 * Dense f64 tensor.
 */
typedef struct MaTensor MaTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until
 * the next failing call on the same thread.
 */
const char *ma_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ma_version(void);

/**
 * Advances a SplitMix64 state and returns the next output.
 *
 * # Safety
 * `state` must point to a writable `uint64_t`.
 */
uint64_t ma_splitmix64_next(uint64_t *state);

/**
 * Copies `shape[0..rank]` and `data[0..Π shape]` into a new tensor.
 *
 * # Safety
 * `shape` must hold `rank` values and `data` their product; `out` must be
 * writable.
 */
enum MaStatus ma_tensor_new(const size_t *shape,
                            size_t rank,
                            const double *data,
                            struct MaTensor **out);

/**
 * # Safety
 * `t` must be NULL or a handle from this library not yet freed.
 */
void ma_tensor_free(struct MaTensor *t);

/**
 * # Safety
 * `t` must be a live handle.
 */
size_t ma_tensor_rank(const struct MaTensor *t);

/**
 * # Safety
 * `t` must be a live handle.
 */
size_t ma_tensor_len(const struct MaTensor *t);

/**
 * Writes the extents into `shape[0..cap]`; fails if `cap < rank`.
 *
 * # Safety
 * `t` must be a live handle and `shape` writable for `cap` values.
 */
enum MaStatus ma_tensor_shape(const struct MaTensor *t, size_t *shape, size_t cap);

/**
 * Copies the row-major values into `data[0..cap]`; fails if `cap < len`.
 *
 * # Safety
 * `t` must be a live handle and `data` writable for `cap` values.
 */
enum MaStatus ma_tensor_data(const struct MaTensor *t, double *data, size_t cap);

/**
 * Reads a MATD file (f32 payloads are widened).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum MaStatus ma_matd_read(const char *path, struct MaTensor **out);

/**
 * Writes `t` as MATD with `dtype` 8 (f64) or 4 (f32).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `t` a live handle.
 */
enum MaStatus ma_matd_write(const char *path, const struct MaTensor *t, uint8_t dtype);

/**
 * `h_t = Ā_t ⊙ h_{t−1} + B̄u_t` from `h_{−1} = 0`, time on the leading axis.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum MaStatus ma_scan_sequential(const struct MaTensor *abar,
                                 const struct MaTensor *bu,
                                 struct MaTensor **out);

/**
 * Chunked parallel scan; `chunk` must be a power of two, `workers` ≤ 1
 * runs on the calling thread.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum MaStatus ma_scan_parallel(const struct MaTensor *abar,
                               const struct MaTensor *bu,
                               size_t chunk,
                               size_t workers,
                               struct MaTensor **out);

/**
 * Depthwise "same" convolution of `y[H×W×D]` with `w[D×K×K]`.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum MaStatus ma_depthwise_conv2d(const struct MaTensor *y,
                                  const struct MaTensor *w,
                                  size_t dilation,
                                  struct MaTensor **out);

/**
 * Builds a block from the `[block]` table (and optional top-level
 * `[adaptor_t]` / `[adaptor_s]`) of a run config, initialized from `seed`.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string and `out` writable.
 */
enum MaStatus ma_block_new(const char *config_toml, uint64_t seed, struct MaBlock **out);

/**
 * Replaces the block weights with those in a checkpoint, which must name
 * exactly the block's parameters.
 *
 * # Safety
 * `b` must be a live handle and `path` a NUL-terminated string.
 */
enum MaStatus ma_block_load(struct MaBlock *b, const char *path);

/**
 * # Safety
 * `b` must be a live handle.
 */
size_t ma_block_param_count(const struct MaBlock *b);

/**
 * SS2D path only: routes, scan, adaptors, merge. `x` is `[H×W×D]`.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum MaStatus ma_block_ss2d(const struct MaBlock *b,
                            const struct MaTensor *x,
                            struct MaTensor **out);

/**
 * Full pre-norm block: `y = x + SS2D(LN x)`, `y + FFN(LN y)`.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum MaStatus ma_block_forward(const struct MaBlock *b,
                               const struct MaTensor *x,
                               struct MaTensor **out);

/**
 * # Safety
 * `b` must be NULL or a handle from this library not yet freed.
 */
void ma_block_free(struct MaBlock *b);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAMBA_ADAPTOR_H */
