#ifndef BCMF_H
#define BCMF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BcmfStatus {
  BCMF_STATUS_OK = 0,
  BCMF_STATUS_NULL_POINTER = 1,
  BCMF_STATUS_INVALID_UTF8 = 2,
  BCMF_STATUS_BUFFER_TOO_SMALL = 3,
  BCMF_STATUS_SHAPE = 4,
  BCMF_STATUS_NON_FINITE = 5,
  BCMF_STATUS_INVALID_ARGUMENT = 6,
  BCMF_STATUS_CONFIG = 7,
  BCMF_STATUS_LABEL_OUT_OF_RANGE = 8,
  BCMF_STATUS_BACKWARD = 9,
  BCMF_STATUS_BN_NOT_CALIBRATED = 10,
  BCMF_STATUS_MALFORMED_HEADER = 11,
  BCMF_STATUS_UNSUPPORTED_MAXVAL = 12,
  BCMF_STATUS_TRUNCATED = 13,
  BCMF_STATUS_CHECKPOINT = 14,
  BCMF_STATUS_DIGEST_MISMATCH = 15,
  BCMF_STATUS_EMPTY_MANIFEST = 16,
  BCMF_STATUS_DIVERGED = 17,
  BCMF_STATUS_IO = 18,
  BCMF_STATUS_PANIC = 99,
} BcmfStatus;

/**
 * Opaque network handle.
 */
typedef struct BcmfNetwork BcmfNetwork;

/**
 * Boundary loss settings; see `bcmf_bcl_default`.
 */
typedef struct BcmfBclConfig {
  size_t step;
  double lambda1;
  double lambda2;
  double alpha;
  size_t nms_window;
  double keep_fraction;
  size_t min_kept;
} BcmfBclConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or "" after a success.
 * The pointer stays valid until the next `bcmf_*` call on this thread.
 */
const char *bcmf_last_error(void);

/**
 * Default boundary loss settings.
 */
struct BcmfBclConfig bcmf_bcl_default(void);

/**
 * Builds a freshly initialized network.
 *
 * # Safety
 * `config` is NULL or a NUL-terminated string; `out` is writable.
 */
enum BcmfStatus bcmf_network_build(const char *config, uint64_t seed, struct BcmfNetwork **out);

/**
 * Loads a checkpoint written for the network described by `config`.
 *
 * # Safety
 * `config` is NULL or NUL-terminated; `path` is NUL-terminated; `out` is
 * writable.
 */
enum BcmfStatus bcmf_network_load(const char *config, const char *path, struct BcmfNetwork **out);

/**
 * # Safety
 * `net` is a live handle; `path` is NUL-terminated.
 */
enum BcmfStatus bcmf_network_save(const struct BcmfNetwork *net, const char *path);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `net` is NULL or a handle not yet freed.
 */
void bcmf_network_free(struct BcmfNetwork *net);

/**
 * # Safety
 * `net` is a live handle; `out` is writable.
 */
enum BcmfStatus bcmf_network_num_classes(const struct BcmfNetwork *net, size_t *out);

/**
 * Number of trainable scalars.
 *
 * # Safety
 * `net` is a live handle; `out` is writable.
 */
enum BcmfStatus bcmf_network_param_count(const struct BcmfNetwork *net, uint64_t *out);

/**
 * Runs one training-mode pass over `images` (`[n, 3, h, w]`) to update
 * batch-norm running statistics.
 *
 * # Safety
 * `net` is a live handle; `images` holds `n*3*h*w` values.
 */
enum BcmfStatus bcmf_network_calibrate(struct BcmfNetwork *net,
                                       const double *images,
                                       size_t n,
                                       size_t h,
                                       size_t w);

/**
 * Logits `[n, M, h, w]` for `images` `[n, 3, h, w]`. `train_mode != 0`
 * uses batch statistics instead of running statistics.
 *
 * # Safety
 * `net` is a live handle; `images` holds `n*3*h*w` values; `out` holds
 * `out_len` values.
 */
enum BcmfStatus bcmf_network_logits(const struct BcmfNetwork *net,
                                    const double *images,
                                    size_t n,
                                    size_t h,
                                    size_t w,
                                    int32_t train_mode,
                                    double *out,
                                    size_t out_len);

/**
 * Per-pixel class ids (`h*w`, row-major) for one `[3, h, w]` image, using
 * eval-mode batch norm and lowest-index tie breaking.
 *
 * # Safety
 * `net` is a live handle; `image` holds `3*h*w` values; `labels` holds
 * `labels_len` values.
 */
enum BcmfStatus bcmf_network_predict(const struct BcmfNetwork *net,
                                     const double *image,
                                     size_t h,
                                     size_t w,
                                     uint32_t *labels,
                                     size_t labels_len);

/**
 * `mean CE + alpha * boundary loss` of raw logits `[n, m, h, w]` against
 * `labels` (`n*h*w`).
 *
 * # Safety
 * `logits` holds `n*m*h*w` values, `labels` `n*h*w`, `cfg` and `out` are
 * valid pointers.
 */
enum BcmfStatus bcmf_total_loss(const double *logits,
                                size_t n,
                                size_t m,
                                size_t h,
                                size_t w,
                                const uint32_t *labels,
                                const struct BcmfBclConfig *cfg,
                                double *out);

/**
 * Unweighted boundary loss of softmax probabilities `[n, m, h, w]`.
 *
 * # Safety
 * As for `bcmf_total_loss`.
 */
enum BcmfStatus bcmf_boundary_loss(const double *probs,
                                   size_t n,
                                   size_t m,
                                   size_t h,
                                   size_t w,
                                   const uint32_t *labels,
                                   const struct BcmfBclConfig *cfg,
                                   double *out);

/**
 * Parameter and FLOP count of the configured network on an `h`×`w` input.
 *
 * # Safety
 * `config` is NULL or NUL-terminated; `params` and `flops` are writable.
 */
enum BcmfStatus bcmf_count_cost(const char *config,
                                size_t h,
                                size_t w,
                                uint64_t *params,
                                uint64_t *flops);

/**
 * Synthetic sample `index` of the scene described by the `data.*` keys:
 * image `[3, H, W]` into `image`, labels `H*W` into `labels`.
 *
 * # Safety
 * `config` is NULL or NUL-terminated; the buffers hold the given lengths.
 */
enum BcmfStatus bcmf_generate_sample(const char *config,
                                     uint64_t index,
                                     double *image,
                                     size_t image_len,
                                     uint32_t *labels,
                                     size_t labels_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BCMF_H */
