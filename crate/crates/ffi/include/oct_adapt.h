#ifndef OCT_ADAPT_H
#define OCT_ADAPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum OctStatus {
  OctStatus_Ok = 0,
  OctStatus_NullPointer = 1,
  OctStatus_InvalidArgument = 2,
  OctStatus_Config = 3,
  OctStatus_MissingInput = 4,
  OctStatus_Format = 5,
  OctStatus_Contract = 6,
  OctStatus_Divergence = 7,
  OctStatus_Io = 8,
  /**
   * A Rust panic was caught at the boundary.
   */
  OctStatus_Internal = 9,
} OctStatus;

/**
 * Translation direction for [`oct_generator_load`].
 */
typedef enum OctDirection {
  OctDirection_AToB = 0,
  OctDirection_BToA = 1,
} OctDirection;

/**
 * Opaque generator handle bound to one translation direction.
 */
typedef struct OctGenerator OctGenerator;

/**
 * Opaque segmenter handle.
 */
typedef struct OctSegmenter OctSegmenter;

/**
 * Opaque volume handle.
 */
typedef struct OctVolume OctVolume;

typedef struct OctMaskMetrics {
  double accuracy;
  double dice;
  double jaccard;
} OctMaskMetrics;

typedef struct OctTTest {
  double t;
  double df;
  double p;
} OctTTest;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library on the same thread.
 */
const char *oct_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *oct_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum OctStatus oct_volume_load(const char *path, struct OctVolume **out);

/**
 * # Safety
 * `vol` must be a live handle and `path` a NUL-terminated string.
 */
enum OctStatus oct_volume_save(const struct OctVolume *vol, const char *path);

/**
 * Build a volume from `count` row-major 8-bit B-scans of `height`×`width`
 * stored back to back. `masks` may be null; otherwise it has the same
 * layout with labels 0 (background) or 1 (retina). `domain` is 0 for A and
 * 1 for B.
 *
 * # Safety
 * `id` must be NUL-terminated; `pixels` (and `masks` when non-null) must
 * hold `count·height·width` bytes; `out` must be writable.
 */
enum OctStatus oct_volume_from_u8(const char *id,
                                  uint32_t domain,
                                  uintptr_t count,
                                  uintptr_t height,
                                  uintptr_t width,
                                  const uint8_t *pixels,
                                  const uint8_t *masks,
                                  struct OctVolume **out);

/**
 * # Safety
 * `vol` must be a handle from this library or null.
 */
void oct_volume_free(struct OctVolume *vol);

/**
 * # Safety
 * `vol` must be a live handle; the output pointers must be writable.
 */
enum OctStatus oct_volume_shape(const struct OctVolume *vol,
                                uintptr_t *count,
                                uintptr_t *height,
                                uintptr_t *width);

/**
 * Nonzero when the volume carries ground-truth masks. A null handle reads
 * as 0.
 *
 * # Safety
 * `vol` must be a live handle or null.
 */
int32_t oct_volume_has_masks(const struct OctVolume *vol);

/**
 * Copy B-scan `index` as 8-bit intensities into `buf` of `len` bytes,
 * which must equal height·width.
 *
 * # Safety
 * `vol` must be a live handle and `buf` writable for `len` bytes.
 */
enum OctStatus oct_volume_bscan_u8(const struct OctVolume *vol,
                                   uintptr_t index,
                                   uint8_t *buf,
                                   uintptr_t len);

/**
 * Copy the ground-truth mask of B-scan `index` into `buf`.
 *
 * # Safety
 * `vol` must be a live handle and `buf` writable for `len` bytes.
 */
enum OctStatus oct_volume_mask(const struct OctVolume *vol,
                               uintptr_t index,
                               uint8_t *buf,
                               uintptr_t len);

/**
 * Rule-based noise adaptation with default rule thresholds and the given
 * noise parameters.
 *
 * # Safety
 * `vol` must be a live handle and `out` writable.
 */
enum OctStatus oct_adapt_traditional(const struct OctVolume *vol,
                                     float noise_mu,
                                     float noise_sigma,
                                     uint64_t seed,
                                     struct OctVolume **out);

/**
 * Load one generator from a training or generator checkpoint.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum OctStatus oct_generator_load(const char *path,
                                  enum OctDirection direction,
                                  struct OctGenerator **out);

/**
 * # Safety
 * `g` must be a handle from this library or null.
 */
void oct_generator_free(struct OctGenerator *g);

/**
 * Translate every B-scan of `vol`; masks are carried over.
 *
 * # Safety
 * `g` and `vol` must be live handles and `out` writable.
 */
enum OctStatus oct_generator_adapt(const struct OctGenerator *g,
                                   const struct OctVolume *vol,
                                   struct OctVolume **out);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum OctStatus oct_segmenter_load(const char *path, struct OctSegmenter **out);

/**
 * # Safety
 * `s` must be a handle from this library or null.
 */
void oct_segmenter_free(struct OctSegmenter *s);

/**
 * Segment B-scan `index` of `vol`. `labels` receives 0/1 per pixel;
 * `retina_prob`, when non-null, receives the retina probability. Both
 * buffers hold `len` = height·width elements.
 *
 * # Safety
 * Handles must be live; `labels` writable for `len` bytes and
 * `retina_prob` null or writable for `len` floats.
 */
enum OctStatus oct_segmenter_predict(const struct OctSegmenter *s,
                                     const struct OctVolume *vol,
                                     uintptr_t index,
                                     uint8_t *labels,
                                     float *retina_prob,
                                     uintptr_t len);

/**
 * Accuracy, Dice and Jaccard of two binary masks of `height`×`width`.
 *
 * # Safety
 * `pred` and `gt` must hold `height·width` bytes; `out` must be writable.
 */
enum OctStatus oct_mask_metrics(const uint8_t *pred,
                                const uint8_t *gt,
                                uintptr_t height,
                                uintptr_t width,
                                struct OctMaskMetrics *out);

/**
 * ROC AUC of retina probabilities against a binary mask. Fails with
 * `InvalidArgument` when the mask holds a single class.
 *
 * # Safety
 * `scores` must hold `height·width` floats, `gt` as many bytes; `out`
 * must be writable.
 */
enum OctStatus oct_auc(const float *scores,
                       const uint8_t *gt,
                       uintptr_t height,
                       uintptr_t width,
                       double *out);

/**
 * Two-tailed Welch t-test of two samples.
 *
 * # Safety
 * `a` and `b` must hold `na` and `nb` doubles; `out` must be writable.
 */
enum OctStatus oct_welch_ttest(const double *a,
                               uintptr_t na,
                               const double *b,
                               uintptr_t nb,
                               struct OctTTest *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OCT_ADAPT_H */
