#ifndef SPIRO_H
#define SPIRO_H

#include <stddef.h>
#include <stdint.h>

typedef enum SpiroStatus {
  SPIRO_STATUS_OK = 0,
  SPIRO_STATUS_NULL_POINTER = 1,
  SPIRO_STATUS_INVALID_UTF8 = 2,
  SPIRO_STATUS_PARAM = 3,
  SPIRO_STATUS_CONFIG = 4,
  SPIRO_STATUS_SHAPE = 5,
  SPIRO_STATUS_DEGENERATE = 6,
  SPIRO_STATUS_CURVE_TOO_LONG = 7,
  SPIRO_STATUS_NON_FINITE = 8,
  SPIRO_STATUS_SCHEMA = 9,
  SPIRO_STATUS_INTEGRITY = 10,
  SPIRO_STATUS_IO = 11,
  SPIRO_STATUS_JSON = 12,
  SPIRO_STATUS_BUFFER_TOO_SMALL = 13,
  SPIRO_STATUS_PANIC = 14,
} SpiroStatus;

/**
 * Opaque fitted model loaded from a checkpoint.
 */
typedef struct SpiroModel SpiroModel;

typedef struct SpiroSummary {
  double fev1_l;
  double fvc_l;
  double pef_lps;
  double fef25_lps;
  double fef50_lps;
  double fef75_lps;
  double ratio;
} SpiroSummary;

typedef struct SpiroDemographics {
  uint32_t age;
  /**
   * 1 = male, 0 = female.
   */
  uint8_t sex;
  /**
   * 1 = ever smoker.
   */
  uint8_t smoking;
  uint32_t height_cm;
} SpiroDemographics;

typedef struct SpiroPrediction {
  double probability;
  double logit;
  /**
   * NaN unless demographics were supplied.
   */
  double fused_probability;
} SpiroPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version string, static and NUL-terminated.
 */
const char *spiro_version(void);

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length plus one.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t spiro_last_error(char *buf, size_t cap);

/**
 * Classical summary measures of a volume-time blow sampled every 10 ms.
 *
 * # Safety
 * `volume_ml` must point to `n` values; `out` must be writable.
 */
enum SpiroStatus spiro_summary_from_volume(const uint32_t *volume_ml,
                                           size_t n,
                                           struct SpiroSummary *out);

/**
 * Load a checkpoint. On success `*out` owns a handle for [`spiro_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SpiroStatus spiro_model_load(const char *path, struct SpiroModel **out);

/**
 * Release a model handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`spiro_model_load`] and not be used afterwards.
 */
void spiro_model_free(struct SpiroModel *model);

/**
 * Number of patches in the model's input grid, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t spiro_model_num_patches(const struct SpiroModel *model);

/**
 * Predict from a raw blow; `demo` may be null, in which case `fused_probability` is NaN.
 *
 * # Safety
 * `volume_ml` must point to `n` values; `demo` must be null or valid; `out` writable.
 */
enum SpiroStatus spiro_model_predict_blow(const struct SpiroModel *model,
                                          const uint32_t *volume_ml,
                                          size_t n,
                                          const struct SpiroDemographics *demo,
                                          struct SpiroPrediction *out);

/**
 * Per-patch CLS-attention importance for a raw blow. `importance` receives
 * `spiro_model_num_patches` values; pad patches get 0.
 *
 * # Safety
 * `importance` must hold `cap` doubles; the two out-pointers must be writable.
 */
enum SpiroStatus spiro_model_attention(const struct SpiroModel *model,
                                       const uint32_t *volume_ml,
                                       size_t n,
                                       double *importance,
                                       size_t cap,
                                       size_t *n_patches,
                                       size_t *most_important_patch);

/**
 * Exact ROC-AUC with midrank ties; labels must be 0 or 1 and include both.
 *
 * # Safety
 * `scores` and `labels` must each point to `n` values; `out` writable.
 */
enum SpiroStatus spiro_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPIRO_H */
