#ifndef EVCC_H
#define EVCC_H

/* Generated by cbindgen from evcc-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum EvccStatus {
  EVCC_STATUS_OK = 0,
  EVCC_STATUS_NULL_POINTER = 1,
  EVCC_STATUS_INVALID_UTF8 = 2,
  EVCC_STATUS_CONFIG_ERROR = 3,
  EVCC_STATUS_DIMENSION_ERROR = 4,
  EVCC_STATUS_ARGUMENT_ERROR = 5,
  EVCC_STATUS_FORMAT_ERROR = 6,
  EVCC_STATUS_NON_FINITE = 7,
  EVCC_STATUS_NAN_ABORT = 8,
  EVCC_STATUS_GRAD_CHECK_FAILED = 9,
  EVCC_STATUS_IO_ERROR = 10,
  EVCC_STATUS_PANIC = 11,
} EvccStatus;

/**
 * Opaque run configuration handle.
 */
typedef struct EvccConfig EvccConfig;

/**
 * Opaque trained-model handle (single precision).
 */
typedef struct EvccModel EvccModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread. Never free it.
 */
const char *evcc_last_error_message(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must have been returned by an evcc function and not freed before.
 */
void evcc_string_free(char *s);

/**
 * New configuration with default values. Free with `evcc_config_free`.
 */
struct EvccConfig *evcc_config_new(void);

/**
 * Parse a config from `key=value` lines. Returns null on error (see
 * `evcc_last_error_message`).
 *
 * # Safety
 * `text` must be a valid NUL-terminated string.
 */
struct EvccConfig *evcc_config_parse(const char *text);

/**
 * Apply one `key=value` override.
 *
 * # Safety
 * `cfg` must be a live handle; `key`/`value` valid NUL-terminated strings.
 */
enum EvccStatus evcc_config_set(struct EvccConfig *cfg, const char *key, const char *value);

/**
 * Canonical echo of every resolved key, as a newly allocated string.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
char *evcc_config_to_text(const struct EvccConfig *cfg);

/**
 * # Safety
 * `cfg` must come from `evcc_config_new`/`evcc_config_parse`, freed once.
 */
void evcc_config_free(struct EvccConfig *cfg);

/**
 * Build a freshly initialized model from the config (seeded by the
 * config's seed). Returns null on error.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
struct EvccModel *evcc_model_new(const struct EvccConfig *cfg);

/**
 * # Safety
 * `model` must come from a model constructor, freed once.
 */
void evcc_model_free(struct EvccModel *model);

/**
 * Total parameter scalars (trainable only when `trainable_only != 0`).
 *
 * # Safety
 * `model` must be a live handle.
 */
uint64_t evcc_model_param_count(const struct EvccModel *model, int32_t trainable_only);

/**
 * Save model parameters to an EVCC checkpoint file.
 *
 * # Safety
 * `model` must be a live handle, `path` a valid NUL-terminated string.
 */
enum EvccStatus evcc_model_save(const struct EvccModel *model, const char *path);

/**
 * Build a model from the config and load parameters from a checkpoint.
 * Returns null on error.
 *
 * # Safety
 * `cfg` must be a live handle, `path` a valid NUL-terminated string.
 */
struct EvccModel *evcc_model_load(const struct EvccConfig *cfg, const char *path);

/**
 * Forward a batch of images and write per-sample class logits.
 *
 * `images` is row-major [batch, 3, image_size, image_size]; `logits_out`
 * must hold `batch * n_classes` floats. When `pi_out` is non-null it must
 * hold `batch * 3` floats and receives the final routing weights (zeros
 * for the baseline architecture).
 *
 * # Safety
 * Pointers must be valid for the documented lengths.
 */
enum EvccStatus evcc_model_predict(const struct EvccModel *model,
                                   const float *images,
                                   uintptr_t batch,
                                   float *logits_out,
                                   float *pi_out);

/**
 * Run the full training loop into `out_dir` (config echo, metrics log,
 * checkpoint), writing final train/test accuracy to the out parameters.
 *
 * # Safety
 * `cfg` must be a live handle, `out_dir` a valid NUL-terminated string,
 * and the accuracy pointers either null or valid.
 */
enum EvccStatus evcc_train_run(const struct EvccConfig *cfg,
                               const char *out_dir,
                               double *train_acc_out,
                               double *test_acc_out);

/**
 * Machine-readable FLOP report (key=value lines) for the configuration.
 * Returns null on error; free with `evcc_string_free`.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
char *evcc_flop_report_kv(const struct EvccConfig *cfg);

/**
 * Attention-product MACs 2*Nq*Nk*d of one cross-attention call.
 */
uint64_t evcc_cross_attention_product_macs(uint64_t nq, uint64_t nk, uint64_t d, uint64_t heads);

/**
 * Exact and ideal pruned/unpruned cross-attention ratios.
 *
 * # Safety
 * Output pointers must be null or valid.
 */
enum EvccStatus evcc_pruning_reduction(uint64_t n_v,
                                       uint64_t n_c,
                                       uint64_t d,
                                       uint64_t r,
                                       uint64_t n_min,
                                       double *exact_ratio_out,
                                       double *ideal_ratio_out);

/**
 * Gradient-check the configured model in double precision. Returns Ok and
 * writes the max relative error when every group passes;
 * `EVCC_STATUS_GRAD_CHECK_FAILED` otherwise.
 *
 * # Safety
 * `cfg` must be a live handle; `max_rel_err_out` null or valid.
 */
enum EvccStatus evcc_gradcheck_run(const struct EvccConfig *cfg,
                                   double h,
                                   double tol,
                                   double *max_rel_err_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVCC_H */
