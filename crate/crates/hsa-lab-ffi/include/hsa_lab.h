#ifndef HSA_LAB_H
#define HSA_LAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirrored from the core error taxonomy.
 */
typedef enum HsaStatus {
  HsaStatusOk = 0,
  HsaStatusInvalidArgument = 1,
  HsaStatusNumeric = 2,
  HsaStatusIo = 3,
  HsaStatusNullPointer = 4,
  HsaStatusBufferTooSmall = 5,
  HsaStatusPanic = 6,
} HsaStatus;

/**
 * Synthetic tasks exposed through the C surface.
 */
typedef enum HsaTask {
  HsaTaskSniah = 0,
  HsaTaskVartrack = 1,
  HsaTaskLm = 2,
} HsaTask;

/**
 * Opaque model handle: a loaded checkpoint (config + parameters).
 */
typedef struct HsaModel HsaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a NUL-terminated static string.
 */
const char *hsa_version(void);

/**
 * Copy the most recent error message for this thread into `buf`.
 */
enum HsaStatus hsa_last_error_message(char *buf, uintptr_t cap);

/**
 * Load a checkpoint file into a new model handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum HsaStatus hsa_model_open(const char *path, struct HsaModel **out);

/**
 * Release a model handle. Passing NULL is a no-op.
 *
 * # Safety
 * `model` must be a pointer returned by `hsa_model_open`, freed once.
 */
void hsa_model_free(struct HsaModel *model);

/**
 * Write the model's config as canonical JSON.
 *
 * # Safety
 * `model` must be a live handle; `buf` must hold `cap` writable bytes.
 */
enum HsaStatus hsa_model_config_json(const struct HsaModel *model, char *buf, uintptr_t cap);

/**
 * Total trainable parameter count of the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum HsaStatus hsa_model_param_count(const struct HsaModel *model, uint64_t *out);

/**
 * Run one forward pass and write the next-token logits (vocab_size floats)
 * of the final position.
 *
 * # Safety
 * `tokens` must point to `n_tokens` ids; `logits` must hold `vocab_size`
 * floats (see the model config).
 */
enum HsaStatus hsa_model_logits(const struct HsaModel *model,
                                const uint32_t *tokens,
                                uintptr_t n_tokens,
                                float *logits);

/**
 * Validate a model config given as JSON; unknown fields are rejected.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string.
 */
enum HsaStatus hsa_config_validate_json(const char *json);

/**
 * Generate one sample deterministically from `(seed, index)` and write it
 * as a JSON line (tokens, loss mask, metadata).
 *
 * # Safety
 * `buf` must hold `cap` writable bytes.
 */
enum HsaStatus hsa_gen_sample_json(enum HsaTask task,
                                   uintptr_t length,
                                   uint64_t seed,
                                   uint64_t index,
                                   char *buf,
                                   uintptr_t cap);

/**
 * Evaluate the analytic cost model for a config (JSON) at one context
 * length and write the report row as JSON.
 *
 * # Safety
 * `config_json` must be NUL-terminated; `buf` must hold `cap` bytes.
 */
enum HsaStatus hsa_cost_report_json(const char *config_json, uint64_t n, char *buf, uintptr_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HSA_LAB_H */
