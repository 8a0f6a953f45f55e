#ifndef MAS_H
#define MAS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MasMode {
  MAS_MODE_CAUSAL = 0,
  MAS_MODE_SEGMENT = 1,
} MasMode;

typedef enum MasStatus {
  MAS_STATUS_OK = 0,
  MAS_STATUS_NULL_POINTER = 1,
  MAS_STATUS_BAD_STRING = 2,
  MAS_STATUS_BUFFER_TOO_SMALL = 3,
  MAS_STATUS_SHAPE = 10,
  MAS_STATUS_DEGENERATE_ROW = 11,
  MAS_STATUS_NON_FINITE = 12,
  MAS_STATUS_STATE = 13,
  MAS_STATUS_CONFIG = 14,
  MAS_STATUS_SEGMENTS = 15,
  MAS_STATUS_INVALID = 16,
  MAS_STATUS_DIVERGED = 17,
  MAS_STATUS_FORMAT = 18,
  MAS_STATUS_IO = 19,
  MAS_STATUS_JSON = 20,
  MAS_STATUS_CSV = 21,
  MAS_STATUS_PANIC = 99,
} MasStatus;

/**
 * Key/value cache of a prefilled sequence.
 */
typedef struct MasCache MasCache;

/**
 * Boolean attention mask.
 */
typedef struct MasMask MasMask;

/**
 * Loaded f32 model weights.
 */
typedef struct MasModel MasModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after success.
 * The pointer stays valid until the next call on this thread.
 */
const char *mas_last_error(void);

/**
 * Static name of a status, e.g. `"E_SEGMENTS"`.
 */
const char *mas_status_name(enum MasStatus status);

/**
 * Loads `path` (MASW1) and its JSON config.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum MasStatus mas_model_load(const char *path, struct MasModel **out);

/**
 * # Safety
 * `model` is null or came from [`mas_model_load`] and is not used again.
 */
void mas_model_free(struct MasModel *model);

/**
 * Vocabulary size (the length of every logits vector); 0 for null.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t mas_model_vocab_size(const struct MasModel *model);

/**
 * Builds the `n`×`n` mask of a segment layout (`-1` = generated token).
 *
 * # Safety
 * `segment_ids` holds `n` values; `out` is writable.
 */
enum MasStatus mas_mask_build(const int32_t *segment_ids,
                              size_t n,
                              enum MasMode mode,
                              struct MasMask **out);

/**
 * # Safety
 * `mask` is null or a live handle.
 */
size_t mas_mask_size(const struct MasMask *mask);

/**
 * 1 if query `i` may attend to key `j`, 0 if masked, -1 out of range.
 *
 * # Safety
 * `mask` is null or a live handle.
 */
int32_t mas_mask_allowed(const struct MasMask *mask, size_t i, size_t j);

/**
 * # Safety
 * `mask` is null or a live handle not used again.
 */
void mas_mask_free(struct MasMask *mask);

/**
 * Prefills a prompt (segment 0 = system, others = user) and writes the
 * next-token logits to `logits` (may be null).
 *
 * # Safety
 * `tokens` and `segment_ids` hold `n` values; `logits` holds `logits_len`
 * floats; `out` is writable.
 */
enum MasStatus mas_prefill(const struct MasModel *model,
                           const uint32_t *tokens,
                           const int32_t *segment_ids,
                           size_t n,
                           enum MasMode mode,
                           float *logits,
                           size_t logits_len,
                           struct MasCache **out);

/**
 * Appends one generated token and writes its logits.
 *
 * # Safety
 * Handles are live; `logits` holds `logits_len` floats or is null.
 */
enum MasStatus mas_decode_step(struct MasCache *cache,
                               const struct MasModel *model,
                               uint32_t token,
                               float *logits,
                               size_t logits_len);

/**
 * Caches a system prompt (all tokens in segment 0) for reuse.
 *
 * # Safety
 * `tokens` holds `n` values; `out` is writable.
 */
enum MasStatus mas_snapshot_system(const struct MasModel *model,
                                   const uint32_t *tokens,
                                   size_t n,
                                   enum MasMode mode,
                                   struct MasCache **out);

/**
 * Extends a copy of `snapshot` with one user segment; the snapshot is
 * unchanged and can be resumed again.
 *
 * # Safety
 * Handles are live; `tokens` holds `n` values; `logits` holds `logits_len`
 * floats or is null; `out` is writable.
 */
enum MasStatus mas_resume_with_user(const struct MasCache *snapshot,
                                    const struct MasModel *model,
                                    const uint32_t *tokens,
                                    size_t n,
                                    int32_t segment_id,
                                    float *logits,
                                    size_t logits_len,
                                    struct MasCache **out);

/**
 * Number of cached positions; 0 for null.
 *
 * # Safety
 * `cache` is null or a live handle.
 */
size_t mas_cache_len(const struct MasCache *cache);

/**
 * # Safety
 * `cache` is live; `path` is a NUL-terminated string.
 */
enum MasStatus mas_cache_save(const struct MasCache *cache, const char *path);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum MasStatus mas_cache_load(const char *path, struct MasCache **out);

/**
 * # Safety
 * `cache` is null or a live handle not used again.
 */
void mas_cache_free(struct MasCache *cache);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAS_H */
