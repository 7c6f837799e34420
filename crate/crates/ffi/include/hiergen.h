#ifndef HIERGEN_H
#define HIERGEN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values 2 to 4 match the CLI exit codes.
 */
typedef enum HgStatus {
  HG_STATUS_OK = 0,
  HG_STATUS_NULL_ARGUMENT = 1,
  HG_STATUS_CONFIG = 2,
  HG_STATUS_DATA = 3,
  HG_STATUS_RUNTIME = 4,
  HG_STATUS_INVALID_UTF8 = 5,
  HG_STATUS_PANIC = 6,
} HgStatus;

/**
 * Opaque handle: a checkpoint with its tokenizer and behavior schema.
 */
typedef struct HgModel HgModel;

/**
 * One past interaction. Consecutive entries with the same `session` value
 * form one session; sessions must appear in chronological order.
 */
typedef struct HgInteraction {
  uint32_t item;
  uint16_t behavior;
  uint32_t session;
  int64_t timestamp;
} HgInteraction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *hg_version(void);

/**
 * Message of the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *hg_last_error_message(void);

/**
 * Loads a checkpoint, its tokenizer (JSON as written by the tokenize stage)
 * and a behavior schema (TOML). A null `schema_path` selects the built-in
 * short-video schema. On success `*out` owns a handle to release with
 * [`hg_model_free`].
 *
 * # Safety
 * Path arguments must be null or nul-terminated strings; `out` must be
 * writable.
 */
enum HgStatus hg_model_open(const char *checkpoint_path,
                            const char *tokenizer_path,
                            const char *schema_path,
                            struct HgModel **out);

/**
 * Releases a handle from [`hg_model_open`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void hg_model_free(struct HgModel *model);

/**
 * Number of items the model can generate or score.
 *
 * # Safety
 * `model` must be a live handle or null; `out` must be writable.
 */
enum HgStatus hg_model_num_items(const struct HgModel *model, size_t *out);

/**
 * Generates up to `capacity` items for the next `behavior` after `history`
 * with constrained beam search. Items go to `out_items` and their
 * sequence log-probabilities to `out_scores` (may be null), best first;
 * `*out_len` receives the count. Needs a generative checkpoint.
 *
 * # Safety
 * `history` must point to `history_len` entries; `out_items` and a non-null
 * `out_scores` must have room for `capacity` entries.
 */
enum HgStatus hg_recommend(const struct HgModel *model,
                           const struct HgInteraction *history,
                           size_t history_len,
                           uint16_t behavior,
                           size_t beam,
                           uint32_t *out_items,
                           double *out_scores,
                           size_t capacity,
                           size_t *out_len);

/**
 * Probability that each candidate item receives `behavior` after
 * `history`, written to `out_scores`. Needs a ranking checkpoint.
 *
 * # Safety
 * `history` must point to `history_len` entries, `candidates` and
 * `out_scores` to `num_candidates` entries.
 */
enum HgStatus hg_rank(const struct HgModel *model,
                      const struct HgInteraction *history,
                      size_t history_len,
                      const uint32_t *candidates,
                      size_t num_candidates,
                      uint16_t behavior,
                      double *out_scores);

/**
 * Area under the ROC curve of `scores` against 0/1 `labels`, ties counted
 * as one half.
 *
 * # Safety
 * `scores` and `labels` must point to `len` entries; `out` must be writable.
 */
enum HgStatus hg_auroc(const double *scores, const uint8_t *labels, size_t len, double *out);

/**
 * NDCG@k of a ranked item list against a target set. Fails with
 * `HG_STATUS_DATA` when the target set is empty or `k` is zero.
 *
 * # Safety
 * `ranked` and `targets` must point to `ranked_len` and `targets_len`
 * entries; `out` must be writable.
 */
enum HgStatus hg_ndcg_at_k(const uint32_t *ranked,
                           size_t ranked_len,
                           const uint32_t *targets,
                           size_t targets_len,
                           size_t k,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HIERGEN_H */
