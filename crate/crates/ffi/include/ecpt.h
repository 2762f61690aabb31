#ifndef ECPT_H
#define ECPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EcptOutcome {
  ECPT_OUTCOME_SUCCESS = 0,
  ECPT_OUTCOME_EXECUTION_ERROR = 1,
  ECPT_OUTCOME_EMPTY_TABLE = 2,
  ECPT_OUTCOME_UNDESIRED_RESULT = 3,
} EcptOutcome;

typedef enum EcptStatus {
  ECPT_STATUS_OK = 0,
  ECPT_STATUS_NULL_POINTER = 1,
  ECPT_STATUS_INVALID_ARGUMENT = 2,
  ECPT_STATUS_INVALID_UTF8 = 3,
  ECPT_STATUS_IO = 4,
  ECPT_STATUS_PARSE = 5,
  ECPT_STATUS_DIMENSION_MISMATCH = 6,
  ECPT_STATUS_MODEL_MISMATCH = 7,
  ECPT_STATUS_SQL = 8,
  ECPT_STATUS_UNDEFINED = 9,
  ECPT_STATUS_BUFFER_TOO_SMALL = 10,
  ECPT_STATUS_PANIC = 11,
  ECPT_STATUS_OTHER = 12,
} EcptStatus;

/**
 * Loaded knowledge-base store.
 */
typedef struct EcptKb EcptKb;

/**
 * Projection head (identity or fine-tuned).
 */
typedef struct EcptProjection EcptProjection;

/**
 * Read-only SQLite runner keyed by database id.
 */
typedef struct EcptRunner EcptRunner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *ecpt_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ecpt_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EcptStatus ecpt_kb_load(const char *path, struct EcptKb **out);

/**
 * # Safety
 * `kb` must come from [`ecpt_kb_load`] and not be used afterwards. Null is a no-op.
 */
void ecpt_kb_free(struct EcptKb *kb);

/**
 * # Safety
 * `kb` must be a live handle and `out` a valid pointer.
 */
enum EcptStatus ecpt_kb_len(const struct EcptKb *kb, size_t *out);

/**
 * # Safety
 * `kb` must be a live handle and `out` a valid pointer.
 */
enum EcptStatus ecpt_kb_dimension(const struct EcptKb *kb, size_t *out);

/**
 * Top-`k` search with an already projected query (normalized here).
 * `filter_mask` selects error types by bit: bit `i` is error id `e{i+1}`;
 * zero disables filtering. Writes up to `k` ids and scores, best first,
 * and the number written to `out_count`.
 *
 * # Safety
 * `query` must hold `dim` values; `out_ids` and `out_scores` must hold `k`.
 */
enum EcptStatus ecpt_kb_search(const struct EcptKb *kb,
                               const double *query,
                               size_t dim,
                               size_t k,
                               uint32_t filter_mask,
                               uint64_t *out_ids,
                               double *out_scores,
                               size_t *out_count);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum EcptStatus ecpt_projection_identity(size_t dim, struct EcptProjection **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EcptStatus ecpt_projection_load(const char *path, struct EcptProjection **out);

/**
 * # Safety
 * `p` must come from a projection constructor and not be used afterwards.
 */
void ecpt_projection_free(struct EcptProjection *p);

/**
 * # Safety
 * `p` must be a live handle and `out` a valid pointer.
 */
enum EcptStatus ecpt_projection_dimension(const struct EcptProjection *p, size_t *out);

/**
 * Writes 1 when the projection has been trained, 0 for the identity.
 *
 * # Safety
 * `p` must be a live handle and `out` a valid pointer.
 */
enum EcptStatus ecpt_projection_trained(const struct EcptProjection *p, int32_t *out);

/**
 * `normalize(W · input)` into `output`.
 *
 * # Safety
 * `input` and `output` must each hold `dim` values.
 */
enum EcptStatus ecpt_projection_apply(const struct EcptProjection *p,
                                      const double *input,
                                      size_t dim,
                                      double *output);

/**
 * Zero `timeout_ms` or `row_cap` selects the default.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum EcptStatus ecpt_runner_new(uint64_t timeout_ms, size_t row_cap, struct EcptRunner **out);

/**
 * # Safety
 * `runner` must come from [`ecpt_runner_new`] and not be used afterwards.
 */
void ecpt_runner_free(struct EcptRunner *runner);

/**
 * # Safety
 * `runner` must be a live handle; strings must be NUL-terminated.
 */
enum EcptStatus ecpt_runner_register(struct EcptRunner *runner,
                                     const char *db_id,
                                     const char *path);

/**
 * Runs both queries and classifies the generated one against the truth.
 * Fails with `Sql` when the ground-truth query itself does not run.
 *
 * # Safety
 * `runner` must be a live handle; strings must be NUL-terminated.
 */
enum EcptStatus ecpt_runner_classify(const struct EcptRunner *runner,
                                     const char *db_id,
                                     const char *generated_sql,
                                     const char *truth_sql,
                                     enum EcptOutcome *out);

/**
 * Writes 1 when the query has a top-level ORDER BY, else 0.
 *
 * # Safety
 * `sql` must be NUL-terminated and `out` a valid pointer.
 */
enum EcptStatus ecpt_detect_order_by(const char *sql, int32_t *out);

/**
 * Parses a diagnosis reply into error ids, most likely first, written as
 * 1-based numbers (`e3` → 3). `out_count` receives the total found; fails
 * with `BufferTooSmall` if that exceeds `capacity`.
 *
 * # Safety
 * `text` must be NUL-terminated; `out_ids` must hold `capacity` bytes.
 */
enum EcptStatus ecpt_parse_diagnosis(const char *text,
                                     uint8_t *out_ids,
                                     size_t capacity,
                                     size_t *out_count);

/**
 * `max(0, ‖a−p‖² − ‖a−n‖² + margin)` on the vectors as given.
 *
 * # Safety
 * Each vector must hold `dim` values; `out` must be valid.
 */
enum EcptStatus ecpt_triplet_loss(const double *anchor,
                                  const double *positive,
                                  const double *negative,
                                  size_t dim,
                                  double margin,
                                  double *out);

/**
 * `(zero_shot + fixed) / total` in basis points (8808 = 88.08%).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum EcptStatus ecpt_execution_accuracy(uint64_t zero_shot,
                                        uint64_t fixed,
                                        uint64_t total,
                                        uint64_t *out);

/**
 * `fixed / error_cases` in basis points.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum EcptStatus ecpt_correction_accuracy(uint64_t fixed, uint64_t error_cases, uint64_t *out);

/**
 * `successful_trials / total_trials` in basis points.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum EcptStatus ecpt_hit_rate(uint64_t successful_trials, uint64_t total_trials, uint64_t *out);

/**
 * Total cost in cents for the given token counts and per-1k prices.
 *
 * # Safety
 * `out_cents` must be a valid pointer.
 */
enum EcptStatus ecpt_total_cost_cents(uint64_t prompt_tokens,
                                      uint64_t completion_tokens,
                                      double prompt_per_1k,
                                      double completion_per_1k,
                                      uint64_t *out_cents);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* ECPT_H */
