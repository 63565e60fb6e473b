#ifndef APE_FFI_H
#define APE_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

#define APE_MODE_SEQUENTIAL 0

#define APE_MODE_PARALLEL 1

#define APE_MODE_APE 2

#define APE_SCALING_AGGREGATE 0

#define APE_SCALING_PER_CONTEXT 1

#define APE_ROLE_PREFIX 0

#define APE_ROLE_CONTEXT 1

#define APE_COUNT_ORDERED_PREDECESSORS 0

#define APE_COUNT_FULL_SEQUENCES 1

typedef enum ApeStatus {
  APE_STATUS_OK = 0,
  APE_STATUS_NULL_POINTER = 1,
  APE_STATUS_INVALID_ARGUMENT = 2,
  APE_STATUS_NOT_FOUND = 3,
  APE_STATUS_FORMAT = 4,
  APE_STATUS_NUMERIC = 5,
  APE_STATUS_IO = 6,
  APE_STATUS_PANIC = 7,
} ApeStatus;

/**
 * Opaque model handle.
 */
typedef struct ApeModel ApeModel;

/**
 * Opaque KV segment handle with its cache identity.
 */
typedef struct ApeSegment ApeSegment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length excluding the NUL.
 */
size_t ape_last_error(char *buf, size_t cap);

/**
 * Builds a toy model; `init_std <= 0` selects the default.
 */
enum ApeStatus ape_model_new(size_t n_layers,
                             size_t n_heads,
                             size_t head_dim,
                             uint64_t seed,
                             float init_std,
                             struct ApeModel **out_model);

void ape_model_free(struct ApeModel *model);

enum ApeStatus ape_model_checksum(const struct ApeModel *model, uint64_t *out_checksum);

/**
 * Encodes `tokens` after an optional prefix segment (which may be null).
 */
enum ApeStatus ape_encode_segment(const struct ApeModel *model,
                                  const uint8_t *tokens,
                                  size_t n_tokens,
                                  uint32_t role_code,
                                  const struct ApeSegment *prefix,
                                  struct ApeSegment **out_segment);

void ape_segment_free(struct ApeSegment *segment);

/**
 * Token count, first absolute position, and content id of a segment.
 */
enum ApeStatus ape_segment_info(const struct ApeSegment *segment,
                                size_t *out_seq_len,
                                size_t *out_position_offset,
                                uint64_t *out_id);

enum ApeStatus ape_segment_save(const struct ApeSegment *segment, const char *file);

/**
 * Loads a persisted segment; fails with `APE_STATUS_FORMAT` if it was built
 * by a different model.
 */
enum ApeStatus ape_segment_load(const struct ApeModel *model,
                                const char *file,
                                struct ApeSegment **out_segment);

/**
 * Greedy decoding of `query` over cached segments. Writes up to
 * `max_new` tokens to `out_tokens` (capacity `max_new`) and the count to
 * `out_len`. `prefix` may be null; `contexts` may be null when `n_contexts`
 * is 0.
 */
enum ApeStatus ape_decode(const struct ApeModel *model,
                          const uint8_t *query,
                          size_t n_query,
                          const struct ApeSegment *prefix,
                          const struct ApeSegment *const *contexts,
                          size_t n_contexts,
                          uint32_t mode_code,
                          double temperature,
                          double scale,
                          uint32_t scaling_code,
                          size_t max_new,
                          uint8_t *out_tokens,
                          size_t *out_len);

/**
 * Numerically stable `log Σ exp(values)`.
 */
enum ApeStatus ape_logsumexp(const double *values, size_t n, double *out_value);

/**
 * Hit rates for all `k`-subsets of `n` unit-length contexts under `budget`.
 */
enum ApeStatus ape_cache_hit_rates(size_t n_contexts,
                                   size_t retrieve_k,
                                   uint64_t budget,
                                   double *out_ape_rate,
                                   double *out_prefix_rate);

/**
 * Bytes needed to cache every order-dependent KV state of `chunks` chunks.
 * Fails with `APE_STATUS_NUMERIC` if the count exceeds 64 bits.
 */
enum ApeStatus ape_permutation_cache_bytes(uint64_t chunks,
                                           uint64_t tokens_per_chunk,
                                           uint64_t layers,
                                           uint64_t kv_heads,
                                           uint64_t head_dim,
                                           uint64_t bytes_per_elem,
                                           uint32_t counting,
                                           uint64_t *out_bytes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APE_FFI_H */
