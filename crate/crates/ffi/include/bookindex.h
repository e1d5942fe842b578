#ifndef BOOKINDEX_H
#define BOOKINDEX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum BkStatus {
  BK_STATUS_OK = 0,
  /**
   * Bad configuration or argument values.
   */
  BK_STATUS_USAGE = 1,
  /**
   * Unreadable, malformed or inconsistent input data.
   */
  BK_STATUS_DATA = 2,
  /**
   * A model backend failed after retries.
   */
  BK_STATUS_GATEWAY = 3,
  /**
   * A required pointer argument was null.
   */
  BK_STATUS_NULL_POINTER = 4,
  /**
   * A string argument was not valid UTF-8.
   */
  BK_STATUS_INVALID_UTF8 = 5,
  /**
   * The engine panicked; the handle involved should be freed.
   */
  BK_STATUS_PANIC = 6,
} BkStatus;

/**
 * A loaded index together with the model gateway used to query it.
 */
typedef struct BkIndex BkIndex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Build an index from a block-list file and save it to `out_dir`.
 * `config_path` may be null, in which case defaults and `BOOKRAG_*`
 * environment variables apply. On success `*out` receives a new handle.
 * When some nodes fail extraction the index is still saved and returned
 * in `*out`, and the status is [`BkStatus::Data`].
 *
 * # Safety
 * String arguments are null or NUL-terminated; `out` is writable.
 */
enum BkStatus bk_index_build(const char *doc_path,
                             const char *out_dir,
                             const char *config_path,
                             struct BkIndex **out);

/**
 * Load a saved index directory.
 *
 * # Safety
 * String arguments are null or NUL-terminated; `out` is writable.
 */
enum BkStatus bk_index_load(const char *index_dir, const char *config_path, struct BkIndex **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `h` is null or a handle not yet freed.
 */
void bk_index_free(struct BkIndex *h);

/**
 * Entities in the knowledge graph, or 0 for a null handle.
 *
 * # Safety
 * `h` is null or a live handle.
 */
size_t bk_index_entity_count(const struct BkIndex *h);

/**
 * Nodes in the document tree, or 0 for a null handle.
 *
 * # Safety
 * `h` is null or a live handle.
 */
size_t bk_index_node_count(const struct BkIndex *h);

/**
 * Plan and answer `question`. On success `*answer` receives a string the
 * caller releases with [`bk_string_free`].
 *
 * # Safety
 * `h` is a live handle, `question` NUL-terminated, `answer` writable.
 */
enum BkStatus bk_query(const struct BkIndex *h, const char *question, char **answer);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` is null or came from this library and was not freed.
 */
void bk_string_free(char *s);

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into the library on the same thread.
 */
const char *bk_last_error(void);

/**
 * Token-level F1 between a gold and a predicted answer.
 *
 * # Safety
 * String arguments are NUL-terminated; `out` is writable.
 */
enum BkStatus bk_token_f1(const char *gold, const char *predicted, double *out);

/**
 * 1.0 when the normalized answers are equal, else 0.0.
 *
 * # Safety
 * String arguments are NUL-terminated; `out` is writable.
 */
enum BkStatus bk_exact_match(const char *gold, const char *predicted, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BOOKINDEX_H */
