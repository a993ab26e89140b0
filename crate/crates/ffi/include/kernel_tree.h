#ifndef KERNEL_TREE_H
#define KERNEL_TREE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum KtStatus {
  KT_STATUS_OK = 0,
  KT_STATUS_NULL_POINTER = 1,
  KT_STATUS_INVALID_UTF8 = 2,
  KT_STATUS_INVALID_INPUT = 3,
  KT_STATUS_NOT_FOUND = 4,
  KT_STATUS_EXHAUSTED = 5,
  KT_STATUS_PANIC = 6,
} KtStatus;

/**
 * Opaque search tree handle.
 */
typedef struct KtTree KtTree;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread. Valid until the next call
 * into this library from the same thread. Never null.
 */
const char *kt_last_error_message(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a pointer obtained from this library and not yet freed.
 */
void kt_string_free(char *s);

/**
 * Parse a tree document.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a writable pointer.
 */
enum KtStatus kt_tree_from_json(const char *json, struct KtTree **out);

/**
 * Release a tree handle. Null is ignored.
 *
 * # Safety
 * `tree` must be null or a handle from [`kt_tree_from_json`] not yet freed.
 */
void kt_tree_free(struct KtTree *tree);

/**
 * Number of nodes, root included.
 *
 * # Safety
 * `tree` must be a live handle and `out` writable.
 */
enum KtStatus kt_tree_len(const struct KtTree *tree, size_t *out);

/**
 * Id of the best node (the root when no attempt beats it).
 *
 * # Safety
 * `tree` must be a live handle and `out` writable.
 */
enum KtStatus kt_tree_best(const struct KtTree *tree, size_t *out);

/**
 * Score of a node: runtime in ms, or infinity when it failed.
 *
 * # Safety
 * `tree` must be a live handle and `out` writable.
 */
enum KtStatus kt_tree_score(const struct KtTree *tree, size_t id, double *out);

/**
 * Serialize a tree. Free the result with [`kt_string_free`].
 *
 * # Safety
 * `tree` must be a live handle and `out` writable.
 */
enum KtStatus kt_tree_to_json(const struct KtTree *tree, char **out);

/**
 * Evaluate a candidate on the default simulated landscape. `runtime_ms`
 * receives NaN unless the candidate is correct.
 *
 * # Safety
 * `source` must be a NUL-terminated string; out pointers must be writable.
 */
enum KtStatus kt_simulate_evaluate(const char *source,
                                   bool *compiled,
                                   bool *correct,
                                   double *runtime_ms);

/**
 * Remove improve-region marker lines. Free the result with
 * [`kt_string_free`].
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` writable.
 */
enum KtStatus kt_strip_markers(const char *text, char **out);

/**
 * Number of balanced improve regions in a scaffold.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` writable.
 */
enum KtStatus kt_count_regions(const char *text, size_t *out);

/**
 * One selection step on a fresh stream seeded with `seed`.
 *
 * # Safety
 * `tree` must be a live handle; out pointers must be writable.
 */
enum KtStatus kt_policy_select(const struct KtTree *tree,
                               double epsilon,
                               size_t n_root,
                               size_t n_child,
                               uint64_t seed,
                               size_t *out_node,
                               bool *out_explored);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KERNEL_TREE_H */
