#ifndef ADMTREE_H
#define ADMTREE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AdmtStatus {
  ADMT_STATUS_OK = 0,
  ADMT_STATUS_NULL_ARGUMENT = 1,
  ADMT_STATUS_INVALID_ARGUMENT = 2,
  ADMT_STATUS_IO = 3,
  ADMT_STATUS_FORMAT = 4,
  ADMT_STATUS_STATE = 5,
  ADMT_STATUS_BUFFER_TOO_SMALL = 6,
  ADMT_STATUS_INTERNAL = 7,
} AdmtStatus;

/**
 * A loaded checkpoint.
 */
typedef struct AdmtModel AdmtModel;

/**
 * A compression session bound to no particular model.
 */
typedef struct AdmtSession AdmtSession;

/**
 * Planning settings for [`admt_compress`].
 */
typedef struct AdmtScoring {
  double tau;
  size_t segment_len;
  double lambda_ent;
} AdmtScoring;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *admt_last_error_message(void);

/**
 * Default planning settings.
 */
struct AdmtScoring admt_scoring_default(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a writable pointer.
 */
enum AdmtStatus admt_model_load(const char *path, struct AdmtModel **out);

/**
 * # Safety
 * `model` must come from [`admt_model_load`] and not be used afterwards.
 */
void admt_model_free(struct AdmtModel *model);

/**
 * Plans and compresses `len` bytes into a new sealed session.
 *
 * # Safety
 * `model` must be a live handle, `bytes` must point at `len` readable
 * bytes and `out` must be writable.
 */
enum AdmtStatus admt_compress(const struct AdmtModel *model,
                              const uint8_t *bytes,
                              size_t len,
                              struct AdmtScoring scoring,
                              struct AdmtSession **out);

/**
 * Compresses another turn onto the session's tree. On failure the session
 * is left as it was.
 *
 * # Safety
 * Handles must be live; `bytes` must point at `len` readable bytes.
 */
enum AdmtStatus admt_session_append_turn(struct AdmtSession *session,
                                         const struct AdmtModel *model,
                                         const uint8_t *bytes,
                                         size_t len);

/**
 * Greedy continuation of `prompt`. A `keep_fraction` of 0 keeps every
 * node; other values must lie in (0, 1]. Writes up to `out_cap`
 * bytes and the count to `out_len`.
 *
 * # Safety
 * Handles must be live, `prompt` readable for `prompt_len` bytes, `out`
 * writable for `out_cap` bytes and `out_len` writable.
 */
enum AdmtStatus admt_generate(const struct AdmtSession *session,
                              const struct AdmtModel *model,
                              const uint8_t *prompt,
                              size_t prompt_len,
                              size_t max_new,
                              double keep_fraction,
                              uint8_t *out,
                              size_t out_cap,
                              size_t *out_len);

/**
 * # Safety
 * `session` must be live and `out` writable.
 */
enum AdmtStatus admt_session_ratio(const struct AdmtSession *session, double *out);

/**
 * # Safety
 * `session` must be live and `out` writable.
 */
enum AdmtStatus admt_session_leaf_count(const struct AdmtSession *session, size_t *out);

/**
 * # Safety
 * `session` must be live and `out` writable.
 */
enum AdmtStatus admt_session_node_count(const struct AdmtSession *session, size_t *out);

/**
 * # Safety
 * `session` must be live and `path` nul-terminated.
 */
enum AdmtStatus admt_session_save(const struct AdmtSession *session, const char *path);

/**
 * # Safety
 * `path` must be nul-terminated and `out` writable.
 */
enum AdmtStatus admt_session_load(const char *path, struct AdmtSession **out);

/**
 * # Safety
 * `session` must come from this library and not be used afterwards.
 */
void admt_session_free(struct AdmtSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADMTREE_H */
