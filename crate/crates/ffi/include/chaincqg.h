#ifndef CHAINCQG_H
#define CHAINCQG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CqgStatus {
  CQG_STATUS_OK = 0,
  CQG_STATUS_NULL_ARGUMENT = 1,
  CQG_STATUS_INVALID_UTF8 = 2,
  CQG_STATUS_IO = 3,
  CQG_STATUS_PARSE = 4,
  CQG_STATUS_VALIDATION = 5,
  CQG_STATUS_ARGUMENT = 6,
  CQG_STATUS_CONFIG = 7,
  CQG_STATUS_CAPACITY = 8,
  CQG_STATUS_NUMERIC = 9,
  CQG_STATUS_ALIGNMENT = 10,
  CQG_STATUS_DIVERGED = 11,
  CQG_STATUS_PANIC = 12,
} CqgStatus;

/**
 * A loaded checkpoint together with its chain settings and vocabulary.
 */
typedef struct CqgModel CqgModel;

/**
 * A loaded vocabulary.
 */
typedef struct CqgVocab CqgVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *cqg_last_error(void);

/**
 * Library version as a static string.
 */
const char *cqg_version(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` is null or was returned by this library and not freed before.
 */
void cqg_string_free(char *s);

/**
 * Loads a vocabulary file.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is valid for writes.
 */
enum CqgStatus cqg_vocab_load(const char *path, struct CqgVocab **out);

/**
 * Number of tokens, specials included. Zero for a null handle.
 *
 * # Safety
 * `v` is null or a live handle from [`cqg_vocab_load`].
 */
size_t cqg_vocab_len(const struct CqgVocab *v);

/**
 * # Safety
 * `v` is null or a live handle from [`cqg_vocab_load`].
 */
void cqg_vocab_free(struct CqgVocab *v);

/**
 * Loads a checkpoint and the vocabulary it was trained with.
 *
 * # Safety
 * Both paths are NUL-terminated strings; `out` is valid for writes.
 */
enum CqgStatus cqg_model_load(const char *checkpoint,
                              const char *vocab_path,
                              struct CqgModel **out);

/**
 * # Safety
 * `m` is null or a live handle from [`cqg_model_load`].
 */
void cqg_model_free(struct CqgModel *m);

/**
 * Generates the final question of a preprocessed example (one JSON object
 * in the preprocessed-example format). `sampler_json` may be null for the
 * default sampler. Writes the question text to `out_question` and whether
 * decoding hit the length limit to `out_truncated` (may be null).
 *
 * # Safety
 * `m` is a live model handle; strings are NUL-terminated or null where
 * allowed; output pointers are valid for writes.
 */
enum CqgStatus cqg_generate(const struct CqgModel *m,
                            const char *example_json,
                            const char *sampler_json,
                            char **out_question,
                            bool *out_truncated);

/**
 * Expands one dialogue (a line of the corpus format) into sub-dialogue
 * examples, returned as JSON Lines.
 *
 * # Safety
 * `dialogue_json` is a NUL-terminated string; `out_jsonl` is valid for
 * writes.
 */
enum CqgStatus cqg_preprocess(const char *dialogue_json,
                              bool history,
                              bool highlight,
                              bool aq_order,
                              char **out_jsonl);

/**
 * Scores candidate questions against references. Both arguments are JSON
 * arrays of strings of equal length; the report comes back as JSON.
 *
 * # Safety
 * Both inputs are NUL-terminated strings; `out_report_json` is valid for
 * writes.
 */
enum CqgStatus cqg_score(const char *candidates_json,
                         const char *references_json,
                         char **out_report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHAINCQG_H */
