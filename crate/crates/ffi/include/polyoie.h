#ifndef POLYOIE_H
#define POLYOIE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PolyoieStatus {
  POLYOIE_STATUS_OK = 0,
  POLYOIE_STATUS_NULL_ARGUMENT = 1,
  POLYOIE_STATUS_INVALID_UTF8 = 2,
  POLYOIE_STATUS_IO = 3,
  POLYOIE_STATUS_DATA = 4,
  POLYOIE_STATUS_CONFIG = 5,
  POLYOIE_STATUS_INTERNAL = 6,
  POLYOIE_STATUS_PANIC = 7,
} PolyoieStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct PolyoieModel PolyoieModel;

/**
 * Precision, recall and F1 of one scoring call.
 */
typedef struct PolyoieScore {
  double precision;
  double recall;
  double f1;
} PolyoieScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *polyoie_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *polyoie_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PolyoieStatus polyoie_model_load(const char *path, struct PolyoieModel **out);

/**
 * # Safety
 * `model` must come from [`polyoie_model_load`] and not be used afterwards.
 */
void polyoie_model_free(struct PolyoieModel *model);

/**
 * Whether the model carries an adapter pool.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
bool polyoie_model_has_pool(const struct PolyoieModel *model);

/**
 * Extracts tuples from a whitespace-tokenized sentence. Writes a JSON
 * array of `{"pred": [s, e], "args": [[s, e], ..], "text": ".."}` to `out`,
 * to be released with [`polyoie_string_free`].
 *
 * # Safety
 * `model` must be a live handle, `sentence` NUL-terminated, `out` valid.
 */
enum PolyoieStatus polyoie_model_extract(const struct PolyoieModel *model,
                                         const char *sentence,
                                         bool use_pool,
                                         char **out);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void polyoie_string_free(char *s);

/**
 * Token-level tuple matching for one sentence. Both inputs are JSON arrays
 * of tuples, each an array of strings: the predicate, then the arguments.
 *
 * # Safety
 * Both strings must be NUL-terminated and `out` valid.
 */
enum PolyoieStatus polyoie_tuple_match(const char *predicted_json,
                                       const char *gold_json,
                                       struct PolyoieScore *out);

/**
 * Fact-synset matching for one sentence. `predicted_json` is an array of
 * `[subject, relation, object]`; `synsets_json` an array of synsets, each
 * an array of such triples with optional `[..]` groups.
 *
 * # Safety
 * Both strings must be NUL-terminated and `out` valid.
 */
enum PolyoieStatus polyoie_fact_synset_match(const char *predicted_json,
                                             const char *synsets_json,
                                             struct PolyoieScore *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* POLYOIE_H */
