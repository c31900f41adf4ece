#ifndef KAAMLAB_H
#define KAAMLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KaamStatus {
  KAAM_STATUS_OK = 0,
  KAAM_STATUS_NULL_POINTER = 1,
  KAAM_STATUS_INVALID_UTF8 = 2,
  KAAM_STATUS_IO = 3,
  KAAM_STATUS_CORRUPT_BUNDLE = 4,
  KAAM_STATUS_VERSION_MISMATCH = 5,
  KAAM_STATUS_INVALID_INPUT = 6,
  KAAM_STATUS_SCHEMA = 7,
  KAAM_STATUS_BUFFER_SIZE = 8,
  KAAM_STATUS_INTERNAL = 9,
  KAAM_STATUS_PANIC = 10,
} KaamStatus;

/*
 A loaded bundle with its explanation caches.
 */
typedef struct KaamModel KaamModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty if none. The
 pointer stays valid until the next failing call on the same thread.
 */
const char *kaam_last_error(void);

/*
 Library version as a static string.
 */
const char *kaam_version(void);

/*
 Loads a bundle file. The model id reported in JSON output is the file stem.

 # Safety
 `path` must be a nul-terminated string and `out` a writable pointer.
 */
enum KaamStatus kaam_model_load(const char *path, struct KaamModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from `kaam_model_load` and not be used afterwards.
 */
void kaam_model_free(struct KaamModel *model);

/*
 Number of encoded input columns expected by `kaam_model_predict_proba`.

 # Safety
 `model` must be a live handle and `out` writable.
 */
enum KaamStatus kaam_model_input_count(const struct KaamModel *model, size_t *out);

/*
 Number of classes.

 # Safety
 `model` must be a live handle and `out` writable.
 */
enum KaamStatus kaam_model_class_count(const struct KaamModel *model, size_t *out);

/*
 Class probabilities for one already-encoded row.

 # Safety
 `x` must point to `x_len` doubles and `out` to `out_len` writable doubles.
 */
enum KaamStatus kaam_model_predict_proba(const struct KaamModel *model,
                                         const double *x,
                                         size_t x_len,
                                         double *out,
                                         size_t out_len);

/*
 Prediction from raw covariates. `request_json` has the HTTP API's
 request shape (`{"covariates": {...}}`); the reply matches its body.

 # Safety
 `request_json` must be nul-terminated; `out_json` writable. Free the
 result with `kaam_string_free`.
 */
enum KaamStatus kaam_model_predict_json(const struct KaamModel *model,
                                        const char *request_json,
                                        char **out_json);

/*
 Radar, PDP curves, importance and neighbours for one patient.

 # Safety
 As `kaam_model_predict_json`.
 */
enum KaamStatus kaam_model_explain_json(const struct KaamModel *model,
                                        const char *request_json,
                                        char **out_json);

/*
 Rendered formula text; `decimals < 0` leaves coefficients unrounded.

 # Safety
 `out_text` must be writable. Free the result with `kaam_string_free`.
 */
enum KaamStatus kaam_model_formula(const struct KaamModel *model,
                                   int32_t decimals,
                                   char **out_text);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not be used afterwards.
 */
void kaam_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KAAMLAB_H */
