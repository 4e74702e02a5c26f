#ifndef QUERYMARK_H
#define QUERYMARK_H

/* Generated by cbindgen from querymark-ffi. Regenerated on every crate build; do not edit by hand. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Status code returned by every fallible entry point. Anything other than
 * `QM_OK` leaves a description in `qm_last_error`.
 */
typedef enum qm_status {
  QM_OK = 0,
  /**
   * A required pointer argument was null.
   */
  QM_NULL_ARGUMENT = 1,
  /**
   * Arguments were non-null but unusable (bad dimensions, bad UTF-8,
   * malformed or mismatched inputs).
   */
  QM_INVALID_ARGUMENT = 2,
  /**
   * The filesystem or the stored artifact format failed us.
   */
  QM_IO_ERROR = 3,
  /**
   * The evidence does not fit together (wrong scheme, wrong signature).
   */
  QM_VERIFICATION_ERROR = 4,
  /**
   * Unexpected internal failure, including caught panics.
   */
  QM_INTERNAL_ERROR = 5,
} qm_status;

/**
 * Filtered key set plus the signature it encodes.
 */
typedef struct qm_keyset qm_keyset;

/**
 * Classifier checkpoint, loadable from a model artifact directory.
 */
typedef struct qm_model qm_model;

/**
 * Class-to-bit encoding scheme tied to one model's activations.
 */
typedef struct qm_scheme qm_scheme;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, empty string after a
 * success. The pointer stays valid until the next call into this library
 * from the same thread.
 */
const char *qm_last_error(void);

/**
 * Loads a model checkpoint from a directory containing `topology.json` and
 * `weights.bin`. On success `*out` owns the handle.
 */
enum qm_status qm_model_load(const char *dir, struct qm_model **out);

/**
 * Releases a model handle. Null is a no-op.
 */
void qm_model_free(struct qm_model *model);

/**
 * Input width the model expects (pixels per example).
 */
size_t qm_model_input_dim(const struct qm_model *model);

/**
 * Number of output classes.
 */
size_t qm_model_num_classes(const struct qm_model *model);

/**
 * Classifies `rows` examples of `dim` floats each, laid out row-major in
 * `pixels`. Writes one class index per row into `out_classes`, which must
 * hold `rows` entries.
 */
enum qm_status qm_model_predict(const struct qm_model *model,
                                const float *pixels,
                                size_t rows,
                                size_t dim,
                                uint32_t *out_classes);

/**
 * Loads an encoding scheme from its JSON file.
 */
enum qm_status qm_scheme_load(const char *path, struct qm_scheme **out);

/**
 * Releases a scheme handle. Null is a no-op.
 */
void qm_scheme_free(struct qm_scheme *scheme);

/**
 * Loads a key set from its artifact directory.
 */
enum qm_status qm_keyset_load(const char *dir, struct qm_keyset **out);

/**
 * Releases a key set handle. Null is a no-op.
 */
void qm_keyset_free(struct qm_keyset *keys);

/**
 * Number of keys in the set.
 */
size_t qm_keyset_len(const struct qm_keyset *keys);

/**
 * Copies the signature bits the key set encodes into `out` (one byte per
 * bit, values 0 or 1). `cap` is the capacity of `out`; the true length goes
 * to `*out_len` and the call fails if it exceeds `cap`.
 */
enum qm_status qm_keyset_signature(const struct qm_keyset *keys,
                                   uint8_t *out,
                                   size_t cap,
                                   size_t *out_len);

/**
 * Queries the model with the key images and scores the decoded bits against
 * the claimed signature (`signature_len` bytes, each 0 or 1). Writes the
 * bit error rate to `*out_ber` and the exact-match verdict to
 * `*out_detection`. The key set must have been generated under `scheme` and
 * must carry the same signature that is claimed here; anything else is a
 * `QM_VERIFICATION_ERROR`.
 */
enum qm_status qm_verify(const struct qm_model *model,
                         const struct qm_keyset *keys,
                         const struct qm_scheme *scheme,
                         const uint8_t *signature,
                         size_t signature_len,
                         double *out_ber,
                         bool *out_detection);

/**
 * Signature capacity in bits for a K-symbol signature over `base` classes
 * per symbol: K * log2(base). Fails for K = 0 or base < 2.
 */
enum qm_status qm_capacity(size_t k, size_t base, double *out_bits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QUERYMARK_H */
