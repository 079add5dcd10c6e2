#ifndef DNA_H
#define DNA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum DnaStatus {
  DNA_STATUS_OK = 0,
  DNA_STATUS_NULL_ARGUMENT = 1,
  DNA_STATUS_INVALID_UTF8 = 2,
  DNA_STATUS_CONFIG = 3,
  DNA_STATUS_MISSING_KEY = 4,
  DNA_STATUS_STRUCTURAL = 5,
  DNA_STATUS_NUMERIC = 6,
  DNA_STATUS_PARSE = 7,
  DNA_STATUS_IO = 8,
  DNA_STATUS_PANIC = 9,
} DnaStatus;

/**
 * Hierarchy spec plus training settings.
 */
typedef struct DnaConfig DnaConfig;

/**
 * A dataset with train and test splits.
 */
typedef struct DnaDataset DnaDataset;

/**
 * A trained (or loaded) query encoder with its run history.
 */
typedef struct DnaModel DnaModel;

/**
 * Clustering scores as fractions in `[0, 1]` (ARI may be negative).
 */
typedef struct DnaScores {
  double acc;
  double ari;
  double nmi;
  /**
   * kNN fine accuracy among test embeddings; NaN when unavailable.
   */
  double neighbor_acc;
} DnaScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dna_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void dna_string_free(char *s);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum DnaStatus dna_config_default(struct DnaConfig **out);

/**
 * Parse a complete `key = value` config text.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DnaStatus dna_config_parse(const char *text, struct DnaConfig **out);

/**
 * Set one key using the config-file syntax for its value.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum DnaStatus dna_config_set(struct DnaConfig *cfg, const char *key, const char *value);

/**
 * The config in file syntax; free with [`dna_string_free`].
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum DnaStatus dna_config_to_text(const struct DnaConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be NULL or a handle from this library, not yet freed.
 */
void dna_config_free(struct DnaConfig *cfg);

/**
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum DnaStatus dna_dataset_generate(const struct DnaConfig *cfg, struct DnaDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DnaStatus dna_dataset_read(const char *path, struct DnaDataset **out);

/**
 * # Safety
 * `ds` must be a live handle and `path` a NUL-terminated string.
 */
enum DnaStatus dna_dataset_write(const struct DnaDataset *ds, const char *path);

/**
 * Sample counts and input dimension; any output pointer may be NULL.
 *
 * # Safety
 * `ds` must be a live handle; non-NULL outputs must be valid pointers.
 */
enum DnaStatus dna_dataset_shape(const struct DnaDataset *ds,
                                 size_t *num_train,
                                 size_t *num_test,
                                 size_t *input_dim);

/**
 * # Safety
 * `ds` must be NULL or a handle from this library, not yet freed.
 */
void dna_dataset_free(struct DnaDataset *ds);

/**
 * Pretrain and train on `ds` with the settings in `cfg`.
 *
 * # Safety
 * `cfg` and `ds` must be live handles and `out` a valid pointer.
 */
enum DnaStatus dna_train(const struct DnaConfig *cfg,
                         const struct DnaDataset *ds,
                         struct DnaModel **out);

/**
 * Load the query encoder from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DnaStatus dna_model_load(const char *path, struct DnaModel **out);

/**
 * Write the query encoder as a checkpoint readable by [`dna_model_load`]
 * and `dna eval`.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum DnaStatus dna_model_save(const struct DnaModel *model, const char *path);

/**
 * Embedding dimension of the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum DnaStatus dna_model_embed_dim(const struct DnaModel *model, size_t *out);

/**
 * Embed `rows` row-major input vectors of width `cols` into `out`, which
 * must hold `rows * embed_dim` doubles (`out_len`).
 *
 * # Safety
 * `inputs` must point to `rows * cols` doubles and `out` to `out_len`
 * writable doubles.
 */
enum DnaStatus dna_model_embed(const struct DnaModel *model,
                               const double *inputs,
                               size_t rows,
                               size_t cols,
                               double *out,
                               size_t out_len);

/**
 * Score the model on the test split of `ds`.
 *
 * # Safety
 * `model` and `ds` must be live handles and `out` a valid pointer.
 */
enum DnaStatus dna_model_evaluate(const struct DnaModel *model,
                                  const struct DnaDataset *ds,
                                  struct DnaScores *out);

/**
 * Number of recorded training epochs (0 for a loaded checkpoint).
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum DnaStatus dna_model_num_epochs(const struct DnaModel *model, size_t *out);

/**
 * Per-epoch metrics as a JSON array; free with [`dna_string_free`].
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum DnaStatus dna_model_history_json(const struct DnaModel *model, char **out);

/**
 * # Safety
 * `model` must be NULL or a handle from this library, not yet freed.
 */
void dna_model_free(struct DnaModel *model);

/**
 * Hungarian-matched clustering accuracy of two label vectors of length `len`.
 *
 * # Safety
 * `pred` and `truth` must point to `len` values; `out` must be valid.
 */
enum DnaStatus dna_hungarian_acc(const size_t *pred, const size_t *truth, size_t len, double *out);

/**
 * Adjusted Rand index.
 *
 * # Safety
 * As for [`dna_hungarian_acc`].
 */
enum DnaStatus dna_ari(const size_t *pred, const size_t *truth, size_t len, double *out);

/**
 * Normalized mutual information (arithmetic-mean normalization).
 *
 * # Safety
 * As for [`dna_hungarian_acc`].
 */
enum DnaStatus dna_nmi(const size_t *pred, const size_t *truth, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DNA_H */
