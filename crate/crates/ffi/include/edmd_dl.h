#ifndef EDMD_DL_H
#define EDMD_DL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EdmdStatus {
  EDMD_STATUS_OK = 0,
  EDMD_STATUS_NULL_POINTER = 1,
  EDMD_STATUS_INVALID_ARGUMENT = 2,
  EDMD_STATUS_IO = 3,
  EDMD_STATUS_NUMERICAL = 4,
  EDMD_STATUS_BUFFER_TOO_SMALL = 5,
  EDMD_STATUS_PANIC = 6,
} EdmdStatus;

/**
 * Opaque snapshot dataset.
 */
typedef struct EdmdDataset EdmdDataset;

/**
 * Opaque trained Koopman model.
 */
typedef struct EdmdModel EdmdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *edmd_version(void);

/**
 * Message for the last failed call on this thread. Valid until the next failing call.
 */
const char *edmd_last_error_message(void);

/**
 * Simulates the default Duffing oscillator from uniform random initial conditions.
 *
 * # Safety
 * `out` must be a valid pointer to write the new handle to.
 */
enum EdmdStatus edmd_dataset_generate_duffing(size_t trajectories,
                                              size_t steps,
                                              uint64_t seed,
                                              struct EdmdDataset **out);

/**
 * Simulates the Kuramoto–Sivashinsky equation on `nx` grid points.
 * `substeps == 0` selects the stable substep count automatically.
 *
 * # Safety
 * `out` must be a valid pointer to write the new handle to.
 */
enum EdmdStatus edmd_dataset_generate_ks(size_t nx,
                                         size_t trajectories,
                                         size_t steps,
                                         size_t substeps,
                                         uint64_t seed,
                                         struct EdmdDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EdmdStatus edmd_dataset_load(const char *path, struct EdmdDataset **out);

/**
 * # Safety
 * `ds` must be a live dataset handle and `path` a NUL-terminated string.
 */
enum EdmdStatus edmd_dataset_save(const struct EdmdDataset *ds, const char *path);

/**
 * State dimension and number of transition pairs.
 *
 * # Safety
 * `ds` must be a live dataset handle; the outputs must be valid pointers.
 */
enum EdmdStatus edmd_dataset_shape(const struct EdmdDataset *ds, size_t *state_dim, size_t *pairs);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void edmd_dataset_free(struct EdmdDataset *ds);

/**
 * Trains a dictionary on `ds` using a TOML configuration document
 * (same schema as the command-line `--config` file). A null config uses defaults.
 *
 * # Safety
 * `ds` must be a live dataset handle, `config_toml` null or NUL-terminated,
 * and `out` a valid pointer.
 */
enum EdmdStatus edmd_train(const struct EdmdDataset *ds,
                           const char *config_toml,
                           struct EdmdModel **out);

/**
 * Loads a `model.json` written by `edmd-dl train` or [`edmd_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EdmdStatus edmd_model_load(const char *path, struct EdmdModel **out);

/**
 * # Safety
 * `model` must be a live model handle and `path` a NUL-terminated string.
 */
enum EdmdStatus edmd_model_save(const struct EdmdModel *model, const char *path);

/**
 * State dimension `d` and dictionary size `M`.
 *
 * # Safety
 * `model` must be a live model handle; the outputs must be valid pointers.
 */
enum EdmdStatus edmd_model_shape(const struct EdmdModel *model,
                                 size_t *state_dim,
                                 size_t *dictionary_size);

/**
 * Predicts `steps` steps from `x0` (length `d`). Writes `(steps + 1) * d`
 * values row by row; the first row is `x0` reconstructed through the modes.
 *
 * # Safety
 * `model` must be a live model handle, `x0` must point to `d` values and
 * `out` to `out_len` writable values.
 */
enum EdmdStatus edmd_model_predict(const struct EdmdModel *model,
                                   const double *x0,
                                   size_t d,
                                   size_t steps,
                                   double *out,
                                   size_t out_len);

/**
 * Koopman eigenvalues as separate real and imaginary arrays of length `M`.
 *
 * # Safety
 * `model` must be a live model handle; `re` and `im` must each point to `len` writable values.
 */
enum EdmdStatus edmd_model_eigenvalues(const struct EdmdModel *model,
                                       double *re,
                                       double *im,
                                       size_t len);

/**
 * Eigenfunction values at `n` points (`xs` holds `n * d` values, one point per row).
 * Writes `n * M` values per output array, one point per row.
 *
 * # Safety
 * `model` must be a live model handle, `xs` must point to `n * d` values and
 * `re`, `im` to `len` writable values each.
 */
enum EdmdStatus edmd_model_eigenfunctions(const struct EdmdModel *model,
                                          const double *xs,
                                          size_t n,
                                          double *re,
                                          double *im,
                                          size_t len);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void edmd_model_free(struct EdmdModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDMD_DL_H */
