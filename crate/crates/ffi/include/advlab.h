#ifndef ADVLAB_H
#define ADVLAB_H

/* Generated by cbindgen from advlab-ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AdvlabStatus {
  ADVLAB_STATUS_OK = 0,
  ADVLAB_STATUS_NULL_POINTER = 1,
  ADVLAB_STATUS_INVALID_ARGUMENT = 2,
  ADVLAB_STATUS_SHAPE_MISMATCH = 3,
  ADVLAB_STATUS_NON_FINITE = 4,
  ADVLAB_STATUS_IO = 5,
  ADVLAB_STATUS_CHECKSUM_MISMATCH = 6,
  ADVLAB_STATUS_UNSUPPORTED_VERSION = 7,
  ADVLAB_STATUS_CORRUPT_CHECKPOINT = 8,
  ADVLAB_STATUS_NUMERICAL = 9,
  ADVLAB_STATUS_PANIC = 10,
} AdvlabStatus;

/**
 * Labelled dataset of flat input vectors.
 */
typedef struct AdvlabDataset AdvlabDataset;

/**
 * Trained or freshly initialised model parameters.
 */
typedef struct AdvlabParams AdvlabParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *advlab_last_error_message(void);

/**
 * Static name of a status code.
 */
const char *advlab_status_name(enum AdvlabStatus status);

/**
 * Generalisation bound for the given constants.
 *
 * # Safety
 * `out` must be a valid pointer to a `double`.
 */
enum AdvlabStatus advlab_theorem_bound(double beta,
                                       double loss_bound,
                                       size_t dim,
                                       double epsilon,
                                       size_t m,
                                       double eld,
                                       double tau,
                                       double *out);

/**
 * Initialises an MLP with layer widths `widths[0..n_widths]`.
 *
 * # Safety
 * `widths` must point to `n_widths` values; `out` must be writable.
 */
enum AdvlabStatus advlab_params_new_mlp(const size_t *widths,
                                        size_t n_widths,
                                        uint64_t seed,
                                        struct AdvlabParams **out);

/**
 * Initialises the small CNN over `channels x height x width` inputs.
 *
 * # Safety
 * `out` must be writable.
 */
enum AdvlabStatus advlab_params_new_small_cnn(size_t channels,
                                              size_t height,
                                              size_t width,
                                              size_t classes,
                                              uint64_t seed,
                                              struct AdvlabParams **out);

/**
 * # Safety
 * `params` must be null or a handle from this library not yet freed.
 */
void advlab_params_free(struct AdvlabParams *params);

/**
 * Number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `params` must be null or a live handle.
 */
size_t advlab_params_num_params(const struct AdvlabParams *params);

/**
 * Flattened input length, or 0 for a null handle.
 *
 * # Safety
 * `params` must be null or a live handle.
 */
size_t advlab_params_input_dim(const struct AdvlabParams *params);

/**
 * Predicted class of one input.
 *
 * # Safety
 * `x` must point to `len` values; `out_label` must be writable.
 */
enum AdvlabStatus advlab_params_predict(const struct AdvlabParams *params,
                                        const double *x,
                                        size_t len,
                                        size_t *out_label);

/**
 * Cross-entropy loss of one labelled input.
 *
 * # Safety
 * `x` must point to `len` values; `out` must be writable.
 */
enum AdvlabStatus advlab_params_loss(const struct AdvlabParams *params,
                                     const double *x,
                                     size_t len,
                                     size_t label,
                                     double *out);

/**
 * `steps` PGD steps from the clean point; writes the adversarial input to
 * `out[0..len]`.
 *
 * # Safety
 * `x` must point to `len` readable values and `out` to `len` writable values.
 */
enum AdvlabStatus advlab_pgd(const struct AdvlabParams *params,
                             const double *x,
                             size_t len,
                             size_t label,
                             double epsilon,
                             double step_size,
                             size_t steps,
                             double *out);

/**
 * Monte Carlo local dispersion of the PGD operator at one input, with its
 * standard error.
 *
 * # Safety
 * `x` must point to `len` values; both outputs must be writable.
 */
enum AdvlabStatus advlab_local_dispersion(const struct AdvlabParams *params,
                                          const double *x,
                                          size_t len,
                                          size_t label,
                                          double epsilon,
                                          double step_size,
                                          size_t steps,
                                          size_t n_pairs,
                                          uint64_t seed,
                                          double *out_value,
                                          double *out_std_error);

/**
 * Dataset from `n` row-major inputs of length `dim` and their labels.
 *
 * # Safety
 * `inputs` must point to `n * dim` values, `labels` to `n` values.
 */
enum AdvlabStatus advlab_dataset_new(const double *inputs,
                                     size_t n,
                                     size_t dim,
                                     const size_t *labels,
                                     size_t classes,
                                     struct AdvlabDataset **out);

/**
 * Gaussian blobs on a lattice in `[0, 1]^dim`.
 *
 * # Safety
 * `out` must be writable.
 */
enum AdvlabStatus advlab_dataset_blobs(size_t dim,
                                       size_t classes,
                                       size_t n_per_class,
                                       double separation,
                                       double spread,
                                       uint64_t seed,
                                       struct AdvlabDataset **out);

/**
 * # Safety
 * `dataset` must be null or a handle from this library not yet freed.
 */
void advlab_dataset_free(struct AdvlabDataset *dataset);

/**
 * Number of examples, or 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t advlab_dataset_len(const struct AdvlabDataset *dataset);

/**
 * PGD adversarial training of an MLP; `epsilon = 0` is standard training.
 *
 * # Safety
 * `widths` must point to `n_widths` values; `out` must be writable.
 */
enum AdvlabStatus advlab_pgd_at_train_mlp(const size_t *widths,
                                          size_t n_widths,
                                          const struct AdvlabDataset *dataset,
                                          size_t epochs,
                                          size_t batch_size,
                                          double learning_rate,
                                          double epsilon,
                                          double step_size,
                                          size_t steps,
                                          uint64_t seed,
                                          struct AdvlabParams **out);

/**
 * Clean and robust error of `params` on `dataset`.
 *
 * # Safety
 * Both outputs must be writable.
 */
enum AdvlabStatus advlab_eval_errors(const struct AdvlabParams *params,
                                     const struct AdvlabDataset *dataset,
                                     double epsilon,
                                     double step_size,
                                     size_t steps,
                                     uint64_t seed,
                                     double *out_standard,
                                     double *out_robust);

/**
 * Writes `params` as the checkpoint at epoch `t`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string.
 */
enum AdvlabStatus advlab_checkpoint_save(const struct AdvlabParams *params,
                                         size_t t,
                                         const char *path);

/**
 * Loads a checkpoint, verifying its checksum.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; outputs must be writable.
 */
enum AdvlabStatus advlab_checkpoint_load(const char *path,
                                         struct AdvlabParams **out_params,
                                         size_t *out_t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVLAB_H */
