#ifndef CONFAE_H
#define CONFAE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum ConfaeStatus {
  CONFAE_STATUS_OK = 0,
  CONFAE_STATUS_NULL_POINTER = 1,
  // Wrong buffer length, bad argument, or malformed input file.
  CONFAE_STATUS_INVALID_ARGUMENT = 2,
  // Singular or otherwise degenerate geometry.
  CONFAE_STATUS_DEGENERATE = 3,
  CONFAE_STATUS_NON_FINITE = 4,
  CONFAE_STATUS_IO = 5,
  CONFAE_STATUS_NUMERICAL = 6,
  // A Rust panic was caught at the boundary.
  CONFAE_STATUS_PANIC = 7,
} ConfaeStatus;

typedef enum ConfaeActivation {
  CONFAE_ACTIVATION_RELU = 0,
  // Slope 0.01 on the negative side.
  CONFAE_ACTIVATION_LEAKY_RELU = 1,
  CONFAE_ACTIVATION_TANH = 2,
  CONFAE_ACTIVATION_IDENTITY = 3,
} ConfaeActivation;

// Which network of a training checkpoint to load.
typedef enum ConfaeNetRole {
  CONFAE_NET_ROLE_ENCODER = 0,
  CONFAE_NET_ROLE_DECODER = 1,
} ConfaeNetRole;

// Opaque network handle.
typedef struct ConfaeMlp ConfaeMlp;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `cap`) and returns the full message length in bytes.
// An empty message means the last call succeeded.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t confae_last_error(char *buf, size_t cap);

// Fresh network with layer sizes `dims[0..n_dims]` and one activation per
// layer (`n_dims - 1` entries).
//
// # Safety
// `dims` and `activations` must point to `n_dims` and `n_dims - 1` readable
// elements; `out` must be writable.
enum ConfaeStatus confae_mlp_init(const size_t *dims,
                                  size_t n_dims,
                                  const enum ConfaeActivation *activations,
                                  uint64_t seed,
                                  struct ConfaeMlp **out);

// Loads a network saved with `confae_mlp_save`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ConfaeStatus confae_mlp_load(const char *path, struct ConfaeMlp **out);

// Loads the encoder or decoder of a training checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ConfaeStatus confae_checkpoint_load(const char *path,
                                         enum ConfaeNetRole role,
                                         struct ConfaeMlp **out);

// # Safety
// `mlp` must be a live handle; `path` a NUL-terminated string.
enum ConfaeStatus confae_mlp_save(const struct ConfaeMlp *mlp, const char *path);

// Releases a handle; null is ignored.
//
// # Safety
// `mlp` must be null or a handle not freed before.
void confae_mlp_free(struct ConfaeMlp *mlp);

// Input dimension, or 0 for a null handle.
//
// # Safety
// `mlp` must be null or a live handle.
size_t confae_mlp_input_dim(const struct ConfaeMlp *mlp);

// Output dimension, or 0 for a null handle.
//
// # Safety
// `mlp` must be null or a live handle.
size_t confae_mlp_output_dim(const struct ConfaeMlp *mlp);

// # Safety
// Buffers must hold the stated number of elements.
enum ConfaeStatus confae_mlp_forward(const struct ConfaeMlp *mlp,
                                     const double *x,
                                     size_t x_len,
                                     double *y,
                                     size_t y_len);

// `J(z) v` into `out` (output dimension).
//
// # Safety
// Buffers must hold the stated number of elements.
enum ConfaeStatus confae_mlp_jvp(const struct ConfaeMlp *mlp,
                                 const double *z,
                                 size_t z_len,
                                 const double *v,
                                 size_t v_len,
                                 double *out,
                                 size_t out_len);

// `J(z)ᵀ u` into `out` (input dimension).
//
// # Safety
// Buffers must hold the stated number of elements.
enum ConfaeStatus confae_mlp_vjp(const struct ConfaeMlp *mlp,
                                 const double *z,
                                 size_t z_len,
                                 const double *u,
                                 size_t u_len,
                                 double *out,
                                 size_t out_len);

// Row-major `output_dim × input_dim` Jacobian at `z`.
//
// # Safety
// Buffers must hold the stated number of elements.
enum ConfaeStatus confae_mlp_jacobian(const struct ConfaeMlp *mlp,
                                      const double *z,
                                      size_t z_len,
                                      double *out,
                                      size_t out_len);

// Row-major `m × m` pullback metric `JᵀJ` of a decoder at `z`.
//
// # Safety
// Buffers must hold the stated number of elements.
enum ConfaeStatus confae_pullback_metric(const struct ConfaeMlp *decoder,
                                         const double *z,
                                         size_t z_len,
                                         double *out,
                                         size_t out_len);

// `Tr(JᵀJ) / m` at `z`.
//
// # Safety
// `z` must hold `z_len` elements; `out` must be writable.
enum ConfaeStatus confae_conformal_factor(const struct ConfaeMlp *decoder,
                                          const double *z,
                                          size_t z_len,
                                          double *out);

// Condition numbers of `J` and `JᵀJ` at `z`; infinite when `J` is singular.
//
// # Safety
// `z` must hold `z_len` elements; both outputs must be writable.
enum ConfaeStatus confae_condition_numbers(const struct ConfaeMlp *decoder,
                                           const double *z,
                                           size_t z_len,
                                           double *kappa_jac,
                                           double *kappa_pbm);

// Scalar curvature of the conformal field `values` sampled at `n` planar
// codes (`codes` is row-major `n × 2`), on a `k`-nearest-neighbour graph.
// A non-positive `bandwidth` selects it from the data. Each output holds
// `n` entries; `calibrated` and `interior` may be null.
//
// # Safety
// Buffers must hold the stated number of elements.
enum ConfaeStatus confae_scalar_curvature(const double *codes,
                                          size_t n,
                                          const double *values,
                                          size_t k,
                                          double bandwidth,
                                          double *raw,
                                          double *normalized,
                                          double *calibrated,
                                          uint8_t *interior);

// `n` Swiss-roll samples: row-major `n × 3` points and, when `params` is not
// null, the `n × 2` generating parameters `(ξ, η)`.
//
// # Safety
// `samples` must hold `3n` and `params` (if not null) `2n` elements.
enum ConfaeStatus confae_swiss_roll(size_t n, uint64_t seed, double *samples, double *params);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONFAE_H */
