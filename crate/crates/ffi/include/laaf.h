#ifndef LAAF_H
#define LAAF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define LAAF_MODE_FIXED 0

#define LAAF_MODE_GAAF 1

#define LAAF_MODE_LLAAF 2

#define LAAF_MODE_NLAAF 3

#define LAAF_ACTIVATION_TANH 0

#define LAAF_ACTIVATION_SIGMOID 1

#define LAAF_ACTIVATION_RELU 2

#define LAAF_ACTIVATION_SOFTPLUS 3

typedef enum LaafStatus {
  LAAF_STATUS_OK = 0,
  // A required pointer was null.
  LAAF_STATUS_NULL = 1,
  LAAF_STATUS_INVALID_ARGUMENT = 2,
  // Non-finite values, divergence or a failed line search.
  LAAF_STATUS_NUMERICAL = 3,
  LAAF_STATUS_IO = 4,
  // An internal panic was caught.
  LAAF_STATUS_PANIC = 5,
} LaafStatus;

// Opaque network handle.
typedef struct LaafNetwork LaafNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (truncated and
// always NUL-terminated when `len > 0`). Returns the full message length in
// bytes, excluding the terminator.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t laaf_last_error(char *buf, size_t len);

// New network with Xavier-uniform weights, zero biases and slopes `1/scale`.
//
// # Safety
// `widths` must point to `n_widths` values; `out` must be writable.
enum LaafStatus laaf_network_new(const size_t *widths,
                                 size_t n_widths,
                                 uint32_t mode,
                                 uint32_t activation,
                                 double scale,
                                 uint64_t seed,
                                 struct LaafNetwork **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `net` must come from this library and not be used afterwards.
void laaf_network_free(struct LaafNetwork *net);

// Number of trainable parameters (weights, biases, slopes).
//
// # Safety
// Pointers must be valid.
enum LaafStatus laaf_network_param_count(const struct LaafNetwork *net, size_t *out);

// Input and output widths.
//
// # Safety
// Pointers must be valid.
enum LaafStatus laaf_network_dims(const struct LaafNetwork *net,
                                  size_t *input_dim,
                                  size_t *output_dim);

// Evaluates `n_points` row-major inputs into `n_points * output_dim`
// row-major outputs.
//
// # Safety
// `inputs` must hold `n_points * input_dim` values and `outputs` must have
// room for `out_len` values.
enum LaafStatus laaf_network_forward(const struct LaafNetwork *net,
                                     const double *inputs,
                                     size_t n_points,
                                     double *outputs,
                                     size_t out_len);

// Copies the flat parameter vector: per layer the row-major weights then
// the biases, followed by all slopes.
//
// # Safety
// `out` must have room for `len` values.
enum LaafStatus laaf_network_get_params(const struct LaafNetwork *net, double *out, size_t len);

// Replaces the flat parameter vector (same layout as
// [`laaf_network_get_params`]).
//
// # Safety
// `values` must hold `len` values.
enum LaafStatus laaf_network_set_params(struct LaafNetwork *net, const double *values, size_t len);

// Slope-recovery term `S(a)` of an adaptive network.
//
// # Safety
// Pointers must be valid.
enum LaafStatus laaf_network_slope_recovery(const struct LaafNetwork *net, double *out);

// Writes a JSON checkpoint that reloads bit for bit.
//
// # Safety
// `path` must be a NUL-terminated string.
enum LaafStatus laaf_network_save(const struct LaafNetwork *net, const char *path_, uint64_t seed);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum LaafStatus laaf_network_load(const char *path_, struct LaafNetwork **out);

// Ratio of N-LAAF to fixed-activation parameter counts for `widths`.
//
// # Safety
// `widths` must hold `n_widths` values; `out` must be writable.
enum LaafStatus laaf_param_count_ratio(const size_t *widths, size_t n_widths, double *out);

// Maximum absolute gap between one plain gradient step of size `eta` on
// the adaptive parameters (mapped to effective parameters) and the
// conditioned standard step, for the mean-squared loss on the given
// regression data. Needs an adaptive network with scale 1.
//
// # Safety
// `points` must hold `n_points * input_dim` values and `targets`
// `n_points * output_dim`; `out` must be writable.
enum LaafStatus laaf_verify_step_equivalence(const struct LaafNetwork *net,
                                             const double *points,
                                             const double *targets,
                                             size_t n_points,
                                             double eta,
                                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAAF_H */
