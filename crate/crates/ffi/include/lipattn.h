#ifndef LIPATTN_H
#define LIPATTN_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every exported function.
 */
typedef enum LipStatus {
  LIP_STATUS_OK = 0,
  LIP_STATUS_NULL_POINTER = 1,
  LIP_STATUS_DOMAIN = 2,
  LIP_STATUS_SHAPE = 3,
  LIP_STATUS_MASK = 4,
  LIP_STATUS_UNSUPPORTED = 5,
  LIP_STATUS_NON_FINITE = 6,
  LIP_STATUS_DOMINANCE = 7,
  LIP_STATUS_IO = 8,
  LIP_STATUS_PARSE = 9,
  LIP_STATUS_NUMERICAL = 10,
  LIP_STATUS_PANIC = 11,
} LipStatus;

typedef enum LipKind {
  LIP_KIND_DOT_PRODUCT = 0,
  LIP_KIND_L2 = 1,
} LipKind;

typedef enum LipNorm {
  LIP_NORM_TWO = 0,
  LIP_NORM_INF = 1,
} LipNorm;

/**
 * Opaque multihead attention parameters.
 */
typedef struct LipMhaParams LipMhaParams;

/**
 * Upper bound on the Lipschitz constant of tied L2 attention.
 */
typedef struct LipBound {
  double value;
  /**
   * `φ⁻¹(N − 1)`.
   */
  double phi_term;
  size_t n;
  size_t d;
  size_t h;
} LipBound;

typedef struct LipInversion {
  size_t iterations;
  /**
   * `‖y − (x + c f(x))‖_∞` at the returned point.
   */
  double residual;
  bool converged;
} LipInversion;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread.
 */
const char *lip_last_error(void);

/**
 * Parses parameters from a NUL-terminated JSON document.
 *
 * # Safety
 * `json` must be a valid C string and `out` a valid pointer.
 */
enum LipStatus lip_params_from_json(const char *json, struct LipMhaParams **out_params);

/**
 * Identity projections and `W^O = I`.
 *
 * # Safety
 * `out_params` must be a valid pointer.
 */
enum LipStatus lip_params_identity(enum LipKind kind,
                                   size_t d,
                                   size_t h,
                                   struct LipMhaParams **out_params);

/**
 * Glorot-uniform weights from a seeded generator.
 *
 * # Safety
 * `out_params` must be a valid pointer.
 */
enum LipStatus lip_params_random(enum LipKind kind,
                                 bool tied,
                                 size_t d,
                                 size_t h,
                                 uint64_t seed,
                                 struct LipMhaParams **out_params);

/**
 * Serializes parameters to JSON. Free the string with [`lip_string_free`].
 *
 * # Safety
 * `params` must come from this library and `out_json` be a valid pointer.
 */
enum LipStatus lip_params_to_json(const struct LipMhaParams *params, char **out_json);

/**
 * # Safety
 * `s` must come from [`lip_params_to_json`] or be null.
 */
void lip_string_free(char *s);

/**
 * # Safety
 * `params` must come from this library or be null, and is invalid afterwards.
 */
void lip_params_free(struct LipMhaParams *params);

/**
 * Model width `D`, or 0 for a null handle.
 *
 * # Safety
 * `params` must come from this library or be null.
 */
size_t lip_params_d_model(const struct LipMhaParams *params);

/**
 * Head count `H`, or 0 for a null handle.
 *
 * # Safety
 * `params` must come from this library or be null.
 */
size_t lip_params_num_heads(const struct LipMhaParams *params);

/**
 * Multihead attention output for an `n × D` input.
 *
 * # Safety
 * `x` and `out_y` must each hold `n · D` doubles.
 */
enum LipStatus lip_mha_forward(const struct LipMhaParams *params,
                               const double *x,
                               size_t n,
                               double *out_y);

/**
 * Operator norm of the full Jacobian at `x`.
 *
 * # Safety
 * `x` must hold `n · D` doubles and `out_norm` be a valid pointer.
 */
enum LipStatus lip_jacobian_norm(const struct LipMhaParams *params,
                                 const double *x,
                                 size_t n,
                                 enum LipNorm norm,
                                 double *out_norm);

/**
 * Closed-form upper bound for sequence length `n` (tied L2 only).
 *
 * # Safety
 * `out_bound` must be a valid pointer.
 */
enum LipStatus lip_bound(const struct LipMhaParams *params,
                         size_t n,
                         enum LipNorm norm,
                         struct LipBound *out_bound);

/**
 * `x · e^{x+1}` for `x ≥ 0`.
 *
 * # Safety
 * `out_y` must be a valid pointer.
 */
enum LipStatus lip_phi(double x, double *out_y);

/**
 * Inverse of [`lip_phi`] for `y ≥ 0`.
 *
 * # Safety
 * `out_x` must be a valid pointer.
 */
enum LipStatus lip_phi_inv(double y, double *out_x);

/**
 * Inverts `y = x + g(x)`, where `g` is the tied L2 attention rescaled to
 * Lipschitz constant `c`, by fixed-point iteration from `x = y`.
 *
 * # Safety
 * `y` and `out_x` must each hold `n · D` doubles; `out_info` may be null.
 */
enum LipStatus lip_contractive_invert(const struct LipMhaParams *params,
                                      double c,
                                      const double *y,
                                      size_t n,
                                      double tol,
                                      size_t max_iter,
                                      double *out_x,
                                      struct LipInversion *out_info);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIPATTN_H */
