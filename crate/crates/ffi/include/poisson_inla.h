#ifndef POISSON_INLA_H
#define POISSON_INLA_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point.
 */
typedef enum PinlaStatus {
  PINLA_STATUS_OK = 0,
  PINLA_STATUS_NULL_POINTER = 1,
  PINLA_STATUS_VALIDATION = 2,
  PINLA_STATUS_NUMERICAL = 3,
  PINLA_STATUS_IO = 4,
  PINLA_STATUS_PANIC = 5,
} PinlaStatus;

/**
 * Hyperparameter integration strategy.
 */
typedef enum PinlaStrategy {
  PINLA_STRATEGY_GRID = 0,
  PINLA_STRATEGY_CCD = 1,
  PINLA_STRATEGY_MODE = 2,
} PinlaStrategy;

/**
 * Opaque MCMC result.
 */
typedef struct PinlaChain PinlaChain;

/**
 * Opaque observed count field.
 */
typedef struct PinlaCounts PinlaCounts;

/**
 * Opaque INLA result.
 */
typedef struct PinlaInlaFit PinlaInlaFit;

/**
 * Range recorded by the intensity transform.
 */
typedef struct PinlaRange {
  double i_min;
  double i_max;
} PinlaRange;

/**
 * INLA settings; fill with [`pinla_inla_options_default`] before editing.
 */
typedef struct PinlaInlaOptions {
  enum PinlaStrategy strategy;
  double delta_z;
  double delta_pi;
  double f0;
  double sigma2_init;
  double d_init;
  /**
   * Worker threads for point evaluation; 0 uses the global pool.
   */
  size_t workers;
} PinlaInlaOptions;

/**
 * Hyperparameter mode summary.
 */
typedef struct PinlaHyperMode {
  double sigma2;
  double d;
  double log_posterior;
  size_t iterations;
} PinlaHyperMode;

/**
 * MALA settings; fill with [`pinla_chain_options_default`] before editing.
 */
typedef struct PinlaChainOptions {
  size_t steps;
  size_t burn_in;
  double step_size;
  uint64_t seed;
  /**
   * Hyperparameters the chain is conditioned on (or starts from).
   */
  double sigma2;
  double d;
  /**
   * When true, the hyperparameters are sampled under a flat prior in log
   * coordinates every `theta_every` latent steps.
   */
  bool sample_theta;
  size_t theta_every;
} PinlaChainOptions;

/**
 * Similarity of two images. `psnr` is `+inf` for identical inputs.
 */
typedef struct PinlaMetrics {
  double mse;
  double psnr;
  double ssim;
  double c1;
  double c2;
} PinlaMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pinla_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated and
 * NUL-terminated when `cap > 0`). Returns the full message length excluding
 * the terminator, or 0 when the last call succeeded.
 *
 * # Safety
 * `buf` must be NULL or point to `cap` writable bytes.
 */
size_t pinla_last_error(char *buf, size_t cap);

/**
 * Wraps `rows * cols` row-major counts in a new handle.
 *
 * # Safety
 * `data` must point to `rows * cols` readable values; `out` must be writable.
 */
enum PinlaStatus pinla_counts_new(size_t rows,
                                  size_t cols,
                                  const uint64_t *data,
                                  struct PinlaCounts **out);

/**
 * Draws independent Poisson counts with rates `rates` (row-major) from a
 * ChaCha20 stream seeded with `seed`.
 *
 * # Safety
 * `rates` must point to `rows * cols` readable values; `out` must be writable.
 */
enum PinlaStatus pinla_counts_sample(const double *rates,
                                     size_t rows,
                                     size_t cols,
                                     uint64_t seed,
                                     struct PinlaCounts **out);

/**
 * Number of pixels in `counts`, or 0 for NULL.
 *
 * # Safety
 * `counts` must be NULL or a live handle.
 */
size_t pinla_counts_len(const struct PinlaCounts *counts);

/**
 * Copies the counts into `out`, which must hold exactly `len` values.
 *
 * # Safety
 * `counts` must be a live handle and `out` must point to `len` writable values.
 */
enum PinlaStatus pinla_counts_copy(const struct PinlaCounts *counts, uint64_t *out, size_t len);

/**
 * Releases a count handle. NULL is ignored.
 *
 * # Safety
 * `counts` must be NULL or a handle not yet freed.
 */
void pinla_counts_free(struct PinlaCounts *counts);

/**
 * Maps pixel intensities affinely onto `[lambda_min, lambda_max]`; the
 * observed range is written to `range`.
 *
 * # Safety
 * `pixels` and `out` must point to `len` values; `range` must be writable.
 */
enum PinlaStatus pinla_intensity_forward(const double *pixels,
                                         size_t len,
                                         double lambda_min,
                                         double lambda_max,
                                         double *out,
                                         struct PinlaRange *range);

/**
 * Exact inverse of [`pinla_intensity_forward`] for the given range.
 *
 * # Safety
 * `x` and `out` must point to `len` values.
 */
enum PinlaStatus pinla_intensity_inverse(const double *x,
                                         size_t len,
                                         struct PinlaRange range,
                                         double lambda_min,
                                         double lambda_max,
                                         double *out);

/**
 * Writes the default INLA settings into `opts`.
 *
 * # Safety
 * `opts` must be writable.
 */
enum PinlaStatus pinla_inla_options_default(struct PinlaInlaOptions *opts);

/**
 * Runs INLA on `counts` and returns a fit handle in `out`.
 *
 * # Safety
 * `counts` must be a live handle; `opts` readable; `out` writable.
 */
enum PinlaStatus pinla_inla_run(const struct PinlaCounts *counts,
                                const struct PinlaInlaOptions *opts,
                                struct PinlaInlaFit **out);

/**
 * Number of pixels in a fit, or 0 for NULL.
 *
 * # Safety
 * `fit` must be NULL or a live handle.
 */
size_t pinla_fit_len(const struct PinlaInlaFit *fit);

/**
 * Number of hyperparameter integration points, or 0 for NULL.
 *
 * # Safety
 * `fit` must be NULL or a live handle.
 */
size_t pinla_fit_points(const struct PinlaInlaFit *fit);

/**
 * Writes the hyperparameter mode into `out`.
 *
 * # Safety
 * `fit` must be a live handle and `out` writable.
 */
enum PinlaStatus pinla_fit_mode(const struct PinlaInlaFit *fit, struct PinlaHyperMode *out);

/**
 * Copies the posterior means into `out` (`len` must equal the pixel count).
 *
 * # Safety
 * `fit` must be a live handle and `out` must point to `len` writable values.
 */
enum PinlaStatus pinla_fit_eap(const struct PinlaInlaFit *fit, double *out, size_t len);

/**
 * Copies the posterior variances into `out`.
 *
 * # Safety
 * `fit` must be a live handle and `out` must point to `len` writable values.
 */
enum PinlaStatus pinla_fit_variance(const struct PinlaInlaFit *fit, double *out, size_t len);

/**
 * Evaluates the mixture CDF of pixel `pixel` at `x`.
 *
 * # Safety
 * `fit` must be a live handle and `out` writable.
 */
enum PinlaStatus pinla_fit_cdf(const struct PinlaInlaFit *fit, size_t pixel, double x, double *out);

/**
 * Releases a fit handle. NULL is ignored.
 *
 * # Safety
 * `fit` must be NULL or a handle not yet freed.
 */
void pinla_fit_free(struct PinlaInlaFit *fit);

/**
 * Writes the default sampler settings into `opts`.
 *
 * # Safety
 * `opts` must be writable.
 */
enum PinlaStatus pinla_chain_options_default(struct PinlaChainOptions *opts);

/**
 * Runs a MALA chain on `counts` and returns a summary handle in `out`.
 *
 * # Safety
 * `counts` must be a live handle; `opts` readable; `out` writable.
 */
enum PinlaStatus pinla_chain_run(const struct PinlaCounts *counts,
                                 const struct PinlaChainOptions *opts,
                                 struct PinlaChain **out);

/**
 * Number of pixels in a chain summary, or 0 for NULL.
 *
 * # Safety
 * `chain` must be NULL or a live handle.
 */
size_t pinla_chain_len(const struct PinlaChain *chain);

/**
 * Latent acceptance rate over retained steps, or NaN for NULL.
 *
 * # Safety
 * `chain` must be NULL or a live handle.
 */
double pinla_chain_acceptance(const struct PinlaChain *chain);

/**
 * Copies the retained-sample means into `out`.
 *
 * # Safety
 * `chain` must be a live handle and `out` must point to `len` writable values.
 */
enum PinlaStatus pinla_chain_mean(const struct PinlaChain *chain, double *out, size_t len);

/**
 * Copies the retained-sample variances into `out`.
 *
 * # Safety
 * `chain` must be a live handle and `out` must point to `len` writable values.
 */
enum PinlaStatus pinla_chain_variance(const struct PinlaChain *chain, double *out, size_t len);

/**
 * Releases a chain handle. NULL is ignored.
 *
 * # Safety
 * `chain` must be NULL or a handle not yet freed.
 */
void pinla_chain_free(struct PinlaChain *chain);

/**
 * MSE, pooled-range PSNR and global SSIM of two images of `len` pixels.
 *
 * # Safety
 * `g` and `h` must point to `len` readable values; `out` must be writable.
 */
enum PinlaStatus pinla_metrics(const double *g,
                               const double *h,
                               size_t len,
                               struct PinlaMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POISSON_INLA_H */
