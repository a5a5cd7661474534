//! C interface to `poisson-inla`.
//!
//! Results live behind opaque handles that the caller releases with the
//! matching `pinla_*_free` function. Every fallible function returns a
//! [`PinlaStatus`]; the message of the most recent failure on the calling
//! thread is available through [`pinla_last_error`]. Panics are caught at the
//! boundary and reported as [`PinlaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use poisson_inla::gmrf::{GridGraph, IcarHyper};
use poisson_inla::imaging::{
    corrupt_poisson, intensity_forward, intensity_inverse, ContrastParams, IntensityRange, PixelImage,
};
use poisson_inla::inla::{Inla, InlaConfig, InlaFit, Strategy};
use poisson_inla::likelihood::CountField;
use poisson_inla::mcmc::{run_chain, ChainConfig, ChainSummary, ThetaMode};
use poisson_inla::metrics::evaluate_pair;
use poisson_inla::{Error, ErrorKind};

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinlaStatus {
    Ok = 0,
    NullPointer = 1,
    Validation = 2,
    Numerical = 3,
    Io = 4,
    Panic = 5,
}

/// Hyperparameter integration strategy.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinlaStrategy {
    Grid = 0,
    Ccd = 1,
    Mode = 2,
}

impl From<PinlaStrategy> for Strategy {
    fn from(s: PinlaStrategy) -> Self {
        match s {
            PinlaStrategy::Grid => Strategy::Grid,
            PinlaStrategy::Ccd => Strategy::Ccd,
            PinlaStrategy::Mode => Strategy::Mode,
        }
    }
}

/// INLA settings; fill with [`pinla_inla_options_default`] before editing.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PinlaInlaOptions {
    pub strategy: PinlaStrategy,
    pub delta_z: f64,
    pub delta_pi: f64,
    pub f0: f64,
    pub sigma2_init: f64,
    pub d_init: f64,
    /// Worker threads for point evaluation; 0 uses the global pool.
    pub workers: usize,
}

/// MALA settings; fill with [`pinla_chain_options_default`] before editing.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PinlaChainOptions {
    pub steps: usize,
    pub burn_in: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Hyperparameters the chain is conditioned on (or starts from).
    pub sigma2: f64,
    pub d: f64,
    /// When true, the hyperparameters are sampled under a flat prior in log
    /// coordinates every `theta_every` latent steps.
    pub sample_theta: bool,
    pub theta_every: usize,
}

/// Hyperparameter mode summary.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PinlaHyperMode {
    pub sigma2: f64,
    pub d: f64,
    pub log_posterior: f64,
    pub iterations: usize,
}

/// Range recorded by the intensity transform.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PinlaRange {
    pub i_min: f64,
    pub i_max: f64,
}

/// Similarity of two images. `psnr` is `+inf` for identical inputs.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PinlaMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Opaque observed count field.
pub struct PinlaCounts(CountField);

/// Opaque INLA result.
pub struct PinlaInlaFit(InlaFit);

/// Opaque MCMC result.
pub struct PinlaChain(ChainSummary);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> PinlaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PinlaStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            PinlaStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            match e.kind() {
                ErrorKind::Validation => PinlaStatus::Validation,
                ErrorKind::Numerical => PinlaStatus::Numerical,
                ErrorKind::Io => PinlaStatus::Io,
            }
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(format!("panic: {msg}"));
            PinlaStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &'static str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or(Failure::Null(what))
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> Result<(), Failure> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch {
            expected: src.len(),
            found: dst.len(),
        }
        .into());
    }
    dst.copy_from_slice(src);
    Ok(())
}

fn grid_dims(rows: usize, cols: usize) -> Result<usize, Failure> {
    rows.checked_mul(cols)
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("invalid lattice {rows}x{cols}")).into())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pinla_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => c"unknown",
    };
    VERSION.as_ptr()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// NUL-terminated when `cap > 0`). Returns the full message length excluding
/// the terminator, or 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be NULL or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pinla_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && cap > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Wraps `rows * cols` row-major counts in a new handle.
///
/// # Safety
/// `data` must point to `rows * cols` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pinla_counts_new(
    rows: usize,
    cols: usize,
    data: *const u64,
    out: *mut *mut PinlaCounts,
) -> PinlaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let n = grid_dims(rows, cols)?;
        let data = input(data, n, "data")?;
        let field = CountField::new(rows, cols, data.to_vec())?;
        *out = Box::into_raw(Box::new(PinlaCounts(field)));
        Ok(())
    })
}

/// Draws independent Poisson counts with rates `rates` (row-major) from a
/// ChaCha20 stream seeded with `seed`.
///
/// # Safety
/// `rates` must point to `rows * cols` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pinla_counts_sample(
    rates: *const f64,
    rows: usize,
    cols: usize,
    seed: u64,
    out: *mut *mut PinlaCounts,
) -> PinlaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let n = grid_dims(rows, cols)?;
        let rates = input(rates, n, "rates")?;
        let field = corrupt_poisson(rates, rows, cols, seed)?;
        *out = Box::into_raw(Box::new(PinlaCounts(field)));
        Ok(())
    })
}

/// Number of pixels in `counts`, or 0 for NULL.
///
/// # Safety
/// `counts` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pinla_counts_len(counts: *const PinlaCounts) -> usize {
    counts.as_ref().map_or(0, |c| c.0.counts().len())
}

/// Copies the counts into `out`, which must hold exactly `len` values.
///
/// # Safety
/// `counts` must be a live handle and `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn pinla_counts_copy(counts: *const PinlaCounts, out: *mut u64, len: usize) -> PinlaStatus {
    guard(|| {
        let c = handle(counts, "counts")?;
        let dst = output(out, len, "out")?;
        let src = c.0.counts();
        if src.len() != len {
            return Err(Error::DimensionMismatch {
                expected: src.len(),
                found: len,
            }
            .into());
        }
        dst.copy_from_slice(src);
        Ok(())
    })
}

/// Releases a count handle. NULL is ignored.
///
/// # Safety
/// `counts` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pinla_counts_free(counts: *mut PinlaCounts) {
    if !counts.is_null() {
        drop(Box::from_raw(counts));
    }
}

/// Maps pixel intensities affinely onto `[lambda_min, lambda_max]`; the
/// observed range is written to `range`.
///
/// # Safety
/// `pixels` and `out` must point to `len` values; `range` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pinla_intensity_forward(
    pixels: *const f64,
    len: usize,
    lambda_min: f64,
    lambda_max: f64,
    out: *mut f64,
    range: *mut PinlaRange,
) -> PinlaStatus {
    guard(|| {
        let src = input(pixels, len, "pixels")?;
        let dst = output(out, len, "out")?;
        let range = out_ref(range, "range")?;
        let c = ContrastParams::new(lambda_min, lambda_max)?;
        let img = PixelImage::new(1, len, src.to_vec(), u32::MAX)?;
        let (x, r) = intensity_forward(&img, &c)?;
        dst.copy_from_slice(&x);
        *range = PinlaRange {
            i_min: r.i_min,
            i_max: r.i_max,
        };
        Ok(())
    })
}

/// Exact inverse of [`pinla_intensity_forward`] for the given range.
///
/// # Safety
/// `x` and `out` must point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn pinla_intensity_inverse(
    x: *const f64,
    len: usize,
    range: PinlaRange,
    lambda_min: f64,
    lambda_max: f64,
    out: *mut f64,
) -> PinlaStatus {
    guard(|| {
        let src = input(x, len, "x")?;
        let dst = output(out, len, "out")?;
        let c = ContrastParams::new(lambda_min, lambda_max)?;
        if !(range.i_max > range.i_min) {
            return Err(Error::ConstantImage(range.i_min).into());
        }
        let r = IntensityRange {
            i_min: range.i_min,
            i_max: range.i_max,
        };
        dst.copy_from_slice(&intensity_inverse(src, &r, &c));
        Ok(())
    })
}

/// Writes the default INLA settings into `opts`.
///
/// # Safety
/// `opts` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pinla_inla_options_default(opts: *mut PinlaInlaOptions) -> PinlaStatus {
    guard(|| {
        let opts = out_ref(opts, "opts")?;
        let d = InlaConfig::default();
        *opts = PinlaInlaOptions {
            strategy: PinlaStrategy::Ccd,
            delta_z: d.delta_z,
            delta_pi: d.delta_pi,
            f0: d.f0,
            sigma2_init: d.theta_init[0],
            d_init: d.theta_init[1],
            workers: 0,
        };
        Ok(())
    })
}

/// Runs INLA on `counts` and returns a fit handle in `out`.
///
/// # Safety
/// `counts` must be a live handle; `opts` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pinla_inla_run(
    counts: *const PinlaCounts,
    opts: *const PinlaInlaOptions,
    out: *mut *mut PinlaInlaFit,
) -> PinlaStatus {
    guard(|| {
        let c = handle(counts, "counts")?;
        let o = *handle(opts, "opts")?;
        let out = out_ref(out, "out")?;
        let config = InlaConfig {
            strategy: o.strategy.into(),
            delta_z: o.delta_z,
            delta_pi: o.delta_pi,
            f0: o.f0,
            theta_init: [o.sigma2_init, o.d_init],
            workers: (o.workers > 0).then_some(o.workers),
            ..InlaConfig::default()
        };
        let g = GridGraph::new(c.0.rows(), c.0.cols())?;
        let fit = Inla::new(g, &c.0, config)?.run()?;
        *out = Box::into_raw(Box::new(PinlaInlaFit(fit)));
        Ok(())
    })
}

/// Number of pixels in a fit, or 0 for NULL.
///
/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pinla_fit_len(fit: *const PinlaInlaFit) -> usize {
    fit.as_ref().map_or(0, |f| f.0.marginals.eap.len())
}

/// Number of hyperparameter integration points, or 0 for NULL.
///
/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pinla_fit_points(fit: *const PinlaInlaFit) -> usize {
    fit.as_ref().map_or(0, |f| f.0.points.len())
}

/// Writes the hyperparameter mode into `out`.
///
/// # Safety
/// `fit` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pinla_fit_mode(fit: *const PinlaInlaFit, out: *mut PinlaHyperMode) -> PinlaStatus {
    guard(|| {
        let f = handle(fit, "fit")?;
        let out = out_ref(out, "out")?;
        let m = &f.0.mode;
        *out = PinlaHyperMode {
            sigma2: m.theta.sigma2(),
            d: m.theta.d(),
            log_posterior: m.log_post,
            iterations: m.iterations,
        };
        Ok(())
    })
}

/// Copies the posterior means into `out` (`len` must equal the pixel count).
///
/// # Safety
/// `fit` must be a live handle and `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn pinla_fit_eap(fit: *const PinlaInlaFit, out: *mut f64, len: usize) -> PinlaStatus {
    guard(|| copy_out(&handle(fit, "fit")?.0.marginals.eap, output(out, len, "out")?))
}

/// Copies the posterior variances into `out`.
///
/// # Safety
/// `fit` must be a live handle and `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn pinla_fit_variance(fit: *const PinlaInlaFit, out: *mut f64, len: usize) -> PinlaStatus {
    guard(|| copy_out(&handle(fit, "fit")?.0.marginals.variance, output(out, len, "out")?))
}

/// Evaluates the mixture CDF of pixel `pixel` at `x`.
///
/// # Safety
/// `fit` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pinla_fit_cdf(fit: *const PinlaInlaFit, pixel: usize, x: f64, out: *mut f64) -> PinlaStatus {
    guard(|| {
        let f = handle(fit, "fit")?;
        let out = out_ref(out, "out")?;
        let n = f.0.marginals.n_pixels();
        if pixel >= n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: pixel,
            }
            .into());
        }
        *out = f.0.marginals.cdf(pixel, x);
        Ok(())
    })
}

/// Releases a fit handle. NULL is ignored.
///
/// # Safety
/// `fit` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pinla_fit_free(fit: *mut PinlaInlaFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Writes the default sampler settings into `opts`.
///
/// # Safety
/// `opts` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pinla_chain_options_default(opts: *mut PinlaChainOptions) -> PinlaStatus {
    guard(|| {
        let opts = out_ref(opts, "opts")?;
        let d = ChainConfig::default();
        let theta = d.theta_mode.initial();
        *opts = PinlaChainOptions {
            steps: d.steps,
            burn_in: d.burn_in,
            step_size: d.step_size,
            seed: d.seed,
            sigma2: theta.sigma2(),
            d: theta.d(),
            sample_theta: false,
            theta_every: 10,
        };
        Ok(())
    })
}

/// Runs a MALA chain on `counts` and returns a summary handle in `out`.
///
/// # Safety
/// `counts` must be a live handle; `opts` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pinla_chain_run(
    counts: *const PinlaCounts,
    opts: *const PinlaChainOptions,
    out: *mut *mut PinlaChain,
) -> PinlaStatus {
    guard(|| {
        let c = handle(counts, "counts")?;
        let o = *handle(opts, "opts")?;
        let out = out_ref(out, "out")?;
        let theta = IcarHyper::new(o.sigma2, o.d)?;
        let cfg = ChainConfig {
            steps: o.steps,
            burn_in: o.burn_in,
            step_size: o.step_size,
            seed: o.seed,
            theta_mode: if o.sample_theta {
                ThetaMode::Sample {
                    init: theta,
                    prior: Default::default(),
                    every: o.theta_every,
                }
            } else {
                ThetaMode::Fixed { theta }
            },
            ..ChainConfig::default()
        };
        let g = GridGraph::new(c.0.rows(), c.0.cols())?;
        let summary = run_chain(&g, &c.0, &cfg, None)?;
        *out = Box::into_raw(Box::new(PinlaChain(summary)));
        Ok(())
    })
}

/// Number of pixels in a chain summary, or 0 for NULL.
///
/// # Safety
/// `chain` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pinla_chain_len(chain: *const PinlaChain) -> usize {
    chain.as_ref().map_or(0, |c| c.0.mean.len())
}

/// Latent acceptance rate over retained steps, or NaN for NULL.
///
/// # Safety
/// `chain` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pinla_chain_acceptance(chain: *const PinlaChain) -> f64 {
    chain.as_ref().map_or(f64::NAN, |c| c.0.acceptance_rate)
}

/// Copies the retained-sample means into `out`.
///
/// # Safety
/// `chain` must be a live handle and `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn pinla_chain_mean(chain: *const PinlaChain, out: *mut f64, len: usize) -> PinlaStatus {
    guard(|| copy_out(&handle(chain, "chain")?.0.mean, output(out, len, "out")?))
}

/// Copies the retained-sample variances into `out`.
///
/// # Safety
/// `chain` must be a live handle and `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn pinla_chain_variance(chain: *const PinlaChain, out: *mut f64, len: usize) -> PinlaStatus {
    guard(|| copy_out(&handle(chain, "chain")?.0.variance, output(out, len, "out")?))
}

/// Releases a chain handle. NULL is ignored.
///
/// # Safety
/// `chain` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pinla_chain_free(chain: *mut PinlaChain) {
    if !chain.is_null() {
        drop(Box::from_raw(chain));
    }
}

/// MSE, pooled-range PSNR and global SSIM of two images of `len` pixels.
///
/// # Safety
/// `g` and `h` must point to `len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pinla_metrics(g: *const f64, h: *const f64, len: usize, out: *mut PinlaMetrics) -> PinlaStatus {
    guard(|| {
        let g = input(g, len, "g")?;
        let h = input(h, len, "h")?;
        let out = out_ref(out, "out")?;
        let m = evaluate_pair(g, h)?;
        *out = PinlaMetrics {
            mse: m.mse,
            psnr: m.psnr,
            ssim: m.ssim,
            c1: m.c1,
            c2: m.c2,
        };
        Ok(())
    })
}
