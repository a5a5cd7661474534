#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use poisson_inla::gmrf::{build_icar_precision, GridGraph, IcarHyper};
use poisson_inla::imaging::PixelImage;
use poisson_inla::sparse::SparseSymMatrix;

pub fn dense(a: &SparseSymMatrix) -> DMatrix<f64> {
    let n = a.n();
    DMatrix::from_row_slice(n, n, &a.to_dense())
}

pub fn dense_logdet(a: &DMatrix<f64>) -> f64 {
    let l = a.clone().cholesky().expect("dense oracle needs an SPD matrix");
    2.0 * l.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn dense_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().cholesky().expect("SPD").inverse()
}

/// Posterior of `x` under prior `N(0, Q⁻¹)` and observations `y ~ N(x, v I)`.
pub fn gaussian_posterior(g: &GridGraph, h: &IcarHyper, y: &[f64], v: f64) -> (Vec<f64>, Vec<f64>) {
    let q = dense(&build_icar_precision(g, h));
    let p = q + DMatrix::identity(g.len(), g.len()) / v;
    let cov = dense_inverse(&p);
    let b = DVector::from_iterator(y.len(), y.iter().map(|t| t / v));
    let m = &cov * b;
    (m.iter().copied().collect(), cov.diagonal().iter().copied().collect())
}

fn ln_fact(y: u64) -> f64 {
    (2..=y).map(|k| (k as f64).ln()).sum()
}

/// Midpoint grid on `(0, hi]`.
pub fn x_grid(hi: f64, n: usize) -> Vec<f64> {
    let h = hi / n as f64;
    (0..n).map(|k| (k as f64 + 0.5) * h).collect()
}

/// Unnormalized `ln p(x | y, τ)` for the single-pixel model with prior
/// precision `τ = d/σ²`.
pub fn scalar_log_kernel(x: f64, y: u64, tau: f64) -> f64 {
    0.5 * tau.ln() - 0.5 * tau * x * x + y as f64 * x.ln() - x - ln_fact(y)
}

/// Posterior mean of the single pixel at fixed `(σ², d)`.
pub fn scalar_mean_fixed(y: u64, sigma2: f64, d: f64) -> f64 {
    let tau = d / sigma2;
    let xs = x_grid(50.0, 200_000);
    let (mut z, mut m) = (0.0, 0.0);
    for &x in &xs {
        let w = scalar_log_kernel(x, y, tau).exp();
        z += w;
        m += w * x;
    }
    m / z
}

/// Tabulated posterior CDF of the single pixel at fixed `(σ², d)`.
pub fn scalar_cdf_fixed(y: u64, sigma2: f64, d: f64) -> impl Fn(f64) -> f64 {
    let tau = d / sigma2;
    let hi = 50.0;
    let n = 500_000;
    let h = hi / n as f64;
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    let mut acc = 0.0;
    for k in 0..n {
        let x = (k as f64 + 0.5) * h;
        acc += scalar_log_kernel(x, y, tau).exp() * h;
        cum.push(acc);
    }
    let total = acc;
    move |x: f64| {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        let t = x / h;
        let k = t.floor() as usize;
        let frac = t - k as f64;
        (cum[k] + frac * (cum[k + 1] - cum[k])) / total
    }
}

/// Brute-force `E[x | y]` for the single-pixel model with independent
/// `N(0, sd²)` priors on `ln σ²` and `ln d`: a tensor grid over
/// `(ln σ², ln d)` times a midpoint grid over `x ∈ (0, 40]`.
pub fn scalar_mean_joint(y: u64, sd: f64) -> f64 {
    let xs = x_grid(40.0, 4000);
    let lnx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let lim = 7.0 * sd;
    let m = 141;
    let step = 2.0 * lim / (m - 1) as f64;
    let (mut z, mut mean) = (0.0, 0.0);
    for a in 0..m {
        let ls = -lim + a as f64 * step;
        for b in 0..m {
            let ld = -lim + b as f64 * step;
            let prior = -0.5 * (ls * ls + ld * ld) / (sd * sd);
            let tau = (ld - ls).exp();
            let base = prior + 0.5 * tau.ln() - ln_fact(y);
            for k in 0..xs.len() {
                let x = xs[k];
                let w = (base - 0.5 * tau * x * x + y as f64 * lnx[k] - x).exp();
                z += w;
                mean += w * x;
            }
        }
    }
    mean / z
}

/// Low-frequency sinusoidal test image with 8-bit range.
pub fn smooth_image(rows: usize, cols: usize) -> PixelImage {
    let mut v = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let a = 2.0 * std::f64::consts::PI * r as f64 / rows as f64;
            let b = 2.0 * std::f64::consts::PI * c as f64 / cols as f64;
            v.push(127.5 + 127.5 * a.sin() * b.cos());
        }
    }
    PixelImage::new(rows, cols, v, 255).unwrap()
}
