//! Hyperparameter integration: the outer INLA loop.
//!
//! `ln p̃(θ | y)` is evaluated through the Laplace solver, maximized by BFGS
//! in `(ln σ², ln d)` with central finite-difference gradients, and
//! standardized with the spectral factorization of the negative inverse
//! Hessian at the mode: `θ(z) = θ* + V Λ^{1/2} z`. Integration points are
//! placed in `z`-space either on a lattice walk (grid) or by a central
//! composite design (CCD), and the latent marginals are the weighted mixture
//! of the per-point Gaussian marginals.

use std::collections::HashSet;
use std::f64::consts::{PI, SQRT_2};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::gmrf::{GridGraph, IcarHyper};
use crate::laplace::{GaussianApprox, LaplaceConfig, LaplaceSolver};
use crate::likelihood::ObservationModel;

/// Integration point placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Grid,
    Ccd,
    /// Single point at the hyperparameter mode (empirical Bayes). Debug only.
    Mode,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Strategy::Grid),
            "ccd" => Ok(Strategy::Ccd),
            "mode" => Ok(Strategy::Mode),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Grid => "grid",
            Strategy::Ccd => "ccd",
            Strategy::Mode => "mode",
        })
    }
}

/// Prior on `(σ², d)`, expressed as a density over `(ln σ², ln d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HyperPrior {
    /// Flat on `[0, ∞)` for both parameters; in log coordinates this is the
    /// Jacobian `σ² d`.
    #[default]
    Flat,
    /// Independent normals on `ln σ²` and `ln d`.
    LogNormal { log_mean: [f64; 2], log_sd: [f64; 2] },
}

impl HyperPrior {
    /// Log density over `(ln σ², ln d)`, up to a constant for `Flat`.
    pub fn log_density(&self, log_theta: [f64; 2]) -> f64 {
        match self {
            HyperPrior::Flat => log_theta[0] + log_theta[1],
            HyperPrior::LogNormal { log_mean, log_sd } => (0..2)
                .map(|k| {
                    let z = (log_theta[k] - log_mean[k]) / log_sd[k];
                    -0.5 * z * z - log_sd[k].ln() - 0.5 * (2.0 * PI).ln()
                })
                .sum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let HyperPrior::LogNormal { log_mean, log_sd } = self {
            if log_sd.iter().any(|s| !(*s > 0.0 && s.is_finite()))
                || log_mean.iter().any(|m| !m.is_finite())
            {
                return Err(Error::InvalidConfig("log-normal hyperprior needs finite means and positive sds".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InlaConfig {
    pub strategy: Strategy,
    pub delta_z: f64,
    pub delta_pi: f64,
    pub f0: f64,
    /// Starting `(σ², d)` for the mode search.
    pub theta_init: [f64; 2],
    pub prior: HyperPrior,
    pub fd_grad_step: f64,
    pub fd_hess_step: f64,
    /// Euclidean norm of the log-posterior gradient at an accepted mode.
    pub grad_tol: f64,
    /// Gradient norm accepted when the line search can no longer improve
    /// the objective (finite-difference noise floor on large lattices).
    pub stall_grad_tol: f64,
    pub max_iter: usize,
    /// Mode searches leaving `|ln θ_k| ≤ max_abs_log_theta` are abandoned.
    pub max_abs_log_theta: f64,
    pub max_points: usize,
    /// Worker threads for point evaluation; `None` uses the available cores.
    pub workers: Option<usize>,
    pub laplace: LaplaceConfig,
}

impl Default for InlaConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ccd,
            delta_z: 1.0,
            delta_pi: 2.5,
            f0: SQRT_2,
            theta_init: [1.0, 1.0],
            prior: HyperPrior::Flat,
            fd_grad_step: 1e-4,
            fd_hess_step: 1e-3,
            grad_tol: 1e-5,
            stall_grad_tol: 1e-3,
            max_iter: 200,
            max_abs_log_theta: 40.0,
            max_points: 10_000,
            workers: None,
            laplace: LaplaceConfig::default(),
        }
    }
}

impl InlaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        positive(self.delta_z, "delta_z")?;
        positive(self.delta_pi, "delta_pi")?;
        positive(self.fd_grad_step, "fd_grad_step")?;
        positive(self.fd_hess_step, "fd_hess_step")?;
        positive(self.grad_tol, "grad_tol")?;
        if !(self.f0 > 1.0 && self.f0.is_finite()) {
            return Err(Error::InvalidConfig(format!("f0 must exceed 1, got {}", self.f0)));
        }
        IcarHyper::new(self.theta_init[0], self.theta_init[1])?;
        if self.workers == Some(0) {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        self.prior.validate()
    }
}

/// Linear map between `z` and `(ln σ², ln d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTransform {
    pub center: [f64; 2],
    /// Columns are eigenvectors of the negative inverse Hessian.
    pub eigenvectors: [[f64; 2]; 2],
    /// Eigenvalues of the negative inverse Hessian (posterior variances
    /// along the eigenvectors).
    pub variances: [f64; 2],
}

impl ZTransform {
    /// Builds the map from a negative-definite Hessian of the log posterior.
    pub fn from_hessian(center: [f64; 2], hessian: [[f64; 2]; 2]) -> Result<Self> {
        let (vals, vecs) = sym_eigen_2x2(hessian);
        if vals.iter().any(|&l| !(l < 0.0)) {
            return Err(Error::IndefiniteHessian(vals));
        }
        Ok(Self {
            center,
            eigenvectors: vecs,
            variances: [-1.0 / vals[0], -1.0 / vals[1]],
        })
    }

    pub fn identity(center: [f64; 2]) -> Self {
        Self {
            center,
            eigenvectors: [[1.0, 0.0], [0.0, 1.0]],
            variances: [1.0, 1.0],
        }
    }

    pub fn to_log_theta(&self, z: [f64; 2]) -> [f64; 2] {
        let s = [self.variances[0].sqrt() * z[0], self.variances[1].sqrt() * z[1]];
        let v = &self.eigenvectors;
        [
            self.center[0] + v[0][0] * s[0] + v[0][1] * s[1],
            self.center[1] + v[1][0] * s[0] + v[1][1] * s[1],
        ]
    }

    pub fn to_z(&self, log_theta: [f64; 2]) -> [f64; 2] {
        let d = [log_theta[0] - self.center[0], log_theta[1] - self.center[1]];
        let v = &self.eigenvectors;
        [
            (v[0][0] * d[0] + v[1][0] * d[1]) / self.variances[0].sqrt(),
            (v[0][1] * d[0] + v[1][1] * d[1]) / self.variances[1].sqrt(),
        ]
    }
}

/// Eigen-decomposition of a symmetric 2×2 matrix. Eigenvalues ascending;
/// eigenvectors stored as columns `[[v0x, v1x], [v0y, v1y]]`.
fn sym_eigen_2x2(m: [[f64; 2]; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
    let (a, b, c) = (m[0][0], 0.5 * (m[0][1] + m[1][0]), m[1][1]);
    let mean = 0.5 * (a + c);
    let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let vals = [mean - r, mean + r];
    if b == 0.0 {
        return if a <= c {
            (vals, [[1.0, 0.0], [0.0, 1.0]])
        } else {
            (vals, [[0.0, 1.0], [1.0, 0.0]])
        };
    }
    let vec_for = |l: f64| {
        // Pick the better-conditioned of the two null-space candidates.
        let (x, y) = if (l - a).abs() >= (l - c).abs() {
            (b, l - a)
        } else {
            (l - c, b)
        };
        let norm = (x * x + y * y).sqrt();
        [x / norm, y / norm]
    };
    let v0 = vec_for(vals[0]);
    let v1 = [-v0[1], v0[0]];
    (vals, [[v0[0], v1[0]], [v0[1], v1[1]]])
}

/// Mode of `ln p̃(θ | y)` in log coordinates.
#[derive(Debug, Clone)]
pub struct HyperMode {
    pub log_theta: [f64; 2],
    pub theta: IcarHyper,
    pub log_post: f64,
    pub gradient: [f64; 2],
    /// Finite-difference Hessian of `ln p̃(θ | y)` in log coordinates.
    pub hessian: [[f64; 2]; 2],
    pub z_transform: ZTransform,
    pub iterations: usize,
    pub evaluations: usize,
    /// Latent mode at `θ*`, used to warm-start nearby evaluations.
    pub latent_mode: Vec<f64>,
}

/// Per-point latent moments from the Gaussian approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl From<&GaussianApprox> for LatentMoments {
    fn from(ga: &GaussianApprox) -> Self {
        Self {
            mean: ga.mode.clone(),
            variance: ga.cond_variances().to_vec(),
        }
    }
}

/// One integration point `θ_h`.
#[derive(Debug, Clone)]
pub struct HyperPoint {
    pub theta: IcarHyper,
    pub z: [f64; 2],
    pub log_post: f64,
    /// Quadrature weight `Δ_h`.
    pub weight: f64,
    pub moments: LatentMoments,
}

/// Per-pixel Gaussian mixture marginals.
#[derive(Debug, Clone)]
pub struct PosteriorMarginals {
    pub thetas: Vec<IcarHyper>,
    /// Normalized mixture weights `w_h`.
    pub weights: Vec<f64>,
    pub components: Vec<LatentMoments>,
    pub eap: Vec<f64>,
    pub variance: Vec<f64>,
}

impl PosteriorMarginals {
    pub fn n_pixels(&self) -> usize {
        self.eap.len()
    }

    /// Mixture density of pixel `i` at each abscissa.
    pub fn density(&self, i: usize, abscissae: &[f64]) -> Vec<f64> {
        abscissae
            .iter()
            .map(|&x| {
                self.weights
                    .iter()
                    .zip(&self.components)
                    .map(|(w, c)| {
                        let v = c.variance[i];
                        let d = x - c.mean[i];
                        w * (-0.5 * d * d / v).exp() / (2.0 * PI * v).sqrt()
                    })
                    .sum()
            })
            .collect()
    }

    /// Mixture CDF of pixel `i` at `x`.
    pub fn cdf(&self, i: usize, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w * 0.5 * erfc(-(x - c.mean[i]) / (2.0 * c.variance[i]).sqrt()))
            .sum()
    }
}

/// Mixes per-point Gaussian marginals with weights
/// `w_h ∝ exp(log_post_h − max log_post) Δ_h`.
pub fn integrate_marginals(points: &[HyperPoint]) -> Result<PosteriorMarginals> {
    let first = points.first().ok_or(Error::EmptyPointSet)?;
    let n = first.moments.mean.len();
    let lp_max = points
        .iter()
        .map(|p| p.log_post)
        .fold(f64::NEG_INFINITY, f64::max);
    if !lp_max.is_finite() {
        return Err(Error::NoConvergence("integration points carry non-finite log posteriors".into()));
    }
    let raw: Vec<f64> = points
        .iter()
        .map(|p| (p.log_post - lp_max).exp() * p.weight)
        .collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|r| r / total).collect();

    let mut eap = vec![0.0; n];
    for (w, p) in weights.iter().zip(points) {
        for (e, m) in eap.iter_mut().zip(&p.moments.mean) {
            *e += w * m;
        }
    }
    let mut variance = vec![0.0; n];
    for (w, p) in weights.iter().zip(points) {
        for i in 0..n {
            let d = p.moments.mean[i] - eap[i];
            variance[i] += w * (p.moments.variance[i] + d * d);
        }
    }
    Ok(PosteriorMarginals {
        thetas: points.iter().map(|p| p.theta).collect(),
        weights,
        components: points.iter().map(|p| p.moments.clone()).collect(),
        eap,
        variance,
    })
}

/// Central composite design in two dimensions: `(z, Δ)` pairs.
///
/// Ring points sit at radius `f0·√2`. Design weights integrate a standard
/// bivariate normal's zeroth and second moments exactly; they are divided by
/// the standard normal kernel so that `exp(log_post) Δ` reproduces them when
/// the log posterior is exactly `−‖z‖²/2`.
pub fn ccd_design(f0: f64) -> Vec<([f64; 2], f64)> {
    let r2 = 2.0 * f0 * f0;
    let ring_mass = 1.0 / (8.0 * f0 * f0);
    let center_mass = 1.0 - 1.0 / (f0 * f0);
    let a = f0 * SQRT_2;
    let ring = [
        [f0, f0],
        [f0, -f0],
        [-f0, f0],
        [-f0, -f0],
        [a, 0.0],
        [-a, 0.0],
        [0.0, a],
        [0.0, -a],
    ];
    let mut out = vec![([0.0, 0.0], center_mass)];
    out.extend(ring.iter().map(|&z| (z, ring_mass * (0.5 * r2).exp())));
    out
}

/// Breadth-first lattice walk in `z`-space, keeping every point with
/// `lp(z) > lp(0) − delta_pi` and expanding from kept points only. Each
/// frontier is evaluated in parallel and assembled in lattice order.
pub fn walk_grid<T, F>(
    delta_z: f64,
    delta_pi: f64,
    max_points: usize,
    eval: F,
) -> Result<Vec<([f64; 2], f64, T)>>
where
    T: Send,
    F: Fn([f64; 2]) -> Result<(f64, T)> + Sync,
{
    let mut kept: Vec<([f64; 2], f64, T)> = Vec::new();
    let mut seen: HashSet<(i64, i64)> = HashSet::from([(0, 0)]);
    let mut frontier = vec![(0i64, 0i64)];
    let mut threshold = None;
    while !frontier.is_empty() {
        let evaluated: Vec<Result<(f64, T)>> = frontier
            .par_iter()
            .map(|&(i, j)| eval([i as f64 * delta_z, j as f64 * delta_z]))
            .collect();
        let mut next = Vec::new();
        for (&(i, j), r) in frontier.iter().zip(evaluated) {
            let (lp, payload) = r?;
            let limit = *threshold.get_or_insert(lp - delta_pi);
            if !(lp > limit) {
                continue;
            }
            kept.push(([i as f64 * delta_z, j as f64 * delta_z], lp, payload));
            if kept.len() > max_points {
                return Err(Error::ExplosionGuard(max_points));
            }
            for nb in [(i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)] {
                if seen.insert(nb) {
                    next.push(nb);
                }
            }
        }
        next.sort_unstable();
        frontier = next;
    }
    Ok(kept)
}

/// Result of a complete INLA run.
#[derive(Debug, Clone)]
pub struct InlaFit {
    pub strategy: Strategy,
    pub mode: HyperMode,
    pub points: Vec<HyperPoint>,
    pub marginals: PosteriorMarginals,
    pub timings: InlaTimings,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct InlaTimings {
    pub mode_search_s: f64,
    pub exploration_s: f64,
    pub integration_s: f64,
}

/// INLA engine for one lattice and one observation model.
pub struct Inla<'a, M: ObservationModel + ?Sized> {
    solver: LaplaceSolver<'a, M>,
    config: InlaConfig,
    pool: rayon::ThreadPool,
}

impl<'a, M: ObservationModel + ?Sized> Inla<'a, M> {
    pub fn new(grid: GridGraph, model: &'a M, config: InlaConfig) -> Result<Self> {
        config.validate()?;
        let solver = LaplaceSolver::new(grid, model, config.laplace)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers.unwrap_or(0))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
        Ok(Self {
            solver,
            config,
            pool,
        })
    }

    pub fn config(&self) -> &InlaConfig {
        &self.config
    }

    pub fn grid(&self) -> &GridGraph {
        self.solver.grid()
    }

    /// `ln p̃(θ | y)` at internal coordinates, with the Gaussian approximation
    /// it was computed from.
    pub fn evaluate(&self, log_theta: [f64; 2], warm: Option<&[f64]>) -> Result<(f64, GaussianApprox)> {
        let h = IcarHyper::from_log(log_theta)?;
        let ga = self.solver.approximate(&h, warm)?;
        let lml = self.solver.log_marginal_correction(&ga, &h)?;
        Ok((self.config.prior.log_density(log_theta) + lml, ga))
    }

    /// `ln p(θ) + ln p(x*|θ) + ln p(y|x*) − ln p̃_G(x*|θ, y)`, with the prior
    /// taken over `(ln σ², ln d)`.
    pub fn log_hyper_posterior(&self, theta: &IcarHyper) -> Result<f64> {
        Ok(self.evaluate(theta.log_coords(), None)?.0)
    }

    fn eval_many(&self, pts: &[[f64; 2]], warm: &[f64]) -> Vec<Result<(f64, GaussianApprox)>> {
        self.pool
            .install(|| pts.par_iter().map(|&u| self.evaluate(u, Some(warm))).collect())
    }

    fn fd_gradient(&self, u: [f64; 2], warm: &[f64]) -> Result<[f64; 2]> {
        let h = self.config.fd_grad_step;
        let pts = [
            [u[0] + h, u[1]],
            [u[0] - h, u[1]],
            [u[0], u[1] + h],
            [u[0], u[1] - h],
        ];
        let f: Vec<f64> = self
            .eval_many(&pts, warm)
            .into_iter()
            .map(|r| r.map(|(lp, _)| lp))
            .collect::<Result<_>>()?;
        Ok([(f[0] - f[1]) / (2.0 * h), (f[2] - f[3]) / (2.0 * h)])
    }

    fn fd_hessian(&self, u: [f64; 2], f0: f64, warm: &[f64]) -> Result<[[f64; 2]; 2]> {
        let h = self.config.fd_hess_step;
        let pts = [
            [u[0] + h, u[1]],
            [u[0] - h, u[1]],
            [u[0], u[1] + h],
            [u[0], u[1] - h],
            [u[0] + h, u[1] + h],
            [u[0] + h, u[1] - h],
            [u[0] - h, u[1] + h],
            [u[0] - h, u[1] - h],
        ];
        let f: Vec<f64> = self
            .eval_many(&pts, warm)
            .into_iter()
            .map(|r| r.map(|(lp, _)| lp))
            .collect::<Result<_>>()?;
        let h2 = h * h;
        let h00 = (f[0] - 2.0 * f0 + f[1]) / h2;
        let h11 = (f[2] - 2.0 * f0 + f[3]) / h2;
        let h01 = (f[4] - f[5] - f[6] + f[7]) / (4.0 * h2);
        Ok([[h00, h01], [h01, h11]])
    }

    /// BFGS ascent on `ln p̃(θ | y)` in log coordinates.
    pub fn find_mode(&self, theta_init: &IcarHyper) -> Result<HyperMode> {
        let cfg = &self.config;
        let mut u = theta_init.log_coords();
        let (mut f, ga) = self.evaluate(u, None)?;
        let mut latent = ga.mode;
        let mut g = self.fd_gradient(u, &latent)?;
        let mut evaluations = 5;
        let mut hinv = [[1.0, 0.0], [0.0, 1.0]];
        let mut iterations = 0;
        let norm = |v: [f64; 2]| (v[0] * v[0] + v[1] * v[1]).sqrt();

        loop {
            if norm(g) <= cfg.grad_tol {
                break;
            }
            if iterations >= cfg.max_iter {
                return Err(Error::NoConvergence(format!(
                    "hyperparameter mode search exceeded {} iterations (gradient norm {:.3e})",
                    cfg.max_iter,
                    norm(g)
                )));
            }
            iterations += 1;

            let mut p = mat_vec(hinv, g);
            if p[0] * g[0] + p[1] * g[1] <= 0.0 {
                hinv = [[1.0, 0.0], [0.0, 1.0]];
                p = g;
            }
            let pn = norm(p);
            if pn > 2.0 {
                p = [p[0] * 2.0 / pn, p[1] * 2.0 / pn];
            }
            let slope = p[0] * g[0] + p[1] * g[1];

            let mut alpha = 1.0;
            let mut step = None;
            for _ in 0..40 {
                let cand = [u[0] + alpha * p[0], u[1] + alpha * p[1]];
                evaluations += 1;
                if let Ok((fc, ga)) = self.evaluate(cand, Some(&latent)) {
                    if fc.is_finite() && fc >= f + 1e-4 * alpha * slope {
                        step = Some((cand, fc, ga.mode));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((cand, fc, mode)) = step else {
                if norm(g) <= cfg.stall_grad_tol {
                    break;
                }
                if hinv != [[1.0, 0.0], [0.0, 1.0]] {
                    hinv = [[1.0, 0.0], [0.0, 1.0]];
                    continue;
                }
                return Err(Error::NoConvergence(format!(
                    "line search failed at ln(theta) = {u:?} with gradient norm {:.3e}",
                    norm(g)
                )));
            };
            if cand.iter().any(|c| c.abs() > cfg.max_abs_log_theta) {
                return Err(Error::NoConvergence(format!(
                    "hyperparameter search diverged to ln(theta) = {cand:?}; the hyperposterior may be improper"
                )));
            }
            let g_new = self.fd_gradient(cand, &mode)?;
            evaluations += 4;
            let s = [cand[0] - u[0], cand[1] - u[1]];
            // Ascent on f is descent on −f; curvature pairs use −∇f.
            let yv = [g[0] - g_new[0], g[1] - g_new[1]];
            let sy = s[0] * yv[0] + s[1] * yv[1];
            if sy > 1e-12 {
                hinv = bfgs_update(hinv, s, yv, sy);
            }
            u = cand;
            f = fc;
            g = g_new;
            latent = mode;
        }

        let hessian = self.fd_hessian(u, f, &latent)?;
        evaluations += 8;
        let z_transform = ZTransform::from_hessian(u, hessian)?;
        Ok(HyperMode {
            log_theta: u,
            theta: IcarHyper::from_log(u)?,
            log_post: f,
            gradient: g,
            hessian,
            z_transform,
            iterations,
            evaluations,
            latent_mode: latent,
        })
    }

    fn point_from(&self, z: [f64; 2], lp: f64, weight: f64, ga: &GaussianApprox, log_theta: [f64; 2]) -> Result<HyperPoint> {
        Ok(HyperPoint {
            theta: IcarHyper::from_log(log_theta)?,
            z,
            log_post: lp,
            weight,
            moments: LatentMoments::from(ga),
        })
    }

    /// Grid strategy: lattice walk in `z` with spacing `delta_z`, equal
    /// weights `delta_z²`.
    pub fn explore_grid(&self, mode: &HyperMode) -> Result<Vec<HyperPoint>> {
        let t = mode.z_transform;
        let dz = self.config.delta_z;
        let kept = self.pool.install(|| {
            walk_grid(dz, self.config.delta_pi, self.config.max_points, |z| {
                let u = t.to_log_theta(z);
                let (lp, ga) = self.evaluate(u, Some(&mode.latent_mode))?;
                ga.cond_variances();
                Ok((lp, (u, ga)))
            })
        })?;
        kept.into_iter()
            .map(|(z, lp, (u, ga))| self.point_from(z, lp, dz * dz, &ga, u))
            .collect()
    }

    /// CCD strategy: nine points on the centre and a ring of radius
    /// `f0·√2` in `z`.
    pub fn explore_ccd(&self, mode: &HyperMode) -> Result<Vec<HyperPoint>> {
        let design = ccd_design(self.config.f0);
        let t = mode.z_transform;
        let evals: Vec<Result<HyperPoint>> = self.pool.install(|| {
            design
                .par_iter()
                .map(|&(z, w)| {
                    let u = t.to_log_theta(z);
                    let (lp, ga) = self.evaluate(u, Some(&mode.latent_mode))?;
                    self.point_from(z, lp, w, &ga, u)
                })
                .collect()
        });
        evals.into_iter().collect()
    }

    /// Single integration point at a fixed `θ`.
    pub fn fixed_point(&self, theta: &IcarHyper) -> Result<Vec<HyperPoint>> {
        let u = theta.log_coords();
        let (lp, ga) = self.evaluate(u, None)?;
        Ok(vec![self.point_from([0.0, 0.0], lp, 1.0, &ga, u)?])
    }

    /// Mode search, point placement per the configured strategy, and mixture
    /// assembly.
    pub fn run(&self) -> Result<InlaFit> {
        let t0 = std::time::Instant::now();
        let init = IcarHyper::new(self.config.theta_init[0], self.config.theta_init[1])?;
        let mode = self.find_mode(&init)?;
        let t1 = std::time::Instant::now();
        let points = match self.config.strategy {
            Strategy::Grid => self.explore_grid(&mode)?,
            Strategy::Ccd => self.explore_ccd(&mode)?,
            Strategy::Mode => {
                let (lp, ga) = self.evaluate(mode.log_theta, Some(&mode.latent_mode))?;
                vec![self.point_from([0.0, 0.0], lp, 1.0, &ga, mode.log_theta)?]
            }
        };
        let t2 = std::time::Instant::now();
        let marginals = integrate_marginals(&points)?;
        let t3 = std::time::Instant::now();
        Ok(InlaFit {
            strategy: self.config.strategy,
            mode,
            points,
            marginals,
            timings: InlaTimings {
                mode_search_s: (t1 - t0).as_secs_f64(),
                exploration_s: (t2 - t1).as_secs_f64(),
                integration_s: (t3 - t2).as_secs_f64(),
            },
        })
    }
}

fn mat_vec(m: [[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// Inverse-Hessian BFGS update `(I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ`.
fn bfgs_update(h: [[f64; 2]; 2], s: [f64; 2], y: [f64; 2], sy: f64) -> [[f64; 2]; 2] {
    let rho = 1.0 / sy;
    let mut a = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            a[i][j] = if i == j { 1.0 } else { 0.0 } - rho * s[i] * y[j];
        }
    }
    let mut ah = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            ah[i][j] = a[i][0] * h[0][j] + a[i][1] * h[1][j];
        }
    }
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            // (A H Aᵀ)_ij + ρ s_i s_j
            out[i][j] = ah[i][0] * a[j][0] + ah[i][1] * a[j][1] + rho * s[i] * s[j];
        }
    }
    out
}
