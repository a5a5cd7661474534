//! Gaussian approximation of `p(x | θ, y)` at the mode of the full
//! conditional.
//!
//! The mode is found by damped Newton iterations on
//! `ln p(x | θ) + ln p(y | x)`. For models whose latent field lives on the
//! positive orthant, iterates are projected onto `x ≥ ε_x`; pixels pinned at
//! the floor with a non-positive gradient form an active set that is held
//! fixed in the Newton system (projected Newton).

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::gmrf::{build_icar_precision, grid_logdet, GridGraph, IcarHyper};
use crate::likelihood::ObservationModel;
use crate::sparse::{CholFactor, Ordering, SparseSymMatrix, SymbolicCholesky};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaplaceConfig {
    /// Infinity-norm tolerance on the (projected) gradient.
    pub grad_tol: f64,
    /// Relative objective change below which an accepted step ends the search.
    pub rel_obj_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Lower bound on positive-support latent values.
    pub floor: f64,
    #[serde(skip)]
    pub ordering: Ordering,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            rel_obj_tol: 1e-12,
            max_iter: 100,
            max_halvings: 40,
            floor: 1e-8,
            ordering: Ordering::Natural,
        }
    }
}

/// Gaussian approximation `N(mode, (Q + C)⁻¹)` with `C = −diag(∂² ln p(y|x))`
/// evaluated at the mode.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub mode: Vec<f64>,
    pub approx_precision: SparseSymMatrix,
    pub factor: CholFactor,
    /// `ln p̃_G(x* | θ, y) = ½ ln det(Q + C) − (n/2) ln 2π`.
    pub log_density_at_mode: f64,
    /// Pixels held at the positivity floor.
    pub clamped: Vec<bool>,
    pub iterations: usize,
    /// Objective after the starting point and after every accepted step.
    pub objective_trace: Vec<f64>,
    /// Projected gradient infinity norm at the returned mode.
    pub gradient_norm: f64,
    variances: OnceLock<Vec<f64>>,
}

impl GaussianApprox {
    /// Diagonal of `(Q + C)⁻¹`, computed by selected inversion on first use.
    pub fn cond_variances(&self) -> &[f64] {
        self.variances.get_or_init(|| self.factor.inverse_diagonal())
    }

    pub fn n(&self) -> usize {
        self.mode.len()
    }
}

/// Reusable Newton solver for one lattice and observation model. The
/// sparsity pattern of `Q + C` does not depend on `θ`, so the symbolic
/// factorization is shared across every call.
pub struct LaplaceSolver<'a, M: ObservationModel + ?Sized> {
    grid: GridGraph,
    model: &'a M,
    config: LaplaceConfig,
    symbolic: Arc<SymbolicCholesky>,
}

impl<'a, M: ObservationModel + ?Sized> LaplaceSolver<'a, M> {
    pub fn new(grid: GridGraph, model: &'a M, config: LaplaceConfig) -> Result<Self> {
        check_len(grid.len(), model.len())?;
        // The pattern only depends on the lattice.
        let probe = build_icar_precision(&grid, &IcarHyper::new(1.0, 1.0)?);
        let symbolic = SymbolicCholesky::analyze(&probe, config.ordering);
        Ok(Self {
            grid,
            model,
            config,
            symbolic,
        })
    }

    pub fn grid(&self) -> &GridGraph {
        &self.grid
    }

    pub fn model(&self) -> &'a M {
        self.model
    }

    pub fn config(&self) -> &LaplaceConfig {
        &self.config
    }

    fn objective(&self, q: &SparseSymMatrix, x: &[f64]) -> Result<f64> {
        Ok(-0.5 * q.quad_form(x)? + self.model.log_lik(x)?)
    }

    /// `objective(x_new) − objective(x_old)` without cancellation:
    /// `xᵀQx` differences use `(x_new − x_old)ᵀ Q (x_new + x_old)`.
    fn objective_change(&self, q: &SparseSymMatrix, x_new: &[f64], x_old: &[f64]) -> Result<f64> {
        let diff: Vec<f64> = x_new.iter().zip(x_old).map(|(a, b)| a - b).collect();
        let sum: Vec<f64> = x_new.iter().zip(x_old).map(|(a, b)| a + b).collect();
        let q_sum = q.mul_vec(&sum)?;
        let quad: f64 = diff.iter().zip(&q_sum).map(|(a, b)| a * b).sum();
        Ok(-0.5 * quad + self.model.log_lik_change(x_new, x_old)?)
    }

    /// Safeguarded Newton search for the mode, then the Gaussian
    /// approximation there.
    pub fn approximate(&self, h: &IcarHyper, x0: Option<&[f64]>) -> Result<GaussianApprox> {
        let cfg = &self.config;
        let n = self.grid.len();
        let positive = self.model.positive_support();
        let q = build_icar_precision(&self.grid, h);

        let mut x = match x0 {
            Some(v) => {
                check_len(n, v.len())?;
                v.to_vec()
            }
            None => self.model.initial_guess(),
        };
        if positive {
            for v in &mut x {
                *v = v.max(cfg.floor);
            }
        }
        let project = |v: f64| if positive { v.max(cfg.floor) } else { v };

        let mut f = self.objective(&q, &x)?;
        let mut trace = vec![f];
        let mut iterations = 0;
        let mut converged = false;
        let mut active = vec![false; n];

        while iterations < cfg.max_iter {
            let (gl, hl) = self.model.grad_hess(&x)?;
            let qx = q.mul_vec(&x)?;
            let grad: Vec<f64> = gl.iter().zip(&qx).map(|(a, b)| a - b).collect();
            let mut pg: f64 = 0.0;
            for i in 0..n {
                active[i] = positive && x[i] <= cfg.floor && grad[i] <= 0.0;
                if !active[i] {
                    pg = pg.max(grad[i].abs());
                }
            }
            if pg <= cfg.grad_tol {
                converged = true;
                break;
            }
            iterations += 1;

            let curvature: Vec<f64> = hl.iter().map(|v| -v).collect();
            let mut hess = q.with_added_diagonal(&curvature)?;
            let mut rhs = grad;
            if active.iter().any(|&a| a) {
                pin_active(&mut hess, &active);
                for i in (0..n).filter(|&i| active[i]) {
                    rhs[i] = 0.0;
                }
            }
            let step = self.symbolic.factorize(&hess)?.solve(&rhs)?;

            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..=cfg.max_halvings {
                let cand: Vec<f64> = x
                    .iter()
                    .zip(&step)
                    .map(|(xi, si)| project(xi + alpha * si))
                    .collect();
                let change = self.objective_change(&q, &cand, &x)?;
                if change.is_finite() && change >= 0.0 {
                    accepted = Some((cand, change));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((cand, change)) = accepted else {
                // No ascent left at working precision.
                converged = true;
                break;
            };
            let rel = change / f.abs().max(1.0);
            x = cand;
            f += change;
            trace.push(f);
            if rel <= cfg.rel_obj_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence(format!(
                "Newton search for the latent mode exceeded {} iterations at sigma2={}, d={}",
                cfg.max_iter,
                h.sigma2(),
                h.d()
            )));
        }

        let (gl, hl) = self.model.grad_hess(&x)?;
        let qx = q.mul_vec(&x)?;
        let mut clamped = vec![false; n];
        let mut gradient_norm: f64 = 0.0;
        for i in 0..n {
            let g = gl[i] - qx[i];
            clamped[i] = positive && x[i] <= cfg.floor && g <= 0.0;
            if !clamped[i] {
                gradient_norm = gradient_norm.max(g.abs());
            }
        }
        let curvature: Vec<f64> = hl.iter().map(|v| -v).collect();
        let approx_precision = q.with_added_diagonal(&curvature)?;
        let factor = self.symbolic.factorize(&approx_precision)?;
        let log_density_at_mode = 0.5 * factor.log_det() - 0.5 * n as f64 * (2.0 * PI).ln();
        Ok(GaussianApprox {
            mode: x,
            approx_precision,
            factor,
            log_density_at_mode,
            clamped,
            iterations,
            objective_trace: trace,
            gradient_norm,
            variances: OnceLock::new(),
        })
    }

    /// `ln p(x*|θ) + ln p(y|x*) − ln p̃_G(x*|θ, y)`: the Laplace estimate of
    /// `ln p(y | θ)`.
    pub fn log_marginal_correction(&self, ga: &GaussianApprox, h: &IcarHyper) -> Result<f64> {
        let n = self.grid.len();
        check_len(n, ga.mode.len())?;
        let q = build_icar_precision(&self.grid, h);
        let prior = -0.5 * n as f64 * (2.0 * PI).ln() + 0.5 * grid_logdet(&self.grid, h)
            - 0.5 * q.quad_form(&ga.mode)?;
        Ok(prior + self.model.log_lik(&ga.mode)? - ga.log_density_at_mode)
    }
}

/// Replaces rows and columns of active indices by the identity.
fn pin_active(m: &mut SparseSymMatrix, active: &[bool]) {
    let n = m.n();
    let col_ptr = m.col_ptr().to_vec();
    let row_idx = m.row_idx().to_vec();
    let mut values = m.values().to_vec();
    for j in 0..n {
        for p in col_ptr[j]..col_ptr[j + 1] {
            let i = row_idx[p];
            if active[i] || active[j] {
                values[p] = if i == j { 1.0 } else { 0.0 };
            }
        }
    }
    *m = SparseSymMatrix::from_csc(n, col_ptr, row_idx, values).expect("pattern unchanged");
}

/// One-shot Gaussian approximation with default settings.
pub fn gaussian_approx<M: ObservationModel + ?Sized>(
    g: &GridGraph,
    h: &IcarHyper,
    model: &M,
    x0: Option<&[f64]>,
) -> Result<GaussianApprox> {
    LaplaceSolver::new(*g, model, LaplaceConfig::default())?.approximate(h, x0)
}

/// Laplace estimate of `ln p(y | θ)` for an approximation built at `h`.
pub fn conditional_log_marginal_correction<M: ObservationModel + ?Sized>(
    ga: &GaussianApprox,
    g: &GridGraph,
    h: &IcarHyper,
    model: &M,
) -> Result<f64> {
    LaplaceSolver::new(*g, model, LaplaceConfig::default())?.log_marginal_correction(ga, h)
}
