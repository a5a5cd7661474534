//! Metropolis-adjusted Langevin sampler for the exact latent posterior.
//!
//! For positive-support models the chain runs on `u = ln x` and the target
//! carries the Jacobian `Σ u_i`; for unrestricted models it runs on `x`
//! directly. Proposals are preconditioned by a fixed diagonal built from the
//! target's curvature at the starting point. The step size is tuned by
//! Robbins–Monro during burn-in and frozen afterwards. Hyperparameters are
//! either held fixed or updated by random-walk Metropolis on `(ln σ², ln d)`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::gmrf::{build_icar_precision, grid_logdet, GridGraph, IcarHyper};
use crate::inla::HyperPrior;
use crate::laplace::{LaplaceConfig, LaplaceSolver};
use crate::likelihood::ObservationModel;
use crate::sparse::SparseSymMatrix;

/// Hyperparameter handling during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaMode {
    Fixed { theta: IcarHyper },
    /// Random-walk Metropolis on `(ln σ², ln d)` every `every` latent steps.
    Sample {
        init: IcarHyper,
        prior: HyperPrior,
        every: usize,
    },
}

impl ThetaMode {
    pub fn initial(&self) -> IcarHyper {
        match self {
            ThetaMode::Fixed { theta } => *theta,
            ThetaMode::Sample { init, .. } => *init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub steps: usize,
    pub burn_in: usize,
    /// Initial step size in preconditioned units.
    pub step_size: f64,
    pub seed: u64,
    pub theta_mode: ThetaMode,
    pub target_accept: f64,
    pub adapt: bool,
    pub hist_bins: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            burn_in: 1000,
            step_size: 0.5,
            seed: 0,
            theta_mode: ThetaMode::Fixed {
                theta: IcarHyper::new(1.0, 1.0).expect("unit hyperparameters are valid"),
            },
            target_accept: 0.574,
            adapt: true,
            hist_bins: 40,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.steps {
            return Err(Error::InvalidConfig(format!(
                "burn_in ({}) must be smaller than steps ({})",
                self.burn_in, self.steps
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidConfig("target_accept must lie in (0, 1)".into()));
        }
        if self.hist_bins == 0 {
            return Err(Error::InvalidConfig("hist_bins must be at least 1".into()));
        }
        if let ThetaMode::Sample { prior, every, .. } = &self.theta_mode {
            if *every == 0 {
                return Err(Error::InvalidConfig("theta update interval must be at least 1".into()));
            }
            prior.validate()?;
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.steps - self.burn_in
    }
}

/// Retained-sample histogram with fixed edges. Samples outside the edges
/// are counted in the end bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl PixelHistogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        let width = (hi - lo) / bins as f64;
        Self {
            edges: (0..=bins).map(|k| lo + k as f64 * width).collect(),
            counts: vec![0; bins],
        }
    }

    pub fn push(&mut self, v: f64) {
        let bins = self.counts.len();
        let lo = self.edges[0];
        let width = (self.edges[bins] - lo) / bins as f64;
        let k = ((v - lo) / width).floor();
        let k = if k.is_nan() || k < 0.0 { 0 } else { (k as usize).min(bins - 1) };
        self.counts[k] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Running per-pixel moments and histograms of retained samples.
#[derive(Debug, Clone)]
pub struct SampleAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    histograms: Vec<PixelHistogram>,
}

impl SampleAccumulator {
    pub fn new(histograms: Vec<PixelHistogram>) -> Self {
        let n = histograms.len();
        Self {
            count: 0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            histograms,
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let c = self.count as f64;
        for (i, &v) in x.iter().enumerate() {
            let d = v - self.mean[i];
            self.mean[i] += d / c;
            self.m2[i] += d * (v - self.mean[i]);
            self.histograms[i].push(v);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Per-pixel mean, population variance and histograms.
    pub fn finish(self) -> (Vec<f64>, Vec<f64>, Vec<PixelHistogram>) {
        let c = self.count.max(1) as f64;
        let var = self.m2.iter().map(|m| m / c).collect();
        (self.mean, var, self.histograms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub histograms: Vec<PixelHistogram>,
    /// Latent acceptance rate over retained steps.
    pub acceptance_rate: f64,
    pub burn_in_acceptance_rate: f64,
    /// Hyperparameter acceptance rate over retained updates, when sampled.
    pub theta_acceptance_rate: Option<f64>,
    /// Posterior mean of `(ln σ², ln d)` over retained steps, when sampled.
    pub theta_log_mean: Option<[f64; 2]>,
    pub final_step_size: f64,
    pub retained: usize,
    pub sampler: String,
    pub seed: u64,
    pub config: ChainConfig,
}

/// Per-pixel retained-sample mean.
pub fn eap_from_chain(s: &ChainSummary) -> Vec<f64> {
    s.mean.clone()
}

/// Writes `pixel_index,bin_left,bin_right,count` rows for the given pixels.
pub fn write_histograms_csv<W: Write>(out: W, s: &ChainSummary, pixels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pixel_index", "bin_left", "bin_right", "count"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for &p in pixels {
        let h = s.histograms.get(p).ok_or_else(|| {
            Error::InvalidConfig(format!("pixel {p} out of range for {} pixels", s.histograms.len()))
        })?;
        for (k, c) in h.counts.iter().enumerate() {
            w.write_record([
                p.to_string(),
                format!("{:?}", h.edges[k]),
                format!("{:?}", h.edges[k + 1]),
                c.to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::io("writing histogram csv", e))
}

struct Target<'a, M: ObservationModel + ?Sized> {
    model: &'a M,
    positive: bool,
    q: SparseSymMatrix,
}

struct State {
    u: Vec<f64>,
    x: Vec<f64>,
    log_target: f64,
    grad: Vec<f64>,
}

impl<M: ObservationModel + ?Sized> Target<'_, M> {
    fn to_x(&self, u: &[f64]) -> Vec<f64> {
        if self.positive {
            u.iter().map(|v| v.exp()).collect()
        } else {
            u.to_vec()
        }
    }

    /// Log target and its gradient in sampling coordinates; `None` when
    /// the point is numerically outside the support.
    fn eval(&self, u: Vec<f64>) -> Option<State> {
        let x = self.to_x(&u);
        if x.iter().any(|v| !v.is_finite() || (self.positive && *v <= 0.0)) {
            return None;
        }
        let qx = self.q.mul_vec(&x).ok()?;
        let quad: f64 = x.iter().zip(&qx).map(|(a, b)| a * b).sum();
        let ll = self.model.log_lik(&x).ok()?;
        let (g, _) = self.model.grad_hess(&x).ok()?;
        let (log_target, grad) = if self.positive {
            let jac: f64 = u.iter().sum();
            let grad = (0..x.len()).map(|i| x[i] * (g[i] - qx[i]) + 1.0).collect();
            (-0.5 * quad + ll + jac, grad)
        } else {
            let grad = (0..x.len()).map(|i| g[i] - qx[i]).collect();
            (-0.5 * quad + ll, grad)
        };
        log_target.is_finite().then_some(State {
            u,
            x,
            log_target,
            grad,
        })
    }

    /// Inverse square-root curvature of the negative log target at `x`,
    /// capped at one.
    fn preconditioner(&self, x: &[f64]) -> Result<Vec<f64>> {
        let qx = self.q.mul_vec(x)?;
        let (g, h) = self.model.grad_hess(x)?;
        let qd = self.q.diagonal();
        Ok((0..x.len())
            .map(|i| {
                let c = if self.positive {
                    -(x[i] * (g[i] - qx[i]) + x[i] * x[i] * (h[i] - qd[i]))
                } else {
                    qd[i] - h[i]
                };
                1.0 / c.max(1.0).sqrt()
            })
            .collect())
    }
}

fn log_hyper_conditional(
    prior: &HyperPrior,
    g: &GridGraph,
    log_theta: [f64; 2],
    x: &[f64],
) -> Option<(f64, SparseSymMatrix)> {
    let h = IcarHyper::from_log(log_theta).ok()?;
    let q = build_icar_precision(g, &h);
    let quad = q.quad_form(x).ok()?;
    let lp = prior.log_density(log_theta) + 0.5 * grid_logdet(g, &h) - 0.5 * quad;
    lp.is_finite().then_some((lp, q))
}

/// MALA chain; see [`run_chain_with_observer`].
pub fn run_chain<M: ObservationModel + ?Sized>(
    g: &GridGraph,
    model: &M,
    cfg: &ChainConfig,
    x_init: Option<&[f64]>,
) -> Result<ChainSummary> {
    run_chain_with_observer(g, model, cfg, x_init, |_, _| {})
}

/// Runs the chain and calls `observer(step, x)` on every retained sample.
///
/// Without `x_init` the chain starts at the Laplace mode for the initial
/// hyperparameters, floored at 0.1 for positive-support models.
pub fn run_chain_with_observer<M, F>(
    g: &GridGraph,
    model: &M,
    cfg: &ChainConfig,
    x_init: Option<&[f64]>,
    mut observer: F,
) -> Result<ChainSummary>
where
    M: ObservationModel + ?Sized,
    F: FnMut(usize, &[f64]),
{
    cfg.validate()?;
    let n = g.len();
    check_len(n, model.len())?;
    let positive = model.positive_support();
    let mut theta = cfg.theta_mode.initial();

    let x0 = match x_init {
        Some(v) => {
            check_len(n, v.len())?;
            v.to_vec()
        }
        None => LaplaceSolver::new(*g, model, LaplaceConfig::default())?
            .approximate(&theta, None)?
            .mode,
    };
    let x0: Vec<f64> = if positive {
        x0.iter().map(|v| v.max(0.1)).collect()
    } else {
        x0
    };

    let mut target = Target {
        model,
        positive,
        q: build_icar_precision(g, &theta),
    };
    let u0: Vec<f64> = if positive { x0.iter().map(|v| v.ln()).collect() } else { x0.clone() };
    let mut state = target
        .eval(u0)
        .ok_or_else(|| Error::InvalidConfig("chain start lies outside the target support".into()))?;
    let scale = target.preconditioner(&state.x)?;
    let scale2: Vec<f64> = scale.iter().map(|s| s * s).collect();

    let mut burn = SampleAccumulator::new(vec![PixelHistogram::new(0.0, 1.0, 1); n]);
    let mut acc: Option<SampleAccumulator> = None;

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut log_eps = cfg.step_size.ln();
    let mut log_theta = theta.log_coords();
    let mut theta_log_step = 0.5f64.ln();
    let mut theta_sum = [0.0; 2];
    let (mut acc_burn, mut acc_kept) = (0usize, 0usize);
    let (mut th_prop, mut th_acc) = (0usize, 0usize);
    let mut xi = vec![0.0; n];

    for step in 0..cfg.steps {
        let eps = log_eps.exp();
        let e2 = eps * eps;
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let prop_u: Vec<f64> = (0..n)
            .map(|i| state.u[i] + 0.5 * e2 * scale2[i] * state.grad[i] + eps * scale[i] * xi[i])
            .collect();
        let log_u: f64 = rng.random::<f64>().ln();
        let mut a_prob = 0.0;
        if let Some(prop) = target.eval(prop_u) {
            let mut fwd = 0.0;
            let mut rev = 0.0;
            for i in 0..n {
                let var = e2 * scale2[i];
                let df = prop.u[i] - state.u[i] - 0.5 * var * state.grad[i];
                let dr = state.u[i] - prop.u[i] - 0.5 * var * prop.grad[i];
                fwd += df * df / var;
                rev += dr * dr / var;
            }
            let log_a = prop.log_target - state.log_target - 0.5 * rev + 0.5 * fwd;
            a_prob = log_a.min(0.0).exp();
            if log_u < log_a {
                state = prop;
                if step < cfg.burn_in {
                    acc_burn += 1;
                } else {
                    acc_kept += 1;
                }
            }
        }
        if step < cfg.burn_in && cfg.adapt {
            let gamma = ((step + 1) as f64).powf(-0.6);
            log_eps += gamma * (a_prob - cfg.target_accept);
        }

        if let ThetaMode::Sample { prior, every, .. } = &cfg.theta_mode {
            if (step + 1) % every == 0 {
                let s = theta_log_step.exp();
                let cand = [
                    log_theta[0] + s * rng.sample::<f64, _>(StandardNormal),
                    log_theta[1] + s * rng.sample::<f64, _>(StandardNormal),
                ];
                let log_u: f64 = rng.random::<f64>().ln();
                let cur = log_hyper_conditional(prior, g, log_theta, &state.x);
                let new = log_hyper_conditional(prior, g, cand, &state.x);
                let mut p = 0.0;
                if let (Some((lc, _)), Some((ln, qn))) = (cur, new) {
                    let log_a = ln - lc;
                    p = log_a.min(0.0).exp();
                    if log_u < log_a {
                        log_theta = cand;
                        theta = IcarHyper::from_log(cand)?;
                        target.q = qn;
                        state = target.eval(std::mem::take(&mut state.u)).ok_or_else(|| {
                            Error::NoConvergence(format!(
                                "latent state left the support after a hyperparameter move to sigma2={}, d={}",
                                theta.sigma2(),
                                theta.d()
                            ))
                        })?;
                        if step >= cfg.burn_in {
                            th_acc += 1;
                        }
                    }
                }
                if step >= cfg.burn_in {
                    th_prop += 1;
                } else if cfg.adapt {
                    let k = ((step + 1) / every) as f64;
                    theta_log_step += k.powf(-0.6) * (p - 0.35);
                }
            }
        }

        if step < cfg.burn_in {
            burn.push(&state.x);
        } else {
            if acc.is_none() {
                let layout = histogram_layout(&burn, &state.x, &scale, positive, cfg.hist_bins);
                acc = Some(SampleAccumulator::new(layout));
            }
            acc.as_mut().expect("accumulator initialised").push(&state.x);
            theta_sum[0] += log_theta[0];
            theta_sum[1] += log_theta[1];
            observer(step, &state.x);
        }
    }

    let acc = acc.expect("at least one retained step");
    let retained = acc.count();
    let (mean, variance, histograms) = acc.finish();
    let sampled = matches!(cfg.theta_mode, ThetaMode::Sample { .. });
    Ok(ChainSummary {
        mean,
        variance,
        histograms,
        acceptance_rate: acc_kept as f64 / retained as f64,
        burn_in_acceptance_rate: if cfg.burn_in > 0 {
            acc_burn as f64 / cfg.burn_in as f64
        } else {
            0.0
        },
        theta_acceptance_rate: sampled.then(|| if th_prop > 0 { th_acc as f64 / th_prop as f64 } else { 0.0 }),
        theta_log_mean: sampled.then(|| [theta_sum[0] / retained as f64, theta_sum[1] / retained as f64]),
        final_step_size: log_eps.exp(),
        retained,
        sampler: if positive {
            "mala-log".to_string()
        } else {
            "mala".to_string()
        },
        seed: cfg.seed,
        config: *cfg,
    })
}

/// Histogram edges fixed at the end of burn-in: ±5 standard deviations
/// around the burn-in mean, falling back to the preconditioner scale when
/// burn-in is too short.
fn histogram_layout(
    burn: &SampleAccumulator,
    x: &[f64],
    scale: &[f64],
    positive: bool,
    bins: usize,
) -> Vec<PixelHistogram> {
    let n = x.len();
    let use_burn = burn.count() >= 10;
    let c = burn.count().max(1) as f64;
    (0..n)
        .map(|i| {
            let (m, sd) = if use_burn {
                (burn.mean[i], (burn.m2[i] / c).sqrt())
            } else if positive {
                (x[i], x[i] * scale[i])
            } else {
                (x[i], scale[i])
            };
            let sd = if sd > 0.0 { sd } else { 1e-3 * m.abs().max(1.0) };
            let mut lo = m - 5.0 * sd;
            if positive {
                lo = lo.max(0.0);
            }
            PixelHistogram::new(lo, m + 5.0 * sd, bins)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::CountField;

    #[test]
    fn eap_of_constant_and_pair() {
        let mut a = SampleAccumulator::new(vec![PixelHistogram::new(0.0, 4.0, 4); 2]);
        a.push(&[1.0, 7.0]);
        a.push(&[3.0, 7.0]);
        let (mean, var, hist) = a.finish();
        assert_eq!(mean, vec![2.0, 7.0]);
        assert_eq!(var, vec![1.0, 0.0]);
        assert_eq!(hist[0].counts, vec![0, 1, 0, 1]);
        // Out-of-range samples land in the last bin.
        assert_eq!(hist[1].counts, vec![0, 0, 0, 2]);
    }

    #[test]
    fn config_validation() {
        let mut c = ChainConfig::default();
        assert!(c.validate().is_ok());
        c.burn_in = c.steps;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        c = ChainConfig {
            step_size: 0.0,
            ..ChainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn short_chain_is_reproducible() {
        let g = GridGraph::new(3, 3).unwrap();
        let y = CountField::new(3, 3, vec![3, 0, 5, 2, 8, 1, 4, 4, 6]).unwrap();
        let cfg = ChainConfig {
            steps: 600,
            burn_in: 200,
            seed: 11,
            ..ChainConfig::default()
        };
        let a = run_chain(&g, &y, &cfg, None).unwrap();
        let b = run_chain(&g, &y, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.retained, 400);
        assert!((0.0..=1.0).contains(&a.acceptance_rate));
        for h in &a.histograms {
            assert_eq!(h.total(), 400);
        }
        assert!(a.mean.iter().all(|&m| m > 0.0));
        let c = run_chain(&g, &y, &ChainConfig { seed: 12, ..cfg }, None).unwrap();
        assert_ne!(a.mean, c.mean);
    }
}
