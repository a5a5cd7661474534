//! Observation models: the identity-link Poisson model for photon counts and a
//! Gaussian model used to check the pipeline where the Laplace step is exact.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{check_len, Error, Result};

/// Conditionally independent per-pixel observations of a latent field.
pub trait ObservationModel: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `ln p(y | x)`.
    fn log_lik(&self, x: &[f64]) -> Result<f64>;

    /// `ln p(y | x_new) − ln p(y | x_old)`, accumulated per pixel so that
    /// small changes keep their relative precision.
    fn log_lik_change(&self, x_new: &[f64], x_old: &[f64]) -> Result<f64> {
        Ok(self.log_lik(x_new)? - self.log_lik(x_old)?)
    }

    /// Per-pixel gradient and Hessian diagonal of `ln p(y | x)`.
    fn grad_hess(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Whether the latent field is restricted to the positive orthant.
    fn positive_support(&self) -> bool;

    /// Starting point for mode searches.
    fn initial_guess(&self) -> Vec<f64>;
}

/// Non-negative photon counts on a `rows × cols` lattice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountField {
    rows: usize,
    cols: usize,
    counts: Vec<u64>,
}

impl CountField {
    pub fn new(rows: usize, cols: usize, counts: Vec<u64>) -> Result<Self> {
        check_len(rows * cols, counts.len())?;
        Ok(Self { rows, cols, counts })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// `ln y!`, exact for `y ∈ {0, 1}`.
pub fn ln_factorial(y: u64) -> f64 {
    if y < 2 {
        0.0
    } else {
        ln_gamma(y as f64 + 1.0)
    }
}

fn check_rates(x: &[f64]) -> Result<()> {
    match x.iter().position(|&v| !(v > 0.0)) {
        Some(index) => Err(Error::NonPositiveRate {
            index,
            value: x[index],
        }),
        None => Ok(()),
    }
}

/// `Σ_i (y_i ln x_i − x_i − ln y_i!)`.
pub fn poisson_loglik(y: &CountField, x: &[f64]) -> Result<f64> {
    check_len(y.counts.len(), x.len())?;
    check_rates(x)?;
    Ok(y
        .counts
        .iter()
        .zip(x)
        .map(|(&yi, &xi)| {
            let yf = yi as f64;
            let t = if yi == 0 { 0.0 } else { yf * xi.ln() };
            t - xi - ln_factorial(yi)
        })
        .sum())
}

/// Gradient `y/x − 1` and Hessian diagonal `−y/x²`.
pub fn poisson_grad_hess(y: &CountField, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(y.counts.len(), x.len())?;
    check_rates(x)?;
    let mut g = Vec::with_capacity(x.len());
    let mut h = Vec::with_capacity(x.len());
    for (&yi, &xi) in y.counts.iter().zip(x) {
        let yf = yi as f64;
        g.push(yf / xi - 1.0);
        h.push(-yf / (xi * xi));
    }
    Ok((g, h))
}

impl ObservationModel for CountField {
    fn len(&self) -> usize {
        self.counts.len()
    }

    fn log_lik(&self, x: &[f64]) -> Result<f64> {
        poisson_loglik(self, x)
    }

    fn log_lik_change(&self, x_new: &[f64], x_old: &[f64]) -> Result<f64> {
        check_len(self.counts.len(), x_new.len())?;
        check_len(self.counts.len(), x_old.len())?;
        check_rates(x_new)?;
        check_rates(x_old)?;
        Ok(self
            .counts
            .iter()
            .zip(x_new.iter().zip(x_old))
            .map(|(&yi, (&a, &b))| {
                let d = a - b;
                let t = if yi == 0 { 0.0 } else { yi as f64 * (d / b).ln_1p() };
                t - d
            })
            .sum())
    }

    fn grad_hess(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        poisson_grad_hess(self, x)
    }

    fn positive_support(&self) -> bool {
        true
    }

    fn initial_guess(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| (c as f64).max(0.5)).collect()
    }
}

/// `Σ_i ln N(y_i | x_i, obs_var)`.
pub fn gaussian_loglik(y: &[f64], x: &[f64], obs_var: f64) -> Result<f64> {
    if !(obs_var > 0.0 && obs_var.is_finite()) {
        return Err(Error::InvalidVariance(obs_var));
    }
    check_len(y.len(), x.len())?;
    let c = -0.5 * (2.0 * PI * obs_var).ln();
    Ok(y
        .iter()
        .zip(x)
        .map(|(a, b)| c - 0.5 * (a - b) * (a - b) / obs_var)
        .sum())
}

/// Gaussian observations with known variance. Test-only model: with it the
/// Gaussian approximation of the latent posterior is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianObservations {
    y: Vec<f64>,
    obs_var: f64,
}

impl GaussianObservations {
    pub fn new(y: Vec<f64>, obs_var: f64) -> Result<Self> {
        if !(obs_var > 0.0 && obs_var.is_finite()) {
            return Err(Error::InvalidVariance(obs_var));
        }
        Ok(Self { y, obs_var })
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn obs_var(&self) -> f64 {
        self.obs_var
    }
}

impl ObservationModel for GaussianObservations {
    fn len(&self) -> usize {
        self.y.len()
    }

    fn log_lik(&self, x: &[f64]) -> Result<f64> {
        gaussian_loglik(&self.y, x, self.obs_var)
    }

    fn log_lik_change(&self, x_new: &[f64], x_old: &[f64]) -> Result<f64> {
        check_len(self.y.len(), x_new.len())?;
        check_len(self.y.len(), x_old.len())?;
        Ok(self
            .y
            .iter()
            .zip(x_new.iter().zip(x_old))
            .map(|(y, (a, b))| -(b - a) * (2.0 * y - a - b) / (2.0 * self.obs_var))
            .sum())
    }

    fn grad_hess(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len(self.y.len(), x.len())?;
        let g = self
            .y
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) / self.obs_var)
            .collect();
        Ok((g, vec![-1.0 / self.obs_var; x.len()]))
    }

    fn positive_support(&self) -> bool {
        false
    }

    fn initial_guess(&self) -> Vec<f64> {
        self.y.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use statrs::distribution::{Discrete, Poisson};

    fn counts(v: &[u64]) -> CountField {
        CountField::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn poisson_values() {
        assert_eq!(poisson_loglik(&counts(&[0]), &[2.0]).unwrap(), -2.0);
        assert_eq!(poisson_loglik(&counts(&[1]), &[1.0]).unwrap(), -1.0);
        let v = poisson_loglik(&counts(&[3]), &[2.0]).unwrap();
        assert_relative_eq!(v, 3.0 * 2f64.ln() - 2.0 - 6f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(v, Poisson::new(2.0).unwrap().ln_pmf(3), epsilon = 1e-12);
        assert_relative_eq!(v, -1.712318, epsilon = 1e-6);
    }

    #[test]
    fn poisson_derivatives() {
        let (g, h) = poisson_grad_hess(&counts(&[4]), &[2.0]).unwrap();
        assert_eq!((g[0], h[0]), (1.0, -1.0));
        let (g, h) = poisson_grad_hess(&counts(&[0]), &[5.0]).unwrap();
        assert_eq!((g[0], h[0]), (-1.0, 0.0));
    }

    #[test]
    fn rejects_non_positive_rates() {
        let y = counts(&[0, 2]);
        assert!(matches!(
            poisson_loglik(&y, &[1.0, 0.0]),
            Err(Error::NonPositiveRate { index: 1, .. })
        ));
        assert!(matches!(
            poisson_grad_hess(&y, &[-1.0, 1.0]),
            Err(Error::NonPositiveRate { index: 0, .. })
        ));
    }

    #[test]
    fn large_counts_stay_finite() {
        let v = poisson_loglik(&counts(&[1_000_000]), &[1_000_000.0]).unwrap();
        assert!(v.is_finite());
        assert_relative_eq!(v, Poisson::new(1e6).unwrap().ln_pmf(1_000_000), epsilon = 1e-8);
    }

    #[test]
    fn gaussian_values() {
        let y = [0.3, -1.2, 4.0];
        assert_relative_eq!(
            gaussian_loglik(&y, &y, 1.0).unwrap(),
            -1.5 * (2.0 * PI).ln(),
            epsilon = 1e-14
        );
        assert_relative_eq!(
            gaussian_loglik(&[1.0], &[0.0], 1.0).unwrap(),
            -1.4189385332046727,
            epsilon = 1e-14
        );
        assert!(matches!(gaussian_loglik(&[1.0], &[0.0], 0.0), Err(Error::InvalidVariance(_))));
        assert!(GaussianObservations::new(vec![1.0], -2.0).is_err());
    }

    #[test]
    fn gaussian_matches_direct_summation() {
        let y: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin() * 5.0).collect();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).cos() * 4.0).collect();
        let v: f64 = 1.7;
        let mut oracle = 0.0;
        for i in 0..40 {
            let z = (y[i] - x[i]) / v.sqrt();
            oracle += (-0.5 * z * z).exp().ln() - (2.0 * PI * v).sqrt().ln();
        }
        assert_relative_eq!(gaussian_loglik(&y, &x, v).unwrap(), oracle, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn derivatives_match_finite_differences(
            pairs in proptest::collection::vec((0u64..60, 0.5f64..50.0), 1..20)
        ) {
            let y = counts(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let x: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let (g, h) = poisson_grad_hess(&y, &x).unwrap();
            let eps = 1e-5;
            for i in 0..x.len() {
                let single = counts(&[y.counts()[i]]);
                let f = |v: f64| poisson_loglik(&single, &[v]).unwrap();
                let fd = (f(x[i] + eps) - f(x[i] - eps)) / (2.0 * eps);
                prop_assert!((g[i] - fd).abs() <= 1e-6 * g[i].abs().max(1.0));
                let gf = |v: f64| poisson_grad_hess(&single, &[v]).unwrap().0[0];
                let fd2 = (gf(x[i] + eps) - gf(x[i] - eps)) / (2.0 * eps);
                prop_assert!((h[i] - fd2).abs() <= 1e-6 * h[i].abs().max(1.0));
                prop_assert!(h[i] <= 0.0);
            }
            // Additivity over pixels.
            let total = poisson_loglik(&y, &x).unwrap();
            let parts: f64 = (0..x.len())
                .map(|i| poisson_loglik(&counts(&[y.counts()[i]]), &[x[i]]).unwrap())
                .sum();
            prop_assert_eq!(total, parts);
        }

        #[test]
        fn change_matches_difference(
            pairs in proptest::collection::vec((0u64..60, 0.5f64..50.0, -0.4f64..0.4), 1..20)
        ) {
            let y = counts(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let old: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let new: Vec<f64> = pairs.iter().map(|p| p.1 + p.2).collect();
            let direct = poisson_loglik(&y, &new).unwrap() - poisson_loglik(&y, &old).unwrap();
            let change = y.log_lik_change(&new, &old).unwrap();
            prop_assert!((direct - change).abs() <= 1e-9 * direct.abs().max(1.0));
            let obs = GaussianObservations::new(old.clone(), 0.7).unwrap();
            let direct = obs.log_lik(&new).unwrap() - obs.log_lik(&old).unwrap();
            prop_assert!((direct - obs.log_lik_change(&new, &old).unwrap()).abs() <= 1e-9 * direct.abs().max(1.0));
        }
    }
}
