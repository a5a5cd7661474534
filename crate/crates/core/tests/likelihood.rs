//! Observation models against independent log-pmf and finite-difference
//! oracles.

use poisson_inla::likelihood::{
    gaussian_loglik, poisson_grad_hess, poisson_loglik, CountField, GaussianObservations, ObservationModel,
};
use proptest::prelude::*;
use statrs::distribution::{Continuous, Discrete, Normal, Poisson};

#[test]
fn poisson_matches_log_pmf() {
    let y = CountField::new(1, 1, vec![3]).unwrap();
    let v = poisson_loglik(&y, &[2.0]).unwrap();
    assert!((v - (-1.712318)).abs() < 1e-6);
    assert!((v - Poisson::new(2.0).unwrap().ln_pmf(3)).abs() < 1e-12);
}

#[test]
fn gaussian_matches_dense_normal_density() {
    let y = [0.3, -1.2, 4.0, 2.5, 0.0];
    let x = [1.0, -0.7, 3.1, 2.5, -2.0];
    let v: f64 = 0.7;
    let oracle: f64 = y
        .iter()
        .zip(&x)
        .map(|(a, b)| Normal::new(*b, v.sqrt()).unwrap().ln_pdf(*a))
        .sum();
    assert!((gaussian_loglik(&y, &x, v).unwrap() - oracle).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn poisson_log_pmf_sum(ys in prop::collection::vec(0u64..60, 1..20), seed in 0.5f64..50.0) {
        let n = ys.len();
        let x: Vec<f64> = (0..n).map(|i| 0.5 + (seed * (i as f64 + 1.0)) % 49.5).collect();
        let y = CountField::new(1, n, ys.clone()).unwrap();
        let oracle: f64 = ys.iter().zip(&x).map(|(&k, &r)| Poisson::new(r).unwrap().ln_pmf(k)).sum();
        prop_assert!((poisson_loglik(&y, &x).unwrap() - oracle).abs() <= 1e-9 * oracle.abs().max(1.0));
    }

    #[test]
    fn derivatives_match_central_differences(k in 0u64..80, x in 0.5f64..50.0) {
        let y = CountField::new(1, 1, vec![k]).unwrap();
        let f = |t: f64| poisson_loglik(&y, &[t]).unwrap();
        let (g, h) = poisson_grad_hess(&y, &[x]).unwrap();
        let e = 1e-4 * x;
        let fd_g = (f(x + e) - f(x - e)) / (2.0 * e);
        let e2 = 1e-3 * x;
        let fd_h = (f(x + e2) - 2.0 * f(x) + f(x - e2)) / (e2 * e2);
        prop_assert!((g[0] - fd_g).abs() <= 1e-6 * g[0].abs().max(1.0), "g {} vs {}", g[0], fd_g);
        prop_assert!((h[0] - fd_h).abs() <= 1e-6 * h[0].abs().max(1.0) + 1e-5, "h {} vs {}", h[0], fd_h);
    }

    #[test]
    fn gaussian_model_matches_free_function(y in prop::collection::vec(-5.0f64..5.0, 1..10), v in 0.1f64..4.0) {
        let x: Vec<f64> = y.iter().map(|t| t * 0.5 + 0.1).collect();
        let m = GaussianObservations::new(y.clone(), v).unwrap();
        prop_assert_eq!(m.log_lik(&x).unwrap(), gaussian_loglik(&y, &x, v).unwrap());
        let (g, h) = m.grad_hess(&x).unwrap();
        for i in 0..y.len() {
            prop_assert!((g[i] - (y[i] - x[i]) / v).abs() <= 1e-12);
            prop_assert!((h[i] + 1.0 / v).abs() <= 1e-12);
        }
    }
}
