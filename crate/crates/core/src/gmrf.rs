//! Proper ICAR prior on a 4-connected pixel lattice.
//!
//! Pixel `l` has full conditional
//! `N(Σ_{j∈C_l} x_j / (|C_l| + d), σ² / (|C_l| + d))`, which corresponds to
//! the joint zero-mean Gaussian with precision
//! `Q = ((D + d I) − A) / σ²` where `D` holds neighbour counts and `A` is the
//! lattice adjacency.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::sparse::SparseSymMatrix;

/// Rectangular lattice without periodic boundary, pixels indexed row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGraph {
    rows: usize,
    cols: usize,
}

impl GridGraph {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidConfig(format!("empty grid {rows}x{cols}")));
        }
        Ok(Self { rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The 4-connected neighbours of pixel `l`, in increasing index order.
    pub fn neighbors(&self, l: usize) -> impl Iterator<Item = usize> {
        let (r, c) = (l / self.cols, l % self.cols);
        let (rows, cols) = (self.rows, self.cols);
        [
            (r > 0).then(|| l - cols),
            (c > 0).then(|| l - 1),
            (c + 1 < cols).then(|| l + 1),
            (r + 1 < rows).then(|| l + cols),
        ]
        .into_iter()
        .flatten()
    }

    pub fn degree(&self, l: usize) -> usize {
        self.neighbors(l).count()
    }
}

/// Hyperparameters `(σ², d)` of the proper ICAR prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcarHyper {
    sigma2: f64,
    d: f64,
}

impl IcarHyper {
    pub fn new(sigma2: f64, d: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidHyper(format!("sigma2 must be positive, got {sigma2}")));
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::InvalidHyper(format!("d must be positive, got {d}")));
        }
        Ok(Self { sigma2, d })
    }

    /// From internal coordinates `(ln σ², ln d)`.
    pub fn from_log(log_theta: [f64; 2]) -> Result<Self> {
        Self::new(log_theta[0].exp(), log_theta[1].exp())
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn log_coords(&self) -> [f64; 2] {
        [self.sigma2.ln(), self.d.ln()]
    }
}

/// Precision matrix for arbitrary `(σ², d)` with `σ² > 0` and `d ≥ 0`.
/// `d = 0` gives the improper ICAR precision and is only meant for tests.
pub fn icar_precision_unchecked(g: &GridGraph, sigma2: f64, d: f64) -> SparseSymMatrix {
    let n = g.len();
    let off = -1.0 / sigma2;
    let mut col_ptr = Vec::with_capacity(n + 1);
    let mut row_idx = Vec::with_capacity(3 * n);
    let mut values = Vec::with_capacity(3 * n);
    col_ptr.push(0);
    for l in 0..n {
        row_idx.push(l);
        values.push((g.degree(l) as f64 + d) / sigma2);
        for j in g.neighbors(l).filter(|&j| j > l) {
            row_idx.push(j);
            values.push(off);
        }
        col_ptr.push(row_idx.len());
    }
    SparseSymMatrix::from_csc(n, col_ptr, row_idx, values).expect("lattice precision layout is valid")
}

/// `Q` with `Q_ii = (|C_i| + d)/σ²` and `Q_ij = −1/σ²` for neighbours.
pub fn build_icar_precision(g: &GridGraph, h: &IcarHyper) -> SparseSymMatrix {
    icar_precision_unchecked(g, h.sigma2, h.d)
}

/// Eigenvalues `2 − 2 cos(jπ/m)` of the path-graph Laplacian on `m` nodes.
fn path_eigenvalues(m: usize) -> Vec<f64> {
    (0..m)
        .map(|j| 2.0 - 2.0 * (j as f64 * PI / m as f64).cos())
        .collect()
}

/// Closed-form `ln det Q` from the Kronecker-sum structure of the lattice
/// Laplacian.
pub fn grid_logdet(g: &GridGraph, h: &IcarHyper) -> f64 {
    let lr = path_eigenvalues(g.rows);
    let lc = path_eigenvalues(g.cols);
    let mut acc = 0.0;
    for a in &lr {
        for b in &lc {
            acc += (h.d + a + b).ln();
        }
    }
    acc - g.len() as f64 * h.sigma2.ln()
}

/// `ln N(x | 0, Q⁻¹)`.
pub fn prior_logpdf(x: &[f64], g: &GridGraph, h: &IcarHyper) -> Result<f64> {
    check_len(g.len(), x.len())?;
    let q = build_icar_precision(g, h);
    let quad = q.quad_form(x)?;
    Ok(-0.5 * g.len() as f64 * (2.0 * PI).ln() + 0.5 * grid_logdet(g, h) - 0.5 * quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{factorize, Ordering};
    use approx::assert_relative_eq;

    #[test]
    fn neighbour_counts() {
        let g = GridGraph::new(3, 4).unwrap();
        assert_eq!(g.degree(0), 2);
        assert_eq!(g.degree(1), 3);
        assert_eq!(g.degree(5), 4);
        assert_eq!(g.degree(11), 2);
        assert_eq!(GridGraph::new(1, 1).unwrap().degree(0), 0);
        for l in 0..g.len() {
            for j in g.neighbors(l) {
                assert!(g.neighbors(j).any(|k| k == l));
            }
        }
    }

    #[test]
    fn two_by_two_improper_boundary() {
        let g = GridGraph::new(2, 2).unwrap();
        let q = icar_precision_unchecked(&g, 1.0, 0.0);
        #[rustfmt::skip]
        let expected = [
            2.0, -1.0, -1.0, 0.0,
            -1.0, 2.0, 0.0, -1.0,
            -1.0, 0.0, 2.0, -1.0,
            0.0, -1.0, -1.0, 2.0,
        ];
        assert_eq!(q.to_dense(), expected);
        let q1 = build_icar_precision(&g, &IcarHyper::new(1.0, 1.0).unwrap());
        let d1 = q1.to_dense();
        for i in 0..4 {
            for j in 0..4 {
                let id = if i == j { 1.0 } else { 0.0 };
                assert_eq!(d1[i * 4 + j], expected[i * 4 + j] + id);
            }
        }
    }

    #[test]
    fn center_pixel_entries() {
        let g = GridGraph::new(3, 3).unwrap();
        let q = build_icar_precision(&g, &IcarHyper::new(2.0, 0.5).unwrap());
        assert_eq!(q.get(4, 4), 2.25);
        for j in [1, 3, 5, 7] {
            assert_eq!(q.get(4, j), -0.5);
        }
        assert_eq!(q.get(4, 0), 0.0);
    }

    #[test]
    fn invalid_hyper() {
        assert!(matches!(IcarHyper::new(0.0, 1.0), Err(Error::InvalidHyper(_))));
        assert!(matches!(IcarHyper::new(1.0, -1.0), Err(Error::InvalidHyper(_))));
        assert!(matches!(IcarHyper::new(1.0, 0.0), Err(Error::InvalidHyper(_))));
        assert!(IcarHyper::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn two_by_two_logdet_values() {
        // Dense 4x4 determinants of Q: 45 for (1, 1); 45 / 16 for (2, 1).
        let g = GridGraph::new(2, 2).unwrap();
        assert_relative_eq!(
            grid_logdet(&g, &IcarHyper::new(1.0, 1.0).unwrap()),
            3.8066624897703196,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            grid_logdet(&g, &IcarHyper::new(2.0, 1.0).unwrap()),
            1.0340737675305385,
            epsilon = 1e-12
        );
    }

    #[test]
    fn conditionals_match_full_conditional_form() {
        let g = GridGraph::new(4, 5).unwrap();
        let h = IcarHyper::new(1.7, 0.3).unwrap();
        let q = build_icar_precision(&g, &h);
        let x: Vec<f64> = (0..g.len()).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        for i in 0..g.len() {
            let qii = q.get(i, i);
            let mean_from_q: f64 = -(0..g.len())
                .filter(|&j| j != i)
                .map(|j| q.get(i, j) * x[j])
                .sum::<f64>()
                / qii;
            let c = g.degree(i) as f64;
            let mean: f64 = g.neighbors(i).map(|j| x[j]).sum::<f64>() / (c + h.d());
            assert_relative_eq!(mean_from_q, mean, epsilon = 1e-13);
            assert_relative_eq!(1.0 / qii, h.sigma2() / (c + h.d()), epsilon = 1e-15);
            let row_sum: f64 = (0..g.len()).map(|j| q.get(i, j)).sum();
            assert_relative_eq!(row_sum, h.d() / h.sigma2(), epsilon = 1e-13);
        }
    }

    #[test]
    fn logdet_matches_cholesky() {
        for (r, c) in [(1, 1), (1, 7), (5, 3), (8, 8), (12, 9)] {
            let g = GridGraph::new(r, c).unwrap();
            for (s, d) in [(0.1, 0.1), (1.0, 1.0), (10.0, 0.5), (0.3, 10.0)] {
                let h = IcarHyper::new(s, d).unwrap();
                let f = factorize(&build_icar_precision(&g, &h), Ordering::Natural).unwrap();
                assert_relative_eq!(grid_logdet(&g, &h), f.log_det(), epsilon = 1e-9, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn prior_at_zero_and_scalar() {
        let g = GridGraph::new(3, 2).unwrap();
        let h = IcarHyper::new(0.7, 1.3).unwrap();
        let lp = prior_logpdf(&[0.0; 6], &g, &h).unwrap();
        assert_relative_eq!(lp, -3.0 * (2.0 * PI).ln() + 0.5 * grid_logdet(&g, &h), epsilon = 1e-14);
        let g1 = GridGraph::new(1, 1).unwrap();
        let lp1 = prior_logpdf(&[1.0], &g1, &IcarHyper::new(1.0, 1.0).unwrap()).unwrap();
        assert_relative_eq!(lp1, -1.4189385332046727, epsilon = 1e-14);
        assert!(matches!(
            prior_logpdf(&[1.0, 2.0], &g1, &IcarHyper::new(1.0, 1.0).unwrap()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
