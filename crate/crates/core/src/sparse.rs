//! Symmetric sparse matrices and their Cholesky factors.
//!
//! Matrices keep only the lower triangle (diagonal included) in compressed
//! column form. Factorization is split into a symbolic phase (ordering,
//! elimination tree, fill pattern) and a numeric phase, so callers that
//! refactorize the same pattern many times (Newton iterations, hyperparameter
//! sweeps) pay for the analysis once.
//!
//! The numeric phase is an up-looking row-by-row Cholesky driven by the
//! elimination tree. Selected inversion uses the Takahashi recursions on the
//! pattern of `L`, which is closed under the dependencies of the recursion.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{check_len, Error, Result};

/// Pivots at or below this value are treated as zero.
pub const PIVOT_THRESHOLD: f64 = 1e-300;

/// Symmetric sparse matrix stored as its lower triangle in CSC form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSymMatrix {
    /// Builds a matrix from raw lower-triangular CSC arrays, validating the
    /// layout: rows strictly increasing per column, every row at or below the
    /// diagonal, and the diagonal present as the first entry of each column.
    pub fn from_csc(
        n: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidMatrix("dimension must be at least 1".into()));
        }
        if col_ptr.len() != n + 1 || col_ptr[0] != 0 {
            return Err(Error::InvalidMatrix("column pointer array is malformed".into()));
        }
        if row_idx.len() != values.len() || *col_ptr.last().unwrap() != row_idx.len() {
            return Err(Error::InvalidMatrix("entry arrays disagree with column pointers".into()));
        }
        for j in 0..n {
            let (start, end) = (col_ptr[j], col_ptr[j + 1]);
            if end <= start || row_idx[start] != j {
                return Err(Error::InvalidMatrix(format!("missing diagonal in column {j}")));
            }
            for p in start + 1..end {
                if row_idx[p] <= row_idx[p - 1] || row_idx[p] >= n {
                    return Err(Error::InvalidMatrix(format!(
                        "row indices in column {j} are not strictly increasing or out of range"
                    )));
                }
            }
        }
        Ok(Self {
            n,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Builds a matrix from `(row, col, value)` triplets. Either triangle may
    /// be given; entries are mirrored into the lower triangle and duplicates
    /// summed. Missing diagonal entries are inserted as explicit zeros.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidMatrix("dimension must be at least 1".into()));
        }
        let mut cols: Vec<Vec<(usize, f64)>> = (0..n).map(|j| vec![(j, 0.0)]).collect();
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::InvalidMatrix(format!("entry ({i}, {j}) out of range")));
            }
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            cols[c].push((r, v));
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for mut col in cols {
            col.sort_by_key(|&(r, _)| r);
            for (r, v) in col {
                if row_idx.len() > *col_ptr.last().unwrap() && *row_idx.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self::from_csc(n, col_ptr, row_idx, values)
    }

    /// Builds a matrix from a dense row-major array, keeping nonzeros of the
    /// lower triangle (and every diagonal entry).
    pub fn from_dense(n: usize, dense: &[f64]) -> Result<Self> {
        check_len(n * n, dense.len())?;
        let mut triplets = Vec::new();
        for j in 0..n {
            for i in j..n {
                let v = dense[i * n + j];
                if i == j || v != 0.0 {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, &triplets)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Stored entries of the lower triangle.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Rows and values of lower-triangular column `j`, diagonal first.
    pub fn column(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.row_idx[r.clone()], &self.values[r])
    }

    /// Entry `(i, j)`; zero when outside the stored pattern.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let (rows, vals) = self.column(c);
        rows.binary_search(&r).map(|p| vals[p]).unwrap_or(0.0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.values[self.col_ptr[j]]).collect()
    }

    /// Returns a copy with `extra[j]` added to each diagonal entry.
    pub fn with_added_diagonal(&self, extra: &[f64]) -> Result<Self> {
        check_len(self.n, extra.len())?;
        let mut out = self.clone();
        for (j, e) in extra.iter().enumerate() {
            out.values[out.col_ptr[j]] += e;
        }
        Ok(out)
    }

    /// Symmetric matrix-vector product `A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, x.len())?;
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let (rows, vals) = self.column(j);
            y[j] += vals[0] * x[j];
            for (&i, &v) in rows[1..].iter().zip(&vals[1..]) {
                y[i] += v * x[j];
                y[j] += v * x[i];
            }
        }
        Ok(y)
    }

    /// Quadratic form `xᵀ A x`.
    pub fn quad_form(&self, x: &[f64]) -> Result<f64> {
        let ax = self.mul_vec(x)?;
        Ok(ax.iter().zip(x).map(|(a, b)| a * b).sum())
    }

    /// Dense row-major copy of the full symmetric matrix.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n;
        let mut d = vec![0.0; n * n];
        for j in 0..n {
            let (rows, vals) = self.column(j);
            for (&i, &v) in rows.iter().zip(vals) {
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        d
    }

    /// Whether two matrices share the same sparsity pattern.
    pub fn same_pattern(&self, other: &Self) -> bool {
        self.n == other.n && self.col_ptr == other.col_ptr && self.row_idx == other.row_idx
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for j in 0..self.n {
            let (rows, _) = self.column(j);
            for &i in &rows[1..] {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }
}

/// Fill-reducing ordering applied before factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ordering {
    /// Identity permutation. Row-major lattices are already banded.
    #[default]
    Natural,
    /// Reverse Cuthill-McKee bandwidth reduction.
    ReverseCuthillMcKee,
}

/// Permutation `perm` with `perm[new] = old`.
fn compute_ordering(a: &SparseSymMatrix, ordering: Ordering) -> Vec<usize> {
    match ordering {
        Ordering::Natural => (0..a.n).collect(),
        Ordering::ReverseCuthillMcKee => reverse_cuthill_mckee(a),
    }
}

fn reverse_cuthill_mckee(a: &SparseSymMatrix) -> Vec<usize> {
    let adj = a.adjacency();
    let n = a.n;
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        // Each component starts from its lowest-degree unvisited node.
        let start = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (degree[v], v))
            .unwrap();
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Ordering, elimination tree and fill pattern for one sparsity pattern.
#[derive(Debug)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    /// Pattern the analysis was computed for (lower CSC of the input).
    src_col_ptr: Vec<usize>,
    src_row_idx: Vec<usize>,
    /// Upper triangle of `P A Pᵀ` by column, as indices into the input values.
    c_col_ptr: Vec<usize>,
    c_rows: Vec<usize>,
    c_src: Vec<usize>,
    /// Nonzero pattern of each row of `L`, topologically ordered.
    row_ptr: Vec<usize>,
    row_cols: Vec<usize>,
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
}

impl SymbolicCholesky {
    pub fn analyze(a: &SparseSymMatrix, ordering: Ordering) -> Arc<Self> {
        let n = a.n;
        let perm = compute_ordering(a, ordering);
        let mut pinv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }

        // Upper triangle of C = P A Pᵀ, column by column.
        let mut c_cols: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for j in 0..n {
            for p in a.col_ptr[j]..a.col_ptr[j + 1] {
                let (r, c) = (pinv[a.row_idx[p]], pinv[j]);
                let (lo, hi) = if r <= c { (r, c) } else { (c, r) };
                c_cols[hi].push((lo, p));
            }
        }
        let mut c_col_ptr = vec![0];
        let mut c_rows = Vec::with_capacity(a.nnz());
        let mut c_src = Vec::with_capacity(a.nnz());
        for mut col in c_cols {
            col.sort_unstable();
            for (r, p) in col {
                c_rows.push(r);
                c_src.push(p);
            }
            c_col_ptr.push(c_rows.len());
        }

        // Elimination tree with path compression.
        let none = usize::MAX;
        let mut parent = vec![none; n];
        let mut ancestor = vec![none; n];
        for k in 0..n {
            for &r in &c_rows[c_col_ptr[k]..c_col_ptr[k + 1]] {
                let mut i = r;
                while i != none && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == none {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }

        // Row patterns of L via elimination-tree reaches.
        let mut row_ptr = vec![0];
        let mut row_cols = Vec::new();
        let mut col_count = vec![1usize; n];
        let mut mark = vec![usize::MAX; n];
        let mut stack = Vec::new();
        let mut path = Vec::new();
        for k in 0..n {
            mark[k] = k;
            stack.clear();
            for &r in &c_rows[c_col_ptr[k]..c_col_ptr[k + 1]] {
                let mut i = r;
                path.clear();
                while i < k && mark[i] != k {
                    path.push(i);
                    mark[i] = k;
                    i = parent[i];
                }
                // Paths are pushed so that, read in reverse, the stack is
                // topologically ordered.
                while let Some(v) = path.pop() {
                    stack.push(v);
                }
            }
            for &j in stack.iter().rev() {
                row_cols.push(j);
                col_count[j] += 1;
            }
            row_ptr.push(row_cols.len());
        }

        let mut l_col_ptr = vec![0; n + 1];
        for j in 0..n {
            l_col_ptr[j + 1] = l_col_ptr[j] + col_count[j];
        }
        let mut l_row_idx = vec![0; l_col_ptr[n]];
        let mut next: Vec<usize> = l_col_ptr[..n].to_vec();
        for k in 0..n {
            l_row_idx[next[k]] = k;
            next[k] += 1;
        }
        for k in 0..n {
            for &j in &row_cols[row_ptr[k]..row_ptr[k + 1]] {
                l_row_idx[next[j]] = k;
                next[j] += 1;
            }
        }

        Arc::new(Self {
            n,
            perm,
            src_col_ptr: a.col_ptr.clone(),
            src_row_idx: a.row_idx.clone(),
            c_col_ptr,
            c_rows,
            c_src,
            row_ptr,
            row_cols,
            l_col_ptr,
            l_row_idx,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Permutation with `perm[new] = old`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Entries in the factor, diagonal included.
    pub fn factor_nnz(&self) -> usize {
        self.l_row_idx.len()
    }

    /// Numeric factorization of a matrix with the analyzed pattern.
    pub fn factorize(self: &Arc<Self>, a: &SparseSymMatrix) -> Result<CholFactor> {
        if a.n != self.n || a.col_ptr != self.src_col_ptr || a.row_idx != self.src_row_idx {
            return Err(Error::InvalidMatrix(
                "matrix pattern differs from the analyzed pattern".into(),
            ));
        }
        let n = self.n;
        let lp = &self.l_col_ptr;
        let mut lx = vec![0.0; self.l_row_idx.len()];
        let mut fill = vec![0usize; n];
        let mut x = vec![0.0; n];
        let mut log_det = 0.0;
        for k in 0..n {
            for p in self.c_col_ptr[k]..self.c_col_ptr[k + 1] {
                x[self.c_rows[p]] = a.values[self.c_src[p]];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &j in &self.row_cols[self.row_ptr[k]..self.row_ptr[k + 1]] {
                let lkj = x[j] / lx[lp[j]];
                x[j] = 0.0;
                for p in lp[j] + 1..lp[j] + 1 + fill[j] {
                    x[self.l_row_idx[p]] -= lx[p] * lkj;
                }
                d -= lkj * lkj;
                fill[j] += 1;
                lx[lp[j] + fill[j]] = lkj;
            }
            if !(d > PIVOT_THRESHOLD) {
                return Err(Error::NotPositiveDefinite {
                    column: self.perm[k],
                    pivot: d,
                });
            }
            let lkk = d.sqrt();
            lx[lp[k]] = lkk;
            log_det += lkk.ln();
        }
        Ok(CholFactor {
            symbolic: Arc::clone(self),
            values: lx,
            log_det: 2.0 * log_det,
        })
    }
}

/// `P A Pᵀ = L Lᵀ`, immutable once built.
#[derive(Debug, Clone)]
pub struct CholFactor {
    symbolic: Arc<SymbolicCholesky>,
    values: Vec<f64>,
    log_det: f64,
}

/// Analyzes and factorizes `a` in one call.
pub fn factorize(a: &SparseSymMatrix, ordering: Ordering) -> Result<CholFactor> {
    SymbolicCholesky::analyze(a, ordering).factorize(a)
}

impl CholFactor {
    pub fn n(&self) -> usize {
        self.symbolic.n
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    /// Permutation with `perm[new] = old`.
    pub fn permutation(&self) -> &[usize] {
        &self.symbolic.perm
    }

    /// Column `j` of `L` in permuted coordinates, diagonal first.
    pub fn l_column(&self, j: usize) -> (&[usize], &[f64]) {
        let lp = &self.symbolic.l_col_ptr;
        (
            &self.symbolic.l_row_idx[lp[j]..lp[j + 1]],
            &self.values[lp[j]..lp[j + 1]],
        )
    }

    /// `ln det A = 2 Σ ln L_ii`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Solves `A z = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let s = &*self.symbolic;
        check_len(s.n, b.len())?;
        let lp = &s.l_col_ptr;
        let li = &s.l_row_idx;
        let lx = &self.values;
        let mut y: Vec<f64> = s.perm.iter().map(|&old| b[old]).collect();
        for j in 0..s.n {
            y[j] /= lx[lp[j]];
            let yj = y[j];
            for p in lp[j] + 1..lp[j + 1] {
                y[li[p]] -= lx[p] * yj;
            }
        }
        for j in (0..s.n).rev() {
            let mut acc = y[j];
            for p in lp[j] + 1..lp[j + 1] {
                acc -= lx[p] * y[li[p]];
            }
            y[j] = acc / lx[lp[j]];
        }
        let mut z = vec![0.0; s.n];
        for (new, &old) in s.perm.iter().enumerate() {
            z[old] = y[new];
        }
        Ok(z)
    }

    /// Entries of `A⁻¹` on the pattern of `L`, in permuted coordinates,
    /// aligned with the factor's value array.
    fn takahashi(&self) -> Vec<f64> {
        let s = &*self.symbolic;
        let lp = &s.l_col_ptr;
        let li = &s.l_row_idx;
        let lx = &self.values;
        let mut z = vec![0.0; lx.len()];
        let mut pos = vec![usize::MAX; s.n];
        let mut acc = Vec::new();
        for j in (0..s.n).rev() {
            let below = lp[j] + 1..lp[j + 1];
            let rows = &li[below.clone()];
            let lcol = &lx[below.clone()];
            for (a, &r) in rows.iter().enumerate() {
                pos[r] = a;
            }
            acc.clear();
            acc.resize(rows.len(), 0.0);
            // acc[i] = Σ_k Z_ik L_kj over k in the column pattern. Column k of
            // Z covers every row of the pattern that lies at or below k.
            for (a, &k) in rows.iter().enumerate() {
                let lkj = lcol[a];
                for p in lp[k]..lp[k + 1] {
                    let r = li[p];
                    let b = pos[r];
                    if b == usize::MAX {
                        continue;
                    }
                    acc[b] += z[p] * lkj;
                    if r > k {
                        acc[a] += z[p] * lcol[b];
                    }
                }
            }
            let ljj = lx[lp[j]];
            let mut diag = 1.0 / (ljj * ljj);
            for (a, p) in below.enumerate() {
                z[p] = -acc[a] / ljj;
                diag -= lcol[a] * z[p] / ljj;
            }
            z[lp[j]] = diag;
            for &r in rows {
                pos[r] = usize::MAX;
            }
        }
        z
    }

    /// Entries of `A⁻¹` on the pattern of `L + Lᵀ`, mapped back to the
    /// original ordering.
    pub fn selected_inverse(&self) -> SparseSymMatrix {
        let s = &*self.symbolic;
        let z = self.takahashi();
        let mut triplets = Vec::with_capacity(z.len());
        for j in 0..s.n {
            for p in s.l_col_ptr[j]..s.l_col_ptr[j + 1] {
                triplets.push((s.perm[s.l_row_idx[p]], s.perm[j], z[p]));
            }
        }
        SparseSymMatrix::from_triplets(s.n, &triplets)
            .expect("selected inverse pattern is a valid lower-triangular layout")
    }

    /// Diagonal of `A⁻¹` in the original ordering.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let s = &*self.symbolic;
        let z = self.takahashi();
        let mut d = vec![0.0; s.n];
        for j in 0..s.n {
            d[s.perm[j]] = z[s.l_col_ptr[j]];
        }
        d
    }
}
