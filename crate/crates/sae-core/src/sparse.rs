//! Sparse symmetric matrices and an LDL^T Cholesky factorization.
//!
//! The factorization is the up-looking method: a symbolic pass builds the
//! elimination tree and column counts from the pattern alone, and the numeric
//! pass fills one row of L at a time. The pattern of a spatial precision
//! matrix is fixed per graph, so the symbolic work is done once and reused for
//! every value of the dependence parameter.

use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("matrix is not positive definite (pivot {pivot:.3e} at column {col})")]
    NotPositiveDefinite { col: usize, pivot: f64 },
    #[error("values length {got} does not match pattern nonzeros {want}")]
    ValueLengthMismatch { got: usize, want: usize },
}

/// Pattern of a symmetric sparse matrix. Both triangles and the diagonal are
/// stored; rows are sorted. Because the matrix is symmetric, row `k` read up
/// to the diagonal is also column `k` of the upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct SymPattern {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
}

impl SymPattern {
    /// Builds a pattern from per-row neighbor lists (excluding the diagonal,
    /// which is inserted automatically).
    pub fn from_neighbors(neighbors: &[Vec<usize>]) -> Self {
        let n = neighbors.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for (i, nbrs) in neighbors.iter().enumerate() {
            let mut row: Vec<usize> = nbrs.clone();
            row.push(i);
            row.sort_unstable();
            row.dedup();
            cols.extend_from_slice(&row);
            row_ptr.push(cols.len());
        }
        SymPattern { n, row_ptr, cols }
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }
}

/// Symmetric sparse matrix: values aligned with a shared pattern.
#[derive(Debug, Clone)]
pub struct SymMatrix {
    pub pattern: Arc<SymPattern>,
    pub values: Vec<f64>,
}

impl SymMatrix {
    pub fn new(pattern: Arc<SymPattern>, values: Vec<f64>) -> Result<Self, SparseError> {
        if values.len() != pattern.nnz() {
            return Err(SparseError::ValueLengthMismatch {
                got: values.len(),
                want: pattern.nnz(),
            });
        }
        Ok(SymMatrix { pattern, values })
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let p = &self.pattern;
        for i in 0..p.n {
            let mut acc = 0.0;
            for idx in p.row_ptr[i]..p.row_ptr[i + 1] {
                acc += self.values[idx] * x[p.cols[idx]];
            }
            y[i] = acc;
        }
    }

    /// Dense copy, for small reference computations in tests.
    pub fn to_dense(&self) -> ndarray::Array2<f64> {
        let n = self.n();
        let mut out = ndarray::Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for idx in self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1] {
                out[[i, self.pattern.cols[idx]]] = self.values[idx];
            }
        }
        out
    }
}

/// Reverse Cuthill-McKee ordering of a connected adjacency structure.
/// Returns `perm` with `perm[new] = old`. A pseudo-peripheral start node is
/// found with two breadth-first sweeps from a minimum-degree node.
pub fn reverse_cuthill_mckee(neighbors: &[Vec<usize>]) -> Vec<usize> {
    let n = neighbors.len();
    if n == 0 {
        return Vec::new();
    }
    let degree = |i: usize| neighbors[i].len();
    let bfs_last_level = |start: usize| -> Vec<usize> {
        let mut seen = vec![false; n];
        let mut level = vec![start];
        seen[start] = true;
        let mut last = level.clone();
        while !level.is_empty() {
            last = level.clone();
            let mut next = Vec::new();
            for &u in &level {
                for &v in &neighbors[u] {
                    if !seen[v] {
                        seen[v] = true;
                        next.push(v);
                    }
                }
            }
            level = next;
        }
        last
    };
    let start0 = (0..n).min_by_key(|&i| degree(i)).unwrap();
    let far = bfs_last_level(start0);
    let start = far.into_iter().min_by_key(|&i| degree(i)).unwrap_or(start0);

    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(start);
    visited[start] = true;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        let mut nbrs: Vec<usize> = neighbors[u].iter().copied().filter(|&v| !visited[v]).collect();
        nbrs.sort_by_key(|&v| (degree(v), v));
        for v in nbrs {
            visited[v] = true;
            queue.push_back(v);
        }
    }
    // components other than the start's are appended as-is; callers factor
    // connected graphs, this keeps the permutation total regardless
    for i in 0..n {
        if !visited[i] {
            order.push(i);
        }
    }
    order.reverse();
    order
}

const NO_PARENT: usize = usize::MAX;

/// Elimination tree and column counts for the LDL^T factor of a pattern.
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    parent: Vec<usize>,
    col_ptr: Vec<usize>,
}

impl LdlSymbolic {
    pub fn nnz_l(&self) -> usize {
        *self.col_ptr.last().unwrap()
    }
}

/// Symbolic analysis: elimination tree plus per-column nonzero counts of L.
pub fn ldl_symbolic(pattern: &SymPattern) -> LdlSymbolic {
    let n = pattern.n;
    let mut parent = vec![NO_PARENT; n];
    let mut flag = vec![usize::MAX; n];
    let mut lnz = vec![0usize; n];
    for k in 0..n {
        flag[k] = k;
        for &i0 in pattern.row(k) {
            if i0 >= k {
                continue;
            }
            let mut i = i0;
            while flag[i] != k {
                if parent[i] == NO_PARENT {
                    parent[i] = k;
                }
                lnz[i] += 1;
                flag[i] = k;
                i = parent[i];
            }
        }
    }
    let mut col_ptr = vec![0usize; n + 1];
    for k in 0..n {
        col_ptr[k + 1] = col_ptr[k] + lnz[k];
    }
    LdlSymbolic { parent, col_ptr }
}

/// Numeric LDL^T factor. `L` is unit lower triangular, stored by column;
/// `d` is the diagonal of D.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    pub n: usize,
    col_ptr: Vec<usize>,
    rows: Vec<usize>,
    vals: Vec<f64>,
    d: Vec<f64>,
}

/// Numeric factorization of `a` using a previously computed symbolic
/// analysis of the same pattern.
pub fn ldl_numeric(a: &SymMatrix, sym: &LdlSymbolic) -> Result<LdlFactor, SparseError> {
    let n = a.n();
    let nnz = sym.nnz_l();
    let mut rows = vec![0usize; nnz];
    let mut vals = vec![0.0f64; nnz];
    let mut d = vec![0.0f64; n];
    let mut y = vec![0.0f64; n];
    let mut pattern = vec![0usize; n];
    let mut flag = vec![usize::MAX; n];
    let mut lnz = vec![0usize; n];

    for k in 0..n {
        y[k] = 0.0;
        let mut top = n;
        flag[k] = k;
        lnz[k] = 0;
        let (r0, r1) = (a.pattern.row_ptr[k], a.pattern.row_ptr[k + 1]);
        for idx in r0..r1 {
            let i0 = a.pattern.cols[idx];
            if i0 > k {
                continue;
            }
            y[i0] += a.values[idx];
            let mut len = 0usize;
            let mut i = i0;
            while flag[i] != k {
                pattern[len] = i;
                len += 1;
                flag[i] = k;
                i = sym.parent[i];
            }
            while len > 0 {
                len -= 1;
                top -= 1;
                pattern[top] = pattern[len];
            }
        }
        d[k] = y[k];
        y[k] = 0.0;
        for t in top..n {
            let i = pattern[t];
            let yi = y[i];
            y[i] = 0.0;
            let p2 = sym.col_ptr[i] + lnz[i];
            for p in sym.col_ptr[i]..p2 {
                y[rows[p]] -= vals[p] * yi;
            }
            let l_ki = yi / d[i];
            d[k] -= l_ki * yi;
            rows[p2] = k;
            vals[p2] = l_ki;
            lnz[i] += 1;
        }
        if d[k] <= 0.0 || !d[k].is_finite() {
            return Err(SparseError::NotPositiveDefinite { col: k, pivot: d[k] });
        }
    }
    Ok(LdlFactor {
        n,
        col_ptr: sym.col_ptr.clone(),
        rows,
        vals,
        d,
    })
}

impl LdlFactor {
    /// `log det A` where `A = L D L^T`.
    pub fn log_det(&self) -> f64 {
        self.d.iter().map(|v| v.ln()).sum()
    }

    /// Solves `L z = x` in place. Columns before `start` are skipped, which
    /// is valid when `x[..start]` is entirely zero.
    pub fn forward_in_place(&self, x: &mut [f64], start: usize) {
        for j in start..self.n {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                x[self.rows[p]] -= self.vals[p] * xj;
            }
        }
    }

    /// Solves `D z = x` in place.
    pub fn diag_solve_in_place(&self, x: &mut [f64]) {
        for j in 0..self.n {
            x[j] /= self.d[j];
        }
    }

    /// Solves `L^T z = x` in place.
    pub fn backward_in_place(&self, x: &mut [f64]) {
        for j in (0..self.n).rev() {
            let mut acc = x[j];
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                acc -= self.vals[p] * x[self.rows[p]];
            }
            x[j] = acc;
        }
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        self.forward_in_place(x, 0);
        self.diag_solve_in_place(x);
        self.backward_in_place(x);
    }

    /// Given white noise `e`, overwrites it with `x = L^{-T} D^{-1/2} e`,
    /// so that `cov(x) = A^{-1}`.
    pub fn white_solve_in_place(&self, e: &mut [f64]) {
        for j in 0..self.n {
            e[j] /= self.d[j].sqrt();
        }
        self.backward_in_place(e);
    }
}
