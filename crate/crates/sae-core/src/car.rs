//! Conditional autoregressive precision matrices Q(rho) = D - rho W.
//!
//! `D` is the diagonal of neighbor counts and `W` the binary adjacency matrix
//! of a [`RegionGraph`]. On a connected graph Q is positive definite for
//! rho in [0, 1) and singular at rho = 1. All factorizations share one
//! fill-reducing ordering and one symbolic analysis per graph; only the
//! numeric pass depends on rho.

use std::sync::Arc;

use thiserror::Error;

use crate::graph::RegionGraph;
use crate::sparse::{
    ldl_numeric, ldl_symbolic, reverse_cuthill_mckee, LdlFactor, LdlSymbolic, SparseError,
    SymMatrix, SymPattern,
};

#[derive(Debug, Error)]
pub enum CarError {
    #[error("rho = {0} is outside [0, 1)")]
    RhoOutOfRange(f64),
    #[error("sigma2 = {0} must be positive and finite")]
    InvalidScale(f64),
    #[error("vector length {got} does not match graph size {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("factorization failed: {0}")]
    Factorization(#[from] SparseError),
}

/// Per-graph factorization context: the reverse Cuthill-McKee permutation,
/// the permuted pattern of Q, its symbolic analysis, and the permuted
/// adjacency columns needed for trace computations. Built once per graph and
/// cached on the graph itself.
#[derive(Debug)]
pub struct CarContext {
    n: usize,
    /// perm[new] = old
    perm: Vec<usize>,
    pattern: Arc<SymPattern>,
    symbolic: LdlSymbolic,
    /// degree of the original node at each permuted position
    deg_perm: Vec<f64>,
    /// permuted neighbor lists: w_cols[j] = permuted indices adjacent to j
    w_cols: Vec<Vec<usize>>,
}

impl CarContext {
    fn new(graph: &RegionGraph) -> Self {
        let n = graph.n_regions();
        let perm = reverse_cuthill_mckee(graph.neighbor_lists());
        let mut inv_perm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old] = new;
        }
        let mut permuted_neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (new, &old) in perm.iter().enumerate() {
            permuted_neighbors[new] = graph
                .neighbors_of(old)
                .iter()
                .map(|&v| inv_perm[v])
                .collect();
            permuted_neighbors[new].sort_unstable();
        }
        let pattern = Arc::new(SymPattern::from_neighbors(&permuted_neighbors));
        let symbolic = ldl_symbolic(&pattern);
        let deg_perm: Vec<f64> = perm.iter().map(|&old| graph.degree(old) as f64).collect();
        CarContext {
            n,
            perm,
            pattern,
            symbolic,
            deg_perm,
            w_cols: permuted_neighbors,
        }
    }

    /// Values of the permuted Q(rho) aligned with `self.pattern`.
    fn q_values(&self, rho: f64) -> Vec<f64> {
        let mut values = vec![0.0; self.pattern.nnz()];
        for i in 0..self.n {
            for idx in self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1] {
                values[idx] = if self.pattern.cols[idx] == i {
                    self.deg_perm[i]
                } else {
                    -rho
                };
            }
        }
        values
    }
}

impl RegionGraph {
    /// Shared factorization context for this graph, built on first use.
    pub fn car_context(&self) -> &Arc<CarContext> {
        self.car_ctx.get_or_init(|| Arc::new(CarContext::new(self)))
    }

    /// `x^T W x` over the binary adjacency matrix.
    pub fn w_quad(&self, x: &[f64]) -> f64 {
        2.0 * self
            .edges()
            .iter()
            .map(|&(a, b)| x[a] * x[b])
            .sum::<f64>()
    }

    /// `y = W x` over the binary adjacency matrix.
    pub fn w_matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, ns) in self.neighbor_lists().iter().enumerate() {
            y[i] = ns.iter().map(|&j| x[j]).sum();
        }
    }

    /// `x^T Q(rho) x = sum_i d_i x_i^2 - rho x^T W x`.
    pub fn q_quad(&self, rho: f64, x: &[f64]) -> f64 {
        let diag: f64 = x
            .iter()
            .enumerate()
            .map(|(i, &v)| self.degree(i) as f64 * v * v)
            .sum();
        diag - rho * self.w_quad(x)
    }

    /// `y = Q(rho) x`.
    pub fn q_matvec(&self, rho: f64, x: &[f64], y: &mut [f64]) {
        for (i, ns) in self.neighbor_lists().iter().enumerate() {
            let wx: f64 = ns.iter().map(|&j| x[j]).sum();
            y[i] = self.degree(i) as f64 * x[i] - rho * wx;
        }
    }
}

/// Numeric Cholesky factor of Q(rho) for one graph and one rho, exposed in
/// the original (unpermuted) index space.
#[derive(Debug)]
pub struct CarFactor {
    ctx: Arc<CarContext>,
    ldl: LdlFactor,
    rho: f64,
}

impl CarFactor {
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn log_det(&self) -> f64 {
        self.ldl.log_det()
    }

    /// Solves `Q x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.ctx.n;
        let mut xp = vec![0.0; n];
        for new in 0..n {
            xp[new] = b[self.ctx.perm[new]];
        }
        self.ldl.solve_in_place(&mut xp);
        let mut x = vec![0.0; n];
        for new in 0..n {
            x[self.ctx.perm[new]] = xp[new];
        }
        x
    }

    /// Writes a draw with covariance `Q^{-1}` into `out`, consuming `n`
    /// standard normal variates from `rng`.
    pub fn sample_standard<R: rand::Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let n = self.ctx.n;
        let mut e: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        self.ldl.white_solve_in_place(&mut e);
        for new in 0..n {
            out[self.ctx.perm[new]] = e[new];
        }
    }

    /// `tr(Q^{-1} W)`, computed column by column with sparse right-hand
    /// sides. Cost is one solve per region.
    pub fn trace_qinv_w(&self) -> f64 {
        let n = self.ctx.n;
        let mut rhs = vec![0.0; n];
        let mut trace = 0.0;
        for j in 0..n {
            let col = &self.ctx.w_cols[j];
            let first = match col.first() {
                Some(&f) => f,
                None => continue,
            };
            for &i in col {
                rhs[i] = 1.0;
            }
            self.ldl.forward_in_place(&mut rhs, first);
            self.ldl.diag_solve_in_place(&mut rhs);
            self.ldl.backward_in_place(&mut rhs);
            trace += rhs[j];
            for v in rhs.iter_mut() {
                *v = 0.0;
            }
        }
        trace
    }
}

/// Factors Q(rho) on `graph`. Validates rho and reuses the graph's cached
/// symbolic analysis.
pub fn factor_q(graph: &RegionGraph, rho: f64) -> Result<CarFactor, CarError> {
    if !(0.0..1.0).contains(&rho) || !rho.is_finite() {
        return Err(CarError::RhoOutOfRange(rho));
    }
    let ctx = Arc::clone(graph.car_context());
    let values = ctx.q_values(rho);
    let matrix = SymMatrix::new(Arc::clone(&ctx.pattern), values)?;
    let ldl = ldl_numeric(&matrix, &ctx.symbolic)?;
    Ok(CarFactor { ctx, ldl, rho })
}

/// A CAR precision matrix pinned to one graph and one rho, with its Cholesky
/// factor computed lazily and cached.
#[derive(Debug)]
pub struct CarPrecision {
    graph: Arc<RegionGraph>,
    rho: f64,
    factor: std::sync::OnceLock<CarFactor>,
}

impl CarPrecision {
    pub fn new(graph: Arc<RegionGraph>, rho: f64) -> Result<Self, CarError> {
        if !(0.0..1.0).contains(&rho) || !rho.is_finite() {
            return Err(CarError::RhoOutOfRange(rho));
        }
        Ok(CarPrecision {
            graph,
            rho,
            factor: std::sync::OnceLock::new(),
        })
    }

    pub fn graph(&self) -> &Arc<RegionGraph> {
        &self.graph
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Q(rho) assembled in the original index order.
    pub fn matrix(&self) -> SymMatrix {
        let pattern = Arc::new(SymPattern::from_neighbors(self.graph.neighbor_lists()));
        let mut values = vec![0.0; pattern.nnz()];
        for i in 0..self.graph.n_regions() {
            for idx in pattern.row_ptr[i]..pattern.row_ptr[i + 1] {
                values[idx] = if pattern.cols[idx] == i {
                    self.graph.degree(i) as f64
                } else {
                    -self.rho
                };
            }
        }
        SymMatrix::new(pattern, values).expect("pattern and values built together")
    }

    /// Cached Cholesky factor.
    pub fn cholesky(&self) -> &CarFactor {
        self.factor.get_or_init(|| {
            factor_q(&self.graph, self.rho).expect("rho validated at construction")
        })
    }
}
