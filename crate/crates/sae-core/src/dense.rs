//! Small dense helpers for symmetric positive definite matrices.
//!
//! Everything here targets the low-dimensional dense work in this crate:
//! response covariance matrices, design-matrix rank checks, and the dense
//! reference computations used by tests. Sparse spatial algebra lives in
//! [`crate::sparse`].

use ndarray::{Array1, Array2};

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// Returns `None` when a pivot is non-positive, i.e. the matrix is not
/// positive definite to working precision.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return None;
        }
        let dj = diag.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Some(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn solve_lower(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let update = l[[i, k]] * y[k];
            y[i] -= update;
        }
        y[i] /= l[[i, i]];
    }
    y
}

/// Solves `L^T x = y` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = y.clone();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let update = l[[k, i]] * x[k];
            x[i] -= update;
        }
        x[i] /= l[[i, i]];
    }
    x
}

/// Solves `A x = b` given the lower Cholesky factor of `A`.
pub fn spd_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a)?;
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let col = spd_solve(&l, &e);
        inv.column_mut(j).assign(&col);
    }
    // symmetrize away round-off
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    Some(inv)
}

/// `log det A` from the lower Cholesky factor of `A`.
pub fn logdet_from_cholesky(l: &Array2<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>()
}

/// Multivariate normal log-density with dense covariance. Reference-quality,
/// O(n^3); intended for small instances.
pub fn mvn_logpdf(x: &Array1<f64>, mean: &Array1<f64>, cov: &Array2<f64>) -> Option<f64> {
    let n = x.len();
    let l = cholesky(cov)?;
    let resid = x - mean;
    let z = solve_lower(&l, &resid);
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let logdet = logdet_from_cholesky(&l);
    Some(-0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * quad)
}

/// Full eigendecomposition of a symmetric matrix by the cyclic Jacobi
/// method: eigenvalues in ascending order paired with eigenvector columns,
/// so that `a * v.column(i) = eigenvalues[i] * v.column(i)`.
///
/// The sweep budget is generous for anything this crate feeds it
/// (n <= a few hundred).
pub fn symmetric_eigh(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "symmetric_eigh needs a square matrix");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let frob2: f64 = a.iter().map(|x| x * x).sum();
    let tol = 1e-24 * frob2.max(1.0);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off < tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap());
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    (eigenvalues, vectors)
}

/// Eigenvalues of a symmetric matrix in ascending order.
///
/// Used for definiteness checks in tests; see [`symmetric_eigh`].
pub fn symmetric_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    symmetric_eigh(a).0.to_vec()
}
