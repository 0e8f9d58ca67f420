//! Unconstrained reparameterizations used by the posterior targets: log for
//! positive scales, logit for spatial-dependence parameters in (0, 1), and a
//! log-diagonal Cholesky parameterization for covariance matrices, each with
//! its log-Jacobian so densities stay exact after the change of variables.

use ndarray::Array2;
use statrs::function::gamma::ln_gamma;

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse-gamma density of x = e^u including the e^u Jacobian, as a
/// function of the unconstrained u; returns (log density, d/du).
/// Shape-scale convention: density proportional to x^(-a-1) exp(-b/x).
pub fn inv_gamma_unconstrained(u: f64, shape: f64, scale: f64) -> (f64, f64) {
    let value = shape * scale.ln() - ln_gamma(shape) - shape * u - scale * (-u).exp();
    let grad = -shape + scale * (-u).exp();
    (value, grad)
}

/// Mean-zero normal log density and d/dx.
pub fn normal_unconstrained(x: f64, variance: f64) -> (f64, f64) {
    let value = -0.5 * (2.0 * std::f64::consts::PI * variance).ln() - x * x / (2.0 * variance);
    (value, -x / variance)
}

/// Uniform(0,1) prior on rho = sigmoid(v): the density is the Jacobian
/// alone. Returns (log rho(1-rho), d/dv) = (log jac, 1 - 2 rho).
pub fn uniform_rho_unconstrained(v: f64) -> (f64, f64, f64) {
    let rho = sigmoid(v);
    let jac = rho * (1.0 - rho);
    (jac.ln(), 1.0 - 2.0 * rho, rho)
}

/// Covariance block under the log-diagonal Cholesky parameterization.
///
/// Parameters order: K log-diagonals d_i, then strictly-lower entries in
/// row-major order. Sigma = L L' with L[i][i] = exp(d_i).
pub struct SigmaBlock {
    pub k: usize,
    pub l: Array2<f64>,
    pub sigma: Array2<f64>,
    pub sigma_inv: Array2<f64>,
    /// log det Sigma = 2 sum d_i
    pub log_det: f64,
    /// log |d Sigma / d params| = K log 2 + sum (K - i + 1) d_i ... plus the
    /// exp reparameterization of the diagonal, giving sum (K - i + 2) d_i
    /// with 1-based i.
    pub log_jacobian: f64,
}

pub fn sigma_param_len(k: usize) -> usize {
    k * (k + 1) / 2
}

impl SigmaBlock {
    pub fn from_params(params: &[f64], k: usize) -> Self {
        assert_eq!(params.len(), sigma_param_len(k));
        let mut l = Array2::<f64>::zeros((k, k));
        for i in 0..k {
            l[[i, i]] = params[i].exp();
        }
        let mut idx = k;
        for i in 1..k {
            for j in 0..i {
                l[[i, j]] = params[idx];
                idx += 1;
            }
        }
        let sigma = l.dot(&l.t());
        // Sigma^-1 = L^-T L^-1 built by inverting the triangular factor
        let mut l_inv = Array2::<f64>::zeros((k, k));
        for col in 0..k {
            let mut e = vec![0.0; k];
            e[col] = 1.0;
            for row in 0..k {
                let mut s = e[row];
                for j in 0..row {
                    s -= l[[row, j]] * l_inv[[j, col]];
                }
                l_inv[[row, col]] = s / l[[row, row]];
            }
        }
        let sigma_inv = l_inv.t().dot(&l_inv);
        let log_det = 2.0 * params[..k].iter().sum::<f64>();
        let kf = k as f64;
        let log_jacobian = kf * (2.0_f64).ln()
            + params[..k]
                .iter()
                .enumerate()
                .map(|(i, &d)| (kf - i as f64 + 1.0) * d)
                .sum::<f64>();
        SigmaBlock {
            k,
            l,
            sigma,
            sigma_inv,
            log_det,
            log_jacobian,
        }
    }

    /// Inverse-Wishart(df, identity scale) log density of Sigma, including
    /// normalizing constants, plus the parameterization Jacobian.
    pub fn inv_wishart_log_density(&self, df: f64) -> f64 {
        let k = self.k as f64;
        let mut ln_gamma_k = k * (k - 1.0) / 4.0 * std::f64::consts::PI.ln();
        for i in 1..=self.k {
            ln_gamma_k += ln_gamma(0.5 * (df + 1.0 - i as f64));
        }
        let trace_inv = (0..self.k).map(|i| self.sigma_inv[[i, i]]).sum::<f64>();
        -0.5 * df * k * (2.0_f64).ln() - ln_gamma_k
            - 0.5 * (df + k + 1.0) * self.log_det
            - 0.5 * trace_inv
            + self.log_jacobian
    }

    /// Maps a gradient with respect to L's free entries (given as a full
    /// lower-triangular matrix) into the parameter vector, applying the
    /// diagonal exp chain rule, and adds the direct d_i terms from log-det
    /// and Jacobian pieces (`diag_direct` per 0-based i).
    pub fn chain_to_params(
        &self,
        grad_l: &Array2<f64>,
        diag_direct: impl Fn(usize) -> f64,
        out: &mut [f64],
    ) {
        for i in 0..self.k {
            out[i] += grad_l[[i, i]] * self.l[[i, i]] + diag_direct(i);
        }
        let mut idx = self.k;
        for i in 1..self.k {
            for j in 0..i {
                out[idx] += grad_l[[i, j]];
                idx += 1;
            }
        }
    }

    /// Gradient of the Inverse-Wishart log density (with Jacobian) with
    /// respect to the parameters, accumulated into `out`.
    ///
    /// d/dSigma of -c1 log det Sigma - 1/2 tr(Sigma^-1) is
    /// -c1 Sigma^-1 + 1/2 Sigma^-1 Sigma^-1, chained through Sigma = L L'.
    pub fn add_inv_wishart_gradient(&self, df: f64, out: &mut [f64]) {
        let k = self.k as f64;
        let c1 = 0.5 * (df + k + 1.0);
        // G = df/dSigma (symmetric); grad_L = 2 G L
        let mut g = self.sigma_inv.dot(&self.sigma_inv);
        g.mapv_inplace(|v| 0.5 * v);
        let g = &g - &self.sigma_inv.mapv(|v| c1 * v);
        let grad_l = g.dot(&self.l).mapv(|v| 2.0 * v);
        self.chain_to_params(&grad_l, |i| k - i as f64 + 1.0, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn sigmoid_logit_roundtrip() {
        for &p in &[0.01, 0.3, 0.5, 0.77, 0.99] {
            assert_abs_diff_eq!(sigmoid(logit(p)), p, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(logit(0.5), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn uniform_rho_jacobian_at_half() {
        let (log_jac, d, rho) = uniform_rho_unconstrained(0.0);
        assert_abs_diff_eq!(rho, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(log_jac, (0.25_f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn inv_gamma_matches_direct_density_plus_jacobian() {
        // IG(a,b) at x: a ln b - lnGamma(a) - (a+1) ln x - b/x; add ln x
        let (a, b) = (1.3f64, 0.7f64);
        let x: f64 = 2.1;
        let direct = a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x + x.ln();
        let (value, _) = inv_gamma_unconstrained(x.ln(), a, b);
        assert_abs_diff_eq!(value, direct, epsilon = 1e-12);
    }

    #[test]
    fn inv_gamma_gradient_matches_finite_difference() {
        let h = 1e-6;
        for &u in &[-1.0, 0.0, 0.5, 2.0] {
            let (_, g) = inv_gamma_unconstrained(u, 0.001, 0.001);
            let (fp, _) = inv_gamma_unconstrained(u + h, 0.001, 0.001);
            let (fm, _) = inv_gamma_unconstrained(u - h, 0.001, 0.001);
            assert_abs_diff_eq!(g, (fp - fm) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn sigma_block_reconstructs_known_covariance() {
        // L = [[2, 0], [0.6, 1.5]] -> d = [ln2, ln1.5], m = [0.6]
        let params = [2.0_f64.ln(), 1.5_f64.ln(), 0.6];
        let s = SigmaBlock::from_params(&params, 2);
        let want = array![[4.0, 1.2], [1.2, 0.36 + 2.25]];
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(s.sigma[[i, j]], want[[i, j]], epsilon = 1e-12);
            }
        }
        let ident = s.sigma.dot(&s.sigma_inv);
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(ident[[i, j]], e, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(s.log_det, (4.0 * 2.25_f64).ln(), epsilon = 1e-12);
        // K log 2 + (K+1) d_1 + K d_2 with K = 2
        let want_jac = 2.0 * (2.0_f64).ln() + 3.0 * params[0] + 2.0 * params[1];
        assert_abs_diff_eq!(s.log_jacobian, want_jac, epsilon = 1e-12);
    }

    #[test]
    fn inv_wishart_density_matches_scalar_inverse_gamma() {
        // K = 1: IW(nu, 1) is IG(nu/2, 1/2); compare through the shared
        // unconstrained parameterization (d = log ell, sigma = ell^2)
        let d = 0.37;
        let s = SigmaBlock::from_params(&[d], 1);
        let nu = 2.0;
        let iw = s.inv_wishart_log_density(nu);
        // IG(nu/2, 1/2) at sigma = e^{2d}, plus Jacobian d sigma / d d = 2 e^{2d}
        let (ig_plus_exp_jac, _) = inv_gamma_unconstrained(2.0 * d, 0.5 * nu, 0.5);
        let ig = ig_plus_exp_jac + (2.0_f64).ln();
        assert_abs_diff_eq!(iw, ig, epsilon = 1e-10);
    }

    #[test]
    fn inv_wishart_gradient_matches_finite_difference() {
        let params = [0.2, -0.3, 0.45];
        let df = 3.0;
        let mut grad = vec![0.0; 3];
        SigmaBlock::from_params(&params, 2).add_inv_wishart_gradient(df, &mut grad);
        let h = 1e-6;
        for i in 0..3 {
            let mut pp = params;
            pp[i] += h;
            let fp = SigmaBlock::from_params(&pp, 2).inv_wishart_log_density(df);
            pp[i] -= 2.0 * h;
            let fm = SigmaBlock::from_params(&pp, 2).inv_wishart_log_density(df);
            let fd = (fp - fm) / (2.0 * h);
            assert_abs_diff_eq!(grad[i], fd, epsilon = 1e-5);
        }
    }
}
