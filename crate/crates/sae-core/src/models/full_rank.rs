//! Full-rank posterior targets: the spatial fields are explicit parameters
//! and every density evaluation factors the sparse CAR precision for the
//! current smoothing parameter. Gradient evaluations additionally pay for
//! the trace solves behind the smoothing-parameter derivative; plain
//! density calls skip them.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};

use crate::car::factor_q;
use crate::graph::RegionGraph;

use super::transforms::{self, SigmaBlock};
use super::{
    common_eval, iw_df, DirectEstimateTable, ModelError, ModelKind, ModelSpec, ParamLayout,
    PreparedData, Priors,
};

const LN_2PI: f64 = 1.8378770664093453;

/// Posterior target for the `fh`, `sms`, and `gms` kinds.
pub struct FullRankTarget {
    kind: ModelKind,
    prep: PreparedData,
    graph: Arc<RegionGraph>,
    layout: ParamLayout,
    priors: Priors,
    /// `gms` only: response index of the marginal field.
    marg: usize,
    iw_df: f64,
}

impl FullRankTarget {
    /// `data` must already be aligned to `graph` and validated.
    pub(crate) fn new(
        spec: &ModelSpec,
        data: &DirectEstimateTable,
        graph: Arc<RegionGraph>,
    ) -> Result<Self, ModelError> {
        let prep = PreparedData::new(data);
        let layout = ParamLayout::for_model(spec, prep.n, prep.k, prep.p);
        Ok(FullRankTarget {
            kind: spec.kind,
            iw_df: iw_df(prep.k),
            prep,
            graph,
            layout,
            priors: spec.priors.clone(),
            marg: spec.gmcar_order,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub(crate) fn prep(&self) -> &PreparedData {
        &self.prep
    }

    /// Log density and gradient; the gradient is left as zeros when
    /// `want_grad` is false or the density is not finite.
    pub(crate) fn eval(&self, pos: &Array1<f64>, want_grad: bool) -> (f64, Array1<f64>) {
        let (n, k) = (self.prep.n, self.prep.k);
        let nf = n as f64;
        let mut grad = Array1::zeros(self.layout.dim);
        let pos_s = pos.as_slice().expect("contiguous position");
        let bail = |d: usize| (f64::NEG_INFINITY, Array1::zeros(d));

        let phi_effect = match &self.layout.phi {
            Some(r) => ArrayView2::from_shape((n, k), &pos_s[r.clone()])
                .expect("phi block shape")
                .to_owned(),
            None => Array2::zeros((n, k)),
        };
        let common = common_eval(
            &self.prep,
            &self.layout,
            pos,
            &self.priors,
            &phi_effect,
            &mut grad,
        );
        let mut logp = common.logp;
        let gs = grad.as_slice_mut().expect("contiguous gradient");

        match self.kind {
            ModelKind::Fh => {}
            ModelKind::Sms => {
                let phi_range = self.layout.phi.clone().expect("sms has phi");
                let rho_range = self.layout.logit_rho.clone().expect("sms has rho");
                let sig_range = self.layout.sigma_chol.clone().expect("sms has sigma");
                let (rho_jac, rho_jac_grad, rho) =
                    transforms::uniform_rho_unconstrained(pos_s[rho_range.start]);
                let sigma = SigmaBlock::from_params(&pos_s[sig_range.clone()], k);
                let factor = match factor_q(&self.graph, rho) {
                    Ok(f) => f,
                    Err(_) => return bail(self.layout.dim),
                };
                // S = phi' Q phi via K sparse matvecs
                let mut qphi = Array2::zeros((n, k));
                let mut out = vec![0.0; n];
                for c in 0..k {
                    let col = phi_effect.column(c).to_vec();
                    self.graph.q_matvec(rho, &col, &mut out);
                    for i in 0..n {
                        qphi[[i, c]] = out[i];
                    }
                }
                let s = phi_effect.t().dot(&qphi);
                let tr_s = (&sigma.sigma_inv * &s).sum();
                logp += -0.5 * (n * k) as f64 * LN_2PI - 0.5 * nf * sigma.log_det
                    + 0.5 * k as f64 * factor.log_det()
                    - 0.5 * tr_s;
                logp += rho_jac + sigma.inv_wishart_log_density(self.iw_df);
                if want_grad && logp.is_finite() {
                    let qphi_sinv = qphi.dot(&sigma.sigma_inv);
                    for i in 0..n {
                        for c in 0..k {
                            gs[phi_range.start + i * k + c] =
                                common.e[[i, c]] - qphi_sinv[[i, c]];
                        }
                    }
                    // d/d rho of the field term: the log-determinant trace
                    // and the quadratic form's adjacency part
                    let mut wphi = Array2::zeros((n, k));
                    for c in 0..k {
                        let col = phi_effect.column(c).to_vec();
                        self.graph.w_matvec(&col, &mut out);
                        for i in 0..n {
                            wphi[[i, c]] = out[i];
                        }
                    }
                    let t = phi_effect.t().dot(&wphi);
                    let tr_t = (&sigma.sigma_inv * &t).sum();
                    let dlogp_drho = -0.5 * k as f64 * factor.trace_qinv_w() + 0.5 * tr_t;
                    gs[rho_range.start] = dlogp_drho * rho * (1.0 - rho) + rho_jac_grad;
                    // field term's covariance gradient, then the prior's
                    let sinv_s_sinv = sigma.sigma_inv.dot(&s).dot(&sigma.sigma_inv);
                    let g_field = sinv_s_sinv.mapv(|v| 0.5 * v)
                        - sigma.sigma_inv.mapv(|v| 0.5 * nf * v);
                    let grad_l = g_field.dot(&sigma.l).mapv(|v| 2.0 * v);
                    sigma.chain_to_params(&grad_l, |_| 0.0, &mut gs[sig_range.clone()]);
                    sigma.add_inv_wishart_gradient(self.iw_df, &mut gs[sig_range]);
                }
            }
            ModelKind::Gms => {
                let phi_range = self.layout.phi.clone().expect("gms has phi");
                let rho_range = self.layout.logit_rho.clone().expect("gms has rho");
                let s2_range = self.layout.log_sigma2.clone().expect("gms has scales");
                let eta_range = self.layout.eta.clone().expect("gms has eta");
                let marg = self.marg;
                let cond = 1 - marg;
                let pc = phi_effect.column(cond).to_vec();
                let pm = phi_effect.column(marg).to_vec();
                let (jac_c, jacg_c, rho_c) =
                    transforms::uniform_rho_unconstrained(pos_s[rho_range.start]);
                let (jac_m, jacg_m, rho_m) =
                    transforms::uniform_rho_unconstrained(pos_s[rho_range.start + 1]);
                let (u_c, u_m) = (pos_s[s2_range.start], pos_s[s2_range.start + 1]);
                let (inv_s2c, inv_s2m) = ((-u_c).exp(), (-u_m).exp());
                let (eta0, eta1) = (pos_s[eta_range.start], pos_s[eta_range.start + 1]);
                let factor_c = match factor_q(&self.graph, rho_c) {
                    Ok(f) => f,
                    Err(_) => return bail(self.layout.dim),
                };
                let factor_m = match factor_q(&self.graph, rho_m) {
                    Ok(f) => f,
                    Err(_) => return bail(self.layout.dim),
                };
                // conditional field's residual r = pc - eta0 pm - eta1 W pm
                let mut wpm = vec![0.0; n];
                self.graph.w_matvec(&pm, &mut wpm);
                let r: Vec<f64> = (0..n)
                    .map(|i| pc[i] - eta0 * pm[i] - eta1 * wpm[i])
                    .collect();
                let q_r = self.graph.q_quad(rho_c, &r);
                let q_m = self.graph.q_quad(rho_m, &pm);
                logp += -0.5 * nf * LN_2PI - 0.5 * nf * u_c + 0.5 * factor_c.log_det()
                    - 0.5 * q_r * inv_s2c;
                logp += -0.5 * nf * LN_2PI - 0.5 * nf * u_m + 0.5 * factor_m.log_det()
                    - 0.5 * q_m * inv_s2m;
                logp += jac_c + jac_m;
                let (igv_c, igg_c) = transforms::inv_gamma_unconstrained(
                    u_c,
                    self.priors.sigma2_shape,
                    self.priors.sigma2_scale,
                );
                let (igv_m, igg_m) = transforms::inv_gamma_unconstrained(
                    u_m,
                    self.priors.sigma2_shape,
                    self.priors.sigma2_scale,
                );
                let (ev0, eg0) = transforms::normal_unconstrained(eta0, self.priors.eta_variance);
                let (ev1, eg1) = transforms::normal_unconstrained(eta1, self.priors.eta_variance);
                logp += igv_c + igv_m + ev0 + ev1;
                if want_grad && logp.is_finite() {
                    let mut qcr = vec![0.0; n];
                    self.graph.q_matvec(rho_c, &r, &mut qcr);
                    let mut qmpm = vec![0.0; n];
                    self.graph.q_matvec(rho_m, &pm, &mut qmpm);
                    let mut wqcr = vec![0.0; n];
                    self.graph.w_matvec(&qcr, &mut wqcr);
                    for i in 0..n {
                        gs[phi_range.start + i * 2 + cond] = common.e[[i, cond]] - qcr[i] * inv_s2c;
                        gs[phi_range.start + i * 2 + marg] = common.e[[i, marg]]
                            - qmpm[i] * inv_s2m
                            + (eta0 * qcr[i] + eta1 * wqcr[i]) * inv_s2c;
                    }
                    let dc = -0.5 * factor_c.trace_qinv_w() + 0.5 * self.graph.w_quad(&r) * inv_s2c;
                    let dm =
                        -0.5 * factor_m.trace_qinv_w() + 0.5 * self.graph.w_quad(&pm) * inv_s2m;
                    gs[rho_range.start] = dc * rho_c * (1.0 - rho_c) + jacg_c;
                    gs[rho_range.start + 1] = dm * rho_m * (1.0 - rho_m) + jacg_m;
                    gs[s2_range.start] = -0.5 * nf + 0.5 * q_r * inv_s2c + igg_c;
                    gs[s2_range.start + 1] = -0.5 * nf + 0.5 * q_m * inv_s2m + igg_m;
                    let dot = |a: &[f64], b: &[f64]| -> f64 {
                        a.iter().zip(b).map(|(x, y)| x * y).sum()
                    };
                    gs[eta_range.start] = dot(&pm, &qcr) * inv_s2c + eg0;
                    gs[eta_range.start + 1] = dot(&wpm, &qcr) * inv_s2c + eg1;
                }
            }
            _ => unreachable!("variational kinds use VariationalTarget"),
        }

        if !logp.is_finite() {
            return bail(self.layout.dim);
        }
        (logp, grad)
    }
}

impl crate::hmc::TargetDensity for FullRankTarget {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn log_density_gradient(&self, position: &Array1<f64>) -> (f64, Array1<f64>) {
        self.eval(position, true)
    }

    fn log_density(&self, position: &Array1<f64>) -> f64 {
        self.eval(position, false).0
    }

    fn blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        self.layout.blocks()
    }
}
