//! Hierarchical small-area models over a region graph, fit with Hamiltonian
//! Monte Carlo.
//!
//! All five model kinds share one observation layer — direct estimates with
//! known sampling variances around latent cell means, a linear predictor,
//! and independent cell-level noise — and differ in the spatial term:
//!
//! * `fh`: no spatial term.
//! * `sms`: a full-rank separable multivariate CAR field with one smoothing
//!   parameter and a free cross-response covariance.
//! * `gms`: a full-rank two-response coregionalized CAR field (one marginal
//!   field, one conditional field linked by a neighbor-weighted bridge).
//! * `vsms` / `vgms`: the same two structures with the CAR fields replaced
//!   by a pre-trained decoder that maps standard-normal latents to fields
//!   that mimic CAR draws, removing every sparse factorization from the
//!   sampling loop.
//!
//! Missing cells are handled by dropping them from the likelihood; the model
//! layer still defines every cell mean, so posterior draws interpolate the
//! gaps.

pub mod data;
pub mod full_rank;
pub mod summary;
pub mod transforms;
pub mod variational;

use std::ops::Range;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AdError;
use crate::graph::RegionGraph;
use crate::hmc::diagnostics::{diagnostics, ChainDiagnostics};
use crate::hmc::{self, HmcConfig, HmcError, PosteriorDraws, TargetDensity};
use crate::priors::Layout;
use crate::vae::DecoderArtifact;

pub use data::DirectEstimateTable;
pub use full_rank::FullRankTarget;
pub use summary::{summarize_theta, CellSummary, ThetaSummary};
pub use variational::VariationalTarget;

/// Largest acceptable relative error between analytic and finite-difference
/// gradients in the pre-sampling sanity check.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Split R-hat above this triggers a mixing warning on the block.
pub const RHAT_WARN: f64 = 1.05;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cell ({region}, {response}) has a non-finite estimate or non-positive error")]
    BadCell { region: String, response: String },
    #[error("regions do not match the graph: {0}")]
    RegionMismatch(String),
    #[error("bad data file: {0}")]
    Csv(String),
    #[error("model/data mismatch: {0}")]
    KMismatch(String),
    #[error("covariate matrix is rank deficient; drop a collinear column")]
    SingularDesign,
    #[error("model {0} needs a decoder artifact")]
    MissingDecoder(ModelKind),
    #[error("decoder was trained on a different graph (artifact hash {artifact}, graph hash {graph})")]
    HashMismatch { artifact: String, graph: String },
    #[error("decoder does not fit this model: {0}")]
    DecoderMismatch(String),
    #[error("autodiff error: {0}")]
    Ad(#[from] AdError),
    #[error("sampler error: {0}")]
    Hmc(#[from] HmcError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fh,
    Sms,
    Gms,
    Vsms,
    Vgms,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Fh,
        ModelKind::Sms,
        ModelKind::Gms,
        ModelKind::Vsms,
        ModelKind::Vgms,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fh => "fh",
            ModelKind::Sms => "sms",
            ModelKind::Gms => "gms",
            ModelKind::Vsms => "vsms",
            ModelKind::Vgms => "vgms",
        }
    }

    /// Kinds whose spatial field comes from a trained decoder.
    pub fn is_variational(self) -> bool {
        matches!(self, ModelKind::Vsms | ModelKind::Vgms)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fh" => Ok(ModelKind::Fh),
            "sms" => Ok(ModelKind::Sms),
            "gms" => Ok(ModelKind::Gms),
            "vsms" => Ok(ModelKind::Vsms),
            "vgms" => Ok(ModelKind::Vgms),
            other => Err(format!(
                "unknown model {other:?}; expected fh, sms, gms, vsms, or vgms"
            )),
        }
    }
}

/// Hyperparameters of the weakly informative priors shared by all kinds.
/// Scale variances get inverse-gamma(shape, scale) priors, regression and
/// bridge coefficients mean-zero normals, smoothing parameters Unif(0,1),
/// and the cross-response covariance an inverse-Wishart(K+1, I).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Priors {
    #[serde(default = "default_ig_shape")]
    pub tau2_shape: f64,
    #[serde(default = "default_ig_shape")]
    pub tau2_scale: f64,
    #[serde(default = "default_coef_variance")]
    pub beta_variance: f64,
    #[serde(default = "default_ig_shape")]
    pub sigma2_shape: f64,
    #[serde(default = "default_ig_shape")]
    pub sigma2_scale: f64,
    #[serde(default = "default_coef_variance")]
    pub eta_variance: f64,
}

fn default_ig_shape() -> f64 {
    0.001
}

fn default_coef_variance() -> f64 {
    100.0
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            tau2_shape: 0.001,
            tau2_scale: 0.001,
            beta_variance: 100.0,
            sigma2_shape: 0.001,
            sigma2_scale: 0.001,
            eta_variance: 100.0,
        }
    }
}

/// Inverse-Wishart degrees of freedom used for a K x K covariance: the
/// smallest integer value that keeps the prior proper with an identity scale.
pub fn iw_df(k: usize) -> f64 {
    (k + 1) as f64
}

/// Which model to fit and with what structure options.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Number of responses the model expects; validated against the data.
    pub k: usize,
    #[serde(default)]
    pub priors: Priors,
    /// For the coregionalized kinds: index of the response modeled as the
    /// marginal field (the other is conditional on it).
    #[serde(default = "default_gmcar_order")]
    pub gmcar_order: usize,
    /// For `vsms`: replace the free cross-response covariance with a single
    /// scalar scale on the decoded field.
    #[serde(default)]
    pub scalar_scale: bool,
}

fn default_gmcar_order() -> usize {
    1
}

impl ModelSpec {
    pub fn new(kind: ModelKind, k: usize) -> Self {
        ModelSpec {
            kind,
            k,
            priors: Priors::default(),
            gmcar_order: default_gmcar_order(),
            scalar_scale: false,
        }
    }
}

/// Index ranges of each parameter block inside the flat unconstrained
/// sampling vector. Matrices are packed row-major: `beta[p*K + k]`,
/// `theta[i*K + k]`, `phi[i*K + k]`.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub theta: Range<usize>,
    pub beta: Range<usize>,
    pub log_tau2: Range<usize>,
    pub phi: Option<Range<usize>>,
    /// One smoothing parameter for `sms`; `[conditional, marginal]` for
    /// `gms`.
    pub logit_rho: Option<Range<usize>>,
    /// Cross-response covariance parameters: K log-diagonals of the Cholesky
    /// factor, then its strictly-lower entries row-major.
    pub sigma_chol: Option<Range<usize>>,
    /// `[conditional, marginal]` field scales for the coregionalized kinds;
    /// a single scale for scalar-covariance `vsms`.
    pub log_sigma2: Option<Range<usize>>,
    /// Bridge coefficients `[identity, neighbor-sum]`.
    pub eta: Option<Range<usize>>,
    /// Decoder latents. `vsms`: one length-N*K latent; `vgms`: the
    /// conditional field's latent (length N) then the marginal's.
    pub z: Option<Range<usize>>,
    pub dim: usize,
}

impl ParamLayout {
    pub fn for_model(spec: &ModelSpec, n: usize, k: usize, p: usize) -> ParamLayout {
        let mut cursor = 0usize;
        let mut take = |len: usize| {
            let r = cursor..cursor + len;
            cursor += len;
            r
        };
        let theta = take(n * k);
        let beta = take(p * k);
        let log_tau2 = take(k);
        let mut phi = None;
        let mut logit_rho = None;
        let mut sigma_chol = None;
        let mut log_sigma2 = None;
        let mut eta = None;
        let mut z = None;
        match spec.kind {
            ModelKind::Fh => {}
            ModelKind::Sms => {
                phi = Some(take(n * k));
                logit_rho = Some(take(1));
                sigma_chol = Some(take(transforms::sigma_param_len(k)));
            }
            ModelKind::Gms => {
                phi = Some(take(n * 2));
                logit_rho = Some(take(2));
                log_sigma2 = Some(take(2));
                eta = Some(take(2));
            }
            ModelKind::Vsms => {
                z = Some(take(n * k));
                if spec.scalar_scale {
                    log_sigma2 = Some(take(1));
                } else {
                    sigma_chol = Some(take(transforms::sigma_param_len(k)));
                }
            }
            ModelKind::Vgms => {
                z = Some(take(2 * n));
                log_sigma2 = Some(take(2));
                eta = Some(take(2));
            }
        }
        let dim = cursor;
        ParamLayout {
            theta,
            beta,
            log_tau2,
            phi,
            logit_rho,
            sigma_chol,
            log_sigma2,
            eta,
            z,
            dim,
        }
    }

    /// Named blocks sorted by position, covering `0..dim`.
    pub fn blocks(&self) -> Vec<(String, Range<usize>)> {
        let mut out: Vec<(String, Range<usize>)> = vec![
            ("theta".into(), self.theta.clone()),
            ("beta".into(), self.beta.clone()),
            ("log_tau2".into(), self.log_tau2.clone()),
        ];
        let optional: [(&str, &Option<Range<usize>>); 6] = [
            ("phi", &self.phi),
            ("logit_rho", &self.logit_rho),
            ("sigma_chol", &self.sigma_chol),
            ("log_sigma2", &self.log_sigma2),
            ("eta", &self.eta),
            ("z", &self.z),
        ];
        for (name, range) in optional {
            if let Some(r) = range {
                out.push((name.to_string(), r.clone()));
            }
        }
        out.sort_by_key(|(_, r)| r.start);
        out
    }
}

/// Data shared by every target: responses, precisions, mask, design matrix,
/// and the offsets that recenter the sampler's theta coordinates on the
/// observed estimates.
#[derive(Debug, Clone)]
pub(crate) struct PreparedData {
    pub y: Array2<f64>,
    /// 1/gamma^2 on observed cells, 0 elsewhere, so masked cells drop out of
    /// likelihood sums without branching.
    pub inv_gamma_sq: Array2<f64>,
    #[allow(dead_code)] // read by tests; kept so prepared data stands alone
    pub observed: Array2<bool>,
    pub x: Array2<f64>,
    /// Sum over observed cells of -0.5 ln(2 pi gamma^2).
    pub lik_const: f64,
    /// theta = offset + sampled coordinate; offsets are the observed
    /// estimates (column means for missing cells) so chains start near the
    /// data rather than at zero.
    pub offset: Array2<f64>,
    pub n: usize,
    pub k: usize,
    pub p: usize,
}

impl PreparedData {
    pub fn new(data: &DirectEstimateTable) -> PreparedData {
        let n = data.n_regions();
        let k = data.n_responses();
        let p = data.x.ncols();
        let mut inv_gamma_sq = Array2::zeros((n, k));
        let mut lik_const = 0.0;
        for i in 0..n {
            for c in 0..k {
                if data.observed[[i, c]] {
                    let g2 = data.gamma[[i, c]] * data.gamma[[i, c]];
                    inv_gamma_sq[[i, c]] = 1.0 / g2;
                    lik_const += -0.5 * (2.0 * std::f64::consts::PI * g2).ln();
                }
            }
        }
        let mut offset = Array2::zeros((n, k));
        for c in 0..k {
            let mut sum = 0.0;
            let mut count = 0usize;
            for i in 0..n {
                if data.observed[[i, c]] {
                    sum += data.y[[i, c]];
                    count += 1;
                }
            }
            let mean = if count > 0 { sum / count as f64 } else { 0.0 };
            for i in 0..n {
                offset[[i, c]] = if data.observed[[i, c]] {
                    data.y[[i, c]]
                } else {
                    mean
                };
            }
        }
        PreparedData {
            y: data.y.clone(),
            inv_gamma_sq,
            observed: data.observed.clone(),
            x: data.x.clone(),
            lik_const,
            offset,
            n,
            k,
            p,
        }
    }
}

/// Evaluation of the observation layer and cell-mean model shared by all
/// kinds, given the spatial effect matrix.
pub(crate) struct CommonEval {
    pub logp: f64,
    /// Standardized cell-mean residuals (theta - mu) / tau2_k; the gradient
    /// of the log density with respect to the spatial effect.
    pub e: Array2<f64>,
}

/// Log density of likelihood + cell-mean layer + beta and tau2 priors, with
/// gradients for theta coordinates, beta, and log tau2 written into `grad`
/// at the positions given by `layout` (always wanted: these are cheap).
pub(crate) fn common_eval(
    prep: &PreparedData,
    layout: &ParamLayout,
    pos: &Array1<f64>,
    priors: &Priors,
    phi_effect: &Array2<f64>,
    grad: &mut Array1<f64>,
) -> CommonEval {
    let (n, k, p) = (prep.n, prep.k, prep.p);
    let pos_s = pos.as_slice().expect("contiguous position");
    let theta_t = &pos_s[layout.theta.clone()];
    let beta_s = &pos_s[layout.beta.clone()];
    let u_s = &pos_s[layout.log_tau2.clone()];

    let mut logp = prep.lik_const;
    let mut e = Array2::zeros((n, k));
    let mut sse = vec![0.0; k];
    // mu = X beta + phi
    let beta = ndarray::ArrayView2::from_shape((p, k), beta_s).expect("beta shape");
    let xb = prep.x.dot(&beta);
    let inv_tau2: Vec<f64> = u_s.iter().map(|&u| (-u).exp()).collect();
    for i in 0..n {
        for c in 0..k {
            let theta = prep.offset[[i, c]] + theta_t[i * k + c];
            let resid_y = prep.y[[i, c]] - theta;
            logp += -0.5 * resid_y * resid_y * prep.inv_gamma_sq[[i, c]];
            let dev = theta - xb[[i, c]] - phi_effect[[i, c]];
            sse[c] += dev * dev;
            e[[i, c]] = dev * inv_tau2[c];
            grad[layout.theta.start + i * k + c] =
                resid_y * prep.inv_gamma_sq[[i, c]] - e[[i, c]];
        }
    }
    for c in 0..k {
        let u = u_s[c];
        logp += -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * n as f64 * u
            - 0.5 * sse[c] * inv_tau2[c];
        let (pv, pg) = transforms::inv_gamma_unconstrained(u, priors.tau2_shape, priors.tau2_scale);
        logp += pv;
        grad[layout.log_tau2.start + c] = -0.5 * n as f64 + 0.5 * sse[c] * inv_tau2[c] + pg;
    }
    // beta gradient: X^T E minus the prior pull
    let xte = prep.x.t().dot(&e);
    for pi in 0..p {
        for c in 0..k {
            let b = beta[[pi, c]];
            let (pv, pg) = transforms::normal_unconstrained(b, priors.beta_variance);
            logp += pv;
            grad[layout.beta.start + pi * k + c] = xte[[pi, c]] + pg;
        }
    }
    CommonEval { logp, e }
}

/// A ready-to-sample posterior target for one model and one data set.
pub enum ModelTarget {
    FullRank(FullRankTarget),
    Variational(VariationalTarget),
}

impl ModelTarget {
    pub fn layout(&self) -> &ParamLayout {
        match self {
            ModelTarget::FullRank(t) => t.layout(),
            ModelTarget::Variational(t) => t.layout(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelTarget::FullRank(t) => t.kind(),
            ModelTarget::Variational(t) => t.kind(),
        }
    }

    pub(crate) fn theta_offset(&self) -> &Array2<f64> {
        match self {
            ModelTarget::FullRank(t) => &t.prep().offset,
            ModelTarget::Variational(t) => &t.prep().offset,
        }
    }
}

impl TargetDensity for ModelTarget {
    fn dim(&self) -> usize {
        self.layout().dim
    }

    fn log_density_gradient(&self, position: &Array1<f64>) -> (f64, Array1<f64>) {
        match self {
            ModelTarget::FullRank(t) => t.eval(position, true),
            ModelTarget::Variational(t) => t.eval(position, true),
        }
    }

    fn log_density(&self, position: &Array1<f64>) -> f64 {
        match self {
            ModelTarget::FullRank(t) => t.eval(position, false).0,
            ModelTarget::Variational(t) => t.eval(position, false).0,
        }
    }

    fn blocks(&self) -> Vec<(String, Range<usize>)> {
        self.layout().blocks()
    }
}

/// Validates the spec against data, graph, and (for the decoder kinds)
/// artifact, and assembles the posterior target. The table is re-aligned to
/// the graph's region order.
pub fn build_target(
    spec: &ModelSpec,
    data: &DirectEstimateTable,
    graph: &Arc<RegionGraph>,
    decoder: Option<&DecoderArtifact>,
) -> Result<ModelTarget, ModelError> {
    let aligned = data.aligned_to(graph)?;
    let k = aligned.n_responses();
    if spec.k != k {
        return Err(ModelError::KMismatch(format!(
            "model expects {} responses, data has {k}",
            spec.k
        )));
    }
    if matches!(spec.kind, ModelKind::Gms | ModelKind::Vgms) {
        if k != 2 {
            return Err(ModelError::KMismatch(format!(
                "{} models exactly 2 responses, data has {k}",
                spec.kind
            )));
        }
        if spec.gmcar_order > 1 {
            return Err(ModelError::KMismatch(format!(
                "gmcar_order must be 0 or 1, got {}",
                spec.gmcar_order
            )));
        }
    }
    // the cell-mean regression needs a full-rank design
    let xtx = aligned.x.t().dot(&aligned.x);
    if crate::dense::cholesky(&xtx).is_none() {
        return Err(ModelError::SingularDesign);
    }
    if spec.kind.is_variational() {
        let artifact = decoder.ok_or(ModelError::MissingDecoder(spec.kind))?;
        let graph_hash = graph.content_hash();
        if artifact.graph_hash != graph_hash {
            return Err(ModelError::HashMismatch {
                artifact: artifact.graph_hash.clone(),
                graph: graph_hash,
            });
        }
        let n = aligned.n_regions();
        let (want_layout, want_dim) = match spec.kind {
            ModelKind::Vsms => (Layout::VectorizedNk, n * k),
            ModelKind::Vgms => (Layout::UnivariateN, n),
            _ => unreachable!(),
        };
        if artifact.layout != want_layout {
            return Err(ModelError::DecoderMismatch(format!(
                "{} needs a {want_layout:?} decoder, artifact is {:?}",
                spec.kind, artifact.layout
            )));
        }
        if artifact.latent_dim != want_dim {
            return Err(ModelError::DecoderMismatch(format!(
                "decoder latent dimension {} does not match the required {want_dim}",
                artifact.latent_dim
            )));
        }
        let target = VariationalTarget::new(spec, &aligned, Arc::clone(graph), artifact)?;
        Ok(ModelTarget::Variational(target))
    } else {
        let target = FullRankTarget::new(spec, &aligned, Arc::clone(graph))?;
        Ok(ModelTarget::FullRank(target))
    }
}

/// A fitted model: kept draws (theta block already shifted back to the data
/// scale), convergence diagnostics when enough chains/draws exist, and any
/// warnings raised on the way.
#[derive(Debug)]
pub struct FitResult {
    pub draws: PosteriorDraws,
    pub diagnostics: Option<ChainDiagnostics>,
    pub warnings: Vec<String>,
}

/// Builds the target, sanity-checks its gradient at a few random points,
/// runs the sampler, and post-processes the draws.
pub fn fit(
    spec: &ModelSpec,
    data: &DirectEstimateTable,
    graph: &Arc<RegionGraph>,
    decoder: Option<&DecoderArtifact>,
    config: &HmcConfig,
) -> Result<FitResult, ModelError> {
    let target = build_target(spec, data, graph, decoder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Finite differences can straddle a decoder activation kink, so one
    // clean pass out of two attempts is accepted.
    let mut worst = hmc::validate_gradient(&target, 6, 12, 1e-5, &mut rng);
    if worst > GRAD_CHECK_TOL {
        worst = worst.min(hmc::validate_gradient(&target, 6, 12, 1e-5, &mut rng));
    }
    if worst > GRAD_CHECK_TOL {
        return Err(HmcError::GradientCheckFailed {
            max_rel_error: worst,
        }
        .into());
    }
    let mut draws = hmc::run_chain(&target, config, &mut rng)?;
    // shift theta coordinates back to the data scale
    let offset = target.theta_offset();
    let flat = offset.as_slice().expect("contiguous offsets");
    let theta = target.layout().theta.clone();
    for mut chain in draws.draws.outer_iter_mut() {
        for mut it in chain.outer_iter_mut() {
            for (j, &o) in flat.iter().enumerate() {
                it[theta.start + j] += o;
            }
        }
    }
    let mut warnings = Vec::new();
    let total_div: usize = draws.divergences.iter().sum();
    if total_div > 0 {
        warnings.push(format!(
            "{total_div} divergent transitions after burn-in; treat tail quantiles with care"
        ));
    }
    let diagnostics = match diagnostics(&draws) {
        Ok(d) => {
            for b in &d.blocks {
                if b.rhat_max.is_nan() || b.rhat_max > RHAT_WARN {
                    warnings.push(format!(
                        "block {}: split R-hat {:.3} exceeds {RHAT_WARN}; chains may not have mixed",
                        b.name, b.rhat_max
                    ));
                }
            }
            Some(d)
        }
        Err(HmcError::TooFewDraws { chains, kept }) => {
            warnings.push(format!(
                "diagnostics skipped: {chains} chain(s) with {kept} kept draws are too few for split R-hat"
            ));
            None
        }
        Err(e) => return Err(e.into()),
    };
    Ok(FitResult {
        draws,
        diagnostics,
        warnings,
    })
}
