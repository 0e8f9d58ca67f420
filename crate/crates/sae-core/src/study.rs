//! Simulation-study driver: build a truth surface once, then repeatedly
//! simulate direct estimates, fit the requested models, and score them
//! against the truth on the original (exponentiated) scale.
//!
//! Replicates run in parallel worker slots with independent derived seeds;
//! the model fits inside one replicate run sequentially so per-model wall
//! clocks are comparable. Everything except the timing block of the report
//! is a pure function of the configuration (including the master seed).

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::car::CarError;
use crate::graph::{GraphError, RegionGraph};
use crate::hmc::{HmcConfig, HmcError};
use crate::metrics;
use crate::models::{
    fit, summarize_theta, DirectEstimateTable, ModelError, ModelKind, ModelSpec, Priors,
};
use crate::priors::{
    generate_training_set, sample_gmcar, sample_separable, GmcarParams, Layout, PriorError,
};
use crate::util::derive_seed;
use crate::vae::{init_vae, train, DecoderArtifact, DecoderMeta, VaeConfig, VaeError};

/// Nominal 95% intervals throughout the study.
pub const INTERVAL_ALPHA: f64 = 0.05;
/// Half-width multiplier for the direct-estimate baseline intervals.
const DIRECT_Z: f64 = 1.96;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("bad study configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Car(#[from] CarError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Hmc(#[from] HmcError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn default_n_covariates() -> usize {
    1
}
fn default_gamma_low() -> f64 {
    0.3
}
fn default_gamma_high() -> f64 {
    0.6
}
fn default_rho() -> f64 {
    0.9
}
fn default_sigma2() -> f64 {
    0.3
}
fn default_decoder_samples() -> usize {
    10_000
}

/// Synthetic truth on a rows x cols lattice: theta = X beta + spatial field,
/// X = intercept plus standard-normal covariates, gamma ~ U[low, high].
/// The field is one GMCAR draw when k = 2 (the paired-response case) and a
/// separable draw with covariance sigma2 * I otherwise.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticTruth {
    pub rows: usize,
    pub cols: usize,
    pub k: usize,
    #[serde(default = "default_n_covariates")]
    pub n_covariates: usize,
    /// Row-major (1 + n_covariates) x k coefficients; intercept row first.
    /// Defaults to intercept 2.0 and slope 0.5 for every response.
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    #[serde(default = "default_gamma_low")]
    pub gamma_low: f64,
    #[serde(default = "default_gamma_high")]
    pub gamma_high: f64,
    /// Separable-field smoothing (k != 2).
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Separable-field scale (k != 2).
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    /// Paired-response field parameters (k = 2 only).
    #[serde(default)]
    pub gmcar: Option<GmcarParams>,
}

fn default_gmcar_truth() -> GmcarParams {
    GmcarParams {
        sigma2_1: 0.3,
        sigma2_2: 0.3,
        rho1: 0.95,
        rho2: 0.95,
        eta0: 0.6,
        eta1: 0.1,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TruthSource {
    Synthetic(SyntheticTruth),
    /// Fully observed direct-estimate CSV (y columns hold the model-scale
    /// truth, se columns hold gamma) plus an edge-list graph file.
    File { data: PathBuf, graph: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub truth: TruthSource,
    pub n_replicates: usize,
    pub models: Vec<ModelKind>,
    /// Fraction of cells masked per replicate (interpolation exercise).
    #[serde(default)]
    pub missing_frac: f64,
    #[serde(default)]
    pub hmc: HmcConfig,
    #[serde(default)]
    pub vae: VaeConfig,
    #[serde(default = "default_decoder_samples")]
    pub decoder_samples: usize,
    #[serde(default)]
    pub priors: Priors,
    /// Use the single-scale variant of the vectorized separable model.
    #[serde(default)]
    pub scalar_scale: bool,
    #[serde(default)]
    pub seed: u64,
}

impl SimulationConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, StudyError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SimulationConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        if self.n_replicates == 0 {
            return Err(StudyError::BadConfig("n_replicates must be >= 1".into()));
        }
        if self.models.is_empty() {
            return Err(StudyError::BadConfig("no models requested".into()));
        }
        if !(0.0..1.0).contains(&self.missing_frac) {
            return Err(StudyError::BadConfig(format!(
                "missing_frac {} must lie in [0, 1)",
                self.missing_frac
            )));
        }
        self.hmc.validate()?;
        if let TruthSource::Synthetic(s) = &self.truth {
            if s.rows * s.cols < 4 || s.k == 0 {
                return Err(StudyError::BadConfig(
                    "synthetic truth needs at least 4 regions and k >= 1".into(),
                ));
            }
            if !(s.gamma_low > 0.0 && s.gamma_high >= s.gamma_low) {
                return Err(StudyError::BadConfig(
                    "gamma bounds must satisfy 0 < low <= high".into(),
                ));
            }
            if !(0.0..1.0).contains(&s.rho) || s.sigma2 <= 0.0 {
                return Err(StudyError::BadConfig(
                    "field parameters need rho in [0,1) and sigma2 > 0".into(),
                ));
            }
            if s.gmcar.is_some() && s.k != 2 {
                return Err(StudyError::BadConfig(
                    "paired-response field parameters require k = 2".into(),
                ));
            }
            let p = 1 + s.n_covariates;
            if let Some(b) = &s.beta {
                if b.len() != p * s.k {
                    return Err(StudyError::BadConfig(format!(
                        "beta must hold {} values (covariates x responses), got {}",
                        p * s.k,
                        b.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Materialized truth: the surface the study scores against.
#[derive(Debug, Clone)]
pub struct StudyTruth {
    pub graph: Arc<RegionGraph>,
    /// Model-scale truth, n x k.
    pub theta: Array2<f64>,
    pub gamma: Array2<f64>,
    pub x: Array2<f64>,
    pub covariate_names: Vec<String>,
    pub response_names: Vec<String>,
}

pub fn build_truth(config: &SimulationConfig) -> Result<StudyTruth, StudyError> {
    match &config.truth {
        TruthSource::Synthetic(s) => {
            let graph = Arc::new(RegionGraph::lattice(s.rows, s.cols));
            let n = graph.n_regions();
            let k = s.k;
            let p = 1 + s.n_covariates;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 10));
            let mut x = Array2::ones((n, p));
            for j in 1..p {
                for i in 0..n {
                    x[[i, j]] = rng.sample::<f64, _>(StandardNormal);
                }
            }
            let beta = match &s.beta {
                Some(b) => Array2::from_shape_vec((p, k), b.clone())
                    .expect("validated beta length"),
                None => Array2::from_shape_fn((p, k), |(j, _)| if j == 0 { 2.0 } else { 0.5 }),
            };
            let phi = if k == 2 {
                let params = s.gmcar.unwrap_or_else(default_gmcar_truth);
                let draw = sample_gmcar(&graph, &params, 1, &mut rng)?;
                let mut phi = Array2::zeros((n, 2));
                for i in 0..n {
                    phi[[i, 0]] = draw.phi1[[i, 0]];
                    phi[[i, 1]] = draw.phi2[[i, 0]];
                }
                phi
            } else {
                let sigma = Array2::from_diag_elem(k, s.sigma2);
                sample_separable(&graph, s.rho, &sigma, 1, &mut rng)?.phi[0].clone()
            };
            let theta = x.dot(&beta) + &phi;
            let gamma =
                Array2::from_shape_fn((n, k), |_| rng.random_range(s.gamma_low..=s.gamma_high));
            let covariate_names = std::iter::once("intercept".to_string())
                .chain((1..p).map(|j| format!("x{j}")))
                .collect();
            let response_names = (0..k).map(|c| format!("r{c}")).collect();
            Ok(StudyTruth {
                graph,
                theta,
                gamma,
                x,
                covariate_names,
                response_names,
            })
        }
        TruthSource::File { data, graph } => {
            let text = std::fs::read_to_string(graph)?;
            let graph = Arc::new(RegionGraph::from_edge_list_text(&text)?);
            let table = DirectEstimateTable::from_csv(data, 0.90)?.aligned_to(&graph)?;
            if !table.observed.iter().all(|&b| b) {
                return Err(StudyError::BadConfig(
                    "truth file must have every cell observed".into(),
                ));
            }
            Ok(StudyTruth {
                graph,
                theta: table.y.clone(),
                gamma: table.gamma.clone(),
                x: table.x.clone(),
                covariate_names: table.covariate_names.clone(),
                response_names: table.response_names.clone(),
            })
        }
    }
}

/// One simulated survey: truth plus independent N(0, gamma^2) noise per cell.
pub fn simulate_direct<R: Rng + ?Sized>(
    truth: &Array2<f64>,
    gamma: &Array2<f64>,
    rng: &mut R,
) -> Array2<f64> {
    Array2::from_shape_fn(truth.dim(), |idx| {
        truth[idx] + gamma[idx] * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Observation mask with `frac` of cells hidden, guaranteeing that every
/// response column keeps at least one observed cell.
fn mask_cells<R: Rng + ?Sized>(n: usize, k: usize, frac: f64, rng: &mut R) -> Array2<bool> {
    let mut observed = Array2::from_elem((n, k), true);
    let hide = ((n * k) as f64 * frac).floor() as usize;
    if hide == 0 {
        return observed;
    }
    let chosen = rand::seq::index::sample(rng, n * k, hide.min(n * k));
    for flat in chosen.iter() {
        observed[[flat / k, flat % k]] = false;
    }
    for c in 0..k {
        if (0..n).all(|i| !observed[[i, c]]) {
            observed[[0, c]] = true;
        }
    }
    observed
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub model: String,
    pub response: String,
    pub rmse: f64,
    pub interval_score: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AggregateRow {
    pub model: String,
    pub response: String,
    pub rmse: f64,
    pub interval_score: f64,
    pub coverage: f64,
    pub replicates: usize,
}

/// Masked-cell interpolation accuracy against the column-mean fallback.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InterpolationRow {
    pub replicate: usize,
    pub model: String,
    pub rmse: f64,
    pub baseline_rmse: f64,
    pub masked_cells: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WinRateRow {
    pub model: String,
    pub win_rate: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Failure {
    pub replicate: usize,
    pub model: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TimingRow {
    pub model: String,
    pub fits: usize,
    pub total_seconds: f64,
    pub seconds_per_fit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregated: Vec<AggregateRow>,
    pub replicates: Vec<ReplicateRow>,
    pub interpolation: Vec<InterpolationRow>,
    pub interpolation_win_rate: Vec<WinRateRow>,
    pub failures: Vec<Failure>,
    /// Wall-clock measurements; everything above this field is a pure
    /// function of the configuration.
    pub timing: Vec<TimingRow>,
}

#[derive(Serialize)]
struct DeterministicView<'a> {
    aggregated: &'a [AggregateRow],
    replicates: &'a [ReplicateRow],
    interpolation: &'a [InterpolationRow],
    interpolation_win_rate: &'a [WinRateRow],
    failures: &'a [Failure],
}

impl MetricsReport {
    /// JSON of the seed-determined portion of the report (timing excluded);
    /// byte-identical across runs with the same configuration.
    pub fn deterministic_json(&self) -> Result<String, StudyError> {
        Ok(serde_json::to_string_pretty(&DeterministicView {
            aggregated: &self.aggregated,
            replicates: &self.replicates,
            interpolation: &self.interpolation,
            interpolation_win_rate: &self.interpolation_win_rate,
            failures: &self.failures,
        })?)
    }

    pub fn to_json(&self) -> Result<String, StudyError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn aggregate(&self, model: &str, response: &str) -> Option<&AggregateRow> {
        self.aggregated
            .iter()
            .find(|r| r.model == model && r.response == response)
    }

    /// Aggregated rows as CSV.
    pub fn to_csv<W: std::io::Write>(&self, writer: W) -> Result<(), StudyError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["model", "response", "rmse", "interval_score", "coverage", "replicates"])
            .map_err(|e| StudyError::BadConfig(e.to_string()))?;
        for r in &self.aggregated {
            w.write_record([
                r.model.as_str(),
                r.response.as_str(),
                &format!("{}", r.rmse),
                &format!("{}", r.interval_score),
                &format!("{}", r.coverage),
                &format!("{}", r.replicates),
            ])
            .map_err(|e| StudyError::BadConfig(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

struct ReplicateOutcome {
    rows: Vec<ReplicateRow>,
    interpolation: Vec<InterpolationRow>,
    failures: Vec<Failure>,
    /// (model name, seconds) per completed fit, in model order.
    timings: Vec<(String, f64)>,
}

struct CellScores {
    rmse: f64,
    interval_score: f64,
    coverage: f64,
}

fn score_cells(
    est: &[f64],
    lower: &[f64],
    upper: &[f64],
    truth: &[f64],
) -> Result<CellScores, StudyError> {
    Ok(CellScores {
        rmse: metrics::rmse(est, truth)?,
        interval_score: metrics::mean_interval_score(lower, upper, truth, INTERVAL_ALPHA)?,
        coverage: metrics::coverage(lower, upper, truth)?,
    })
}

/// Trains one decoder per latent layout needed by the requested models.
pub fn train_decoders(
    config: &SimulationConfig,
    graph: &Arc<RegionGraph>,
    k: usize,
    timing: &mut Vec<TimingRow>,
) -> Result<Vec<(Layout, DecoderArtifact)>, StudyError> {
    let mut wanted = Vec::new();
    if config.models.contains(&ModelKind::Vsms) {
        wanted.push((Layout::VectorizedNk, k));
    }
    if config.models.contains(&ModelKind::Vgms) {
        wanted.push((Layout::UnivariateN, 1));
    }
    let mut out = Vec::new();
    for (idx, (layout, set_k)) in wanted.into_iter().enumerate() {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 20 + idx as u64));
        let set = generate_training_set(graph, config.decoder_samples, layout, set_k, &mut rng)?;
        let mut vae_cfg = config.vae.clone();
        vae_cfg.seed = derive_seed(config.seed, 30 + idx as u64);
        let model = init_vae(set.dim(), vae_cfg.seed);
        let (trained, trace) = train(model, &set, &vae_cfg)?;
        let final_elbo = trace.elbo.last().copied().unwrap_or(f64::NAN);
        let artifact = DecoderArtifact::from_model(
            &trained,
            DecoderMeta {
                layout,
                graph_hash: graph.content_hash(),
                seed: vae_cfg.seed,
                n_samples: set.n_samples(),
                final_elbo,
            },
        );
        timing.push(TimingRow {
            model: format!("decoder-{}", match layout {
                Layout::VectorizedNk => "vectorized",
                Layout::UnivariateN => "univariate",
            }),
            fits: 1,
            total_seconds: start.elapsed().as_secs_f64(),
            seconds_per_fit: start.elapsed().as_secs_f64(),
        });
        out.push((layout, artifact));
    }
    Ok(out)
}

fn decoder_for<'a>(
    decoders: &'a [(Layout, DecoderArtifact)],
    kind: ModelKind,
) -> Option<&'a DecoderArtifact> {
    let layout = match kind {
        ModelKind::Vsms => Layout::VectorizedNk,
        ModelKind::Vgms => Layout::UnivariateN,
        _ => return None,
    };
    decoders.iter().find(|(l, _)| *l == layout).map(|(_, a)| a)
}

fn run_replicate(
    rep: usize,
    config: &SimulationConfig,
    truth: &StudyTruth,
    decoders: &[(Layout, DecoderArtifact)],
) -> ReplicateOutcome {
    let n = truth.graph.n_regions();
    let k = truth.theta.ncols();
    let mut out = ReplicateOutcome {
        rows: Vec::new(),
        interpolation: Vec::new(),
        failures: Vec::new(),
        timings: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1000 + rep as u64));
    let y = simulate_direct(&truth.theta, &truth.gamma, &mut rng);
    let observed = mask_cells(n, k, config.missing_frac, &mut rng);
    let masked: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..k).map(move |c| (i, c)))
        .filter(|&(i, c)| !observed[[i, c]])
        .collect();

    let truth_orig = truth.theta.mapv(f64::exp);

    // direct-estimate baseline over the observed cells
    {
        let mut per_resp: Vec<ReplicateRow> = Vec::new();
        let mut ok = true;
        let mut all = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for c in 0..k {
            let mut est = Vec::new();
            let mut lo = Vec::new();
            let mut hi = Vec::new();
            let mut tr = Vec::new();
            for i in 0..n {
                if !observed[[i, c]] {
                    continue;
                }
                est.push(y[[i, c]].exp());
                lo.push((y[[i, c]] - DIRECT_Z * truth.gamma[[i, c]]).exp());
                hi.push((y[[i, c]] + DIRECT_Z * truth.gamma[[i, c]]).exp());
                tr.push(truth_orig[[i, c]]);
            }
            all.0.extend_from_slice(&est);
            all.1.extend_from_slice(&lo);
            all.2.extend_from_slice(&hi);
            all.3.extend_from_slice(&tr);
            match score_cells(&est, &lo, &hi, &tr) {
                Ok(s) => per_resp.push(ReplicateRow {
                    replicate: rep,
                    model: "direct".into(),
                    response: truth.response_names[c].clone(),
                    rmse: s.rmse,
                    interval_score: s.interval_score,
                    coverage: s.coverage,
                }),
                Err(e) => {
                    out.failures.push(Failure {
                        replicate: rep,
                        model: "direct".into(),
                        message: e.to_string(),
                    });
                    ok = false;
                }
            }
        }
        if ok {
            match score_cells(&all.0, &all.1, &all.2, &all.3) {
                Ok(s) => per_resp.push(ReplicateRow {
                    replicate: rep,
                    model: "direct".into(),
                    response: "all".into(),
                    rmse: s.rmse,
                    interval_score: s.interval_score,
                    coverage: s.coverage,
                }),
                Err(e) => out.failures.push(Failure {
                    replicate: rep,
                    model: "direct".into(),
                    message: e.to_string(),
                }),
            }
            out.rows.extend(per_resp);
        }
    }

    // fit table shared by every model in this replicate
    let covs = if truth.x.ncols() > 0 {
        Some((truth.covariate_names.clone(), truth.x.clone()))
    } else {
        None
    };
    let table = match DirectEstimateTable::from_parts(
        truth.graph.region_ids().to_vec(),
        truth.response_names.clone(),
        y.clone(),
        truth.gamma.clone(),
        observed.clone(),
        covs,
    ) {
        Ok(t) => t,
        Err(e) => {
            out.failures.push(Failure {
                replicate: rep,
                model: "*".into(),
                message: e.to_string(),
            });
            return out;
        }
    };

    for (mi, kind) in config.models.iter().enumerate() {
        let mut spec = ModelSpec::new(*kind, k);
        spec.priors = config.priors.clone();
        spec.scalar_scale = config.scalar_scale;
        let mut hmc = config.hmc.clone();
        hmc.seed = derive_seed(config.seed, 5000 + (rep * 64 + mi) as u64);
        let decoder = decoder_for(decoders, *kind);
        let start = Instant::now();
        let fitted = fit(&spec, &table, &truth.graph, decoder, &hmc);
        let seconds = start.elapsed().as_secs_f64();
        let fitted = match fitted {
            Ok(f) => f,
            Err(e) => {
                out.failures.push(Failure {
                    replicate: rep,
                    model: kind.name().into(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        out.timings.push((kind.name().to_string(), seconds));
        let summary = match summarize_theta(&fitted.draws, &table) {
            Ok(s) => s,
            Err(e) => {
                out.failures.push(Failure {
                    replicate: rep,
                    model: kind.name().into(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        // summaries are region-major: cell (i, c) sits at i*k + c
        let cell = |i: usize, c: usize| &summary.cells[i * k + c];
        let mut all = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut scored = true;
        for c in 0..k {
            let est: Vec<f64> = (0..n).map(|i| cell(i, c).mean_orig).collect();
            let lo: Vec<f64> = (0..n).map(|i| cell(i, c).q025_orig).collect();
            let hi: Vec<f64> = (0..n).map(|i| cell(i, c).q975_orig).collect();
            let tr: Vec<f64> = (0..n).map(|i| truth_orig[[i, c]]).collect();
            all.0.extend_from_slice(&est);
            all.1.extend_from_slice(&lo);
            all.2.extend_from_slice(&hi);
            all.3.extend_from_slice(&tr);
            match score_cells(&est, &lo, &hi, &tr) {
                Ok(s) => out.rows.push(ReplicateRow {
                    replicate: rep,
                    model: kind.name().into(),
                    response: truth.response_names[c].clone(),
                    rmse: s.rmse,
                    interval_score: s.interval_score,
                    coverage: s.coverage,
                }),
                Err(e) => {
                    out.failures.push(Failure {
                        replicate: rep,
                        model: kind.name().into(),
                        message: e.to_string(),
                    });
                    scored = false;
                }
            }
        }
        if scored {
            if let Ok(s) = score_cells(&all.0, &all.1, &all.2, &all.3) {
                out.rows.push(ReplicateRow {
                    replicate: rep,
                    model: kind.name().into(),
                    response: "all".into(),
                    rmse: s.rmse,
                    interval_score: s.interval_score,
                    coverage: s.coverage,
                });
            }
        }
        if !masked.is_empty() {
            // interpolated cells vs the observed-column-mean fallback
            let mut col_mean = vec![0.0; k];
            for c in 0..k {
                let vals: Vec<f64> = (0..n)
                    .filter(|&i| observed[[i, c]])
                    .map(|i| y[[i, c]].exp())
                    .collect();
                col_mean[c] = vals.iter().sum::<f64>() / vals.len() as f64;
            }
            let est: Vec<f64> = masked.iter().map(|&(i, c)| cell(i, c).mean_orig).collect();
            let base: Vec<f64> = masked.iter().map(|&(_, c)| col_mean[c]).collect();
            let tr: Vec<f64> = masked.iter().map(|&(i, c)| truth_orig[[i, c]]).collect();
            if let (Ok(m_rmse), Ok(b_rmse)) = (metrics::rmse(&est, &tr), metrics::rmse(&base, &tr))
            {
                out.interpolation.push(InterpolationRow {
                    replicate: rep,
                    model: kind.name().into(),
                    rmse: m_rmse,
                    baseline_rmse: b_rmse,
                    masked_cells: masked.len(),
                });
            }
        }
    }
    out
}

pub fn run_study(config: &SimulationConfig) -> Result<MetricsReport, StudyError> {
    config.validate()?;
    let truth = build_truth(config)?;
    let k = truth.theta.ncols();
    let mut timing: Vec<TimingRow> = Vec::new();
    let decoders = train_decoders(config, &truth.graph, k, &mut timing)?;

    let outcomes: Vec<ReplicateOutcome> = (0..config.n_replicates)
        .into_par_iter()
        .map(|rep| run_replicate(rep, config, &truth, &decoders))
        .collect();

    let mut replicates = Vec::new();
    let mut interpolation = Vec::new();
    let mut failures = Vec::new();
    let mut fit_seconds: Vec<(String, usize, f64)> = config
        .models
        .iter()
        .map(|m| (m.name().to_string(), 0usize, 0.0f64))
        .collect();
    for o in outcomes {
        replicates.extend(o.rows);
        interpolation.extend(o.interpolation);
        failures.extend(o.failures);
        for (name, secs) in o.timings {
            if let Some(t) = fit_seconds.iter_mut().find(|(n, _, _)| *n == name) {
                t.1 += 1;
                t.2 += secs;
            }
        }
    }
    for (name, fits, total) in fit_seconds {
        if fits > 0 {
            timing.push(TimingRow {
                model: name,
                fits,
                total_seconds: total,
                seconds_per_fit: total / fits as f64,
            });
        }
    }

    // aggregate in a fixed order: direct first, then the requested models;
    // responses in table order with the pooled "all" row last
    let mut model_names = vec!["direct".to_string()];
    model_names.extend(config.models.iter().map(|m| m.name().to_string()));
    let mut response_names = truth.response_names.clone();
    response_names.push("all".into());
    let mut aggregated = Vec::new();
    for model in &model_names {
        for response in &response_names {
            let rows: Vec<&ReplicateRow> = replicates
                .iter()
                .filter(|r| &r.model == model && &r.response == response)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let m = rows.len() as f64;
            aggregated.push(AggregateRow {
                model: model.clone(),
                response: response.clone(),
                rmse: rows.iter().map(|r| r.rmse).sum::<f64>() / m,
                interval_score: rows.iter().map(|r| r.interval_score).sum::<f64>() / m,
                coverage: rows.iter().map(|r| r.coverage).sum::<f64>() / m,
                replicates: rows.len(),
            });
        }
    }

    let mut interpolation_win_rate = Vec::new();
    for model in &model_names[1..] {
        let rows: Vec<&InterpolationRow> = interpolation
            .iter()
            .filter(|r| &r.model == model)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let wins = rows.iter().filter(|r| r.rmse < r.baseline_rmse).count();
        interpolation_win_rate.push(WinRateRow {
            model: model.clone(),
            win_rate: wins as f64 / rows.len() as f64,
            replicates: rows.len(),
        });
    }

    Ok(MetricsReport {
        aggregated,
        replicates,
        interpolation,
        interpolation_win_rate,
        failures,
        timing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SimulationConfig {
        SimulationConfig {
            truth: TruthSource::Synthetic(SyntheticTruth {
                rows: 3,
                cols: 3,
                k: 1,
                n_covariates: 1,
                beta: None,
                gamma_low: 0.3,
                gamma_high: 0.6,
                rho: 0.9,
                sigma2: 0.3,
                gmcar: None,
            }),
            n_replicates: 1,
            models: vec![ModelKind::Fh],
            missing_frac: 0.0,
            hmc: HmcConfig {
                n_iterations: 400,
                n_burnin: 200,
                n_chains: 2,
                max_leapfrog_steps: 16,
                ..HmcConfig::default()
            },
            vae: VaeConfig::default(),
            decoder_samples: 100,
            priors: Priors::default(),
            scalar_scale: false,
            seed: 7,
        }
    }

    #[test]
    fn noise_has_the_requested_scale() {
        let truth = Array2::from_elem((2, 2), 1.5);
        let gamma =
            Array2::from_shape_vec((2, 2), vec![0.7, 0.3, 1.2, 0.05]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reps = 10_000;
        let mut dev = Array2::<f64>::zeros((2, 2));
        for _ in 0..reps {
            let y = simulate_direct(&truth, &gamma, &mut rng);
            dev = dev + (&y - &truth).mapv(|v| v * v);
        }
        for idx in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let sd = (dev[idx] / reps as f64).sqrt();
            assert!(
                (sd - gamma[idx]).abs() / gamma[idx] < 0.03,
                "sd {} vs gamma {}",
                sd,
                gamma[idx]
            );
        }
    }

    #[test]
    fn vanishing_noise_returns_the_truth() {
        let truth = Array2::from_shape_vec((2, 1), vec![3.0, -1.0]).unwrap();
        let gamma = Array2::from_elem((2, 1), 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = simulate_direct(&truth, &gamma, &mut rng);
        for (a, b) in y.iter().zip(truth.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let truth = Array2::from_elem((3, 2), 0.5);
        let gamma = Array2::from_elem((3, 2), 0.4);
        let a = simulate_direct(&truth, &gamma, &mut ChaCha8Rng::seed_from_u64(9));
        let b = simulate_direct(&truth, &gamma, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn masking_never_empties_a_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let observed = mask_cells(5, 2, 0.95, &mut rng);
            for c in 0..2 {
                assert!((0..5).any(|i| observed[[i, c]]));
            }
        }
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let json = r#"{
            "truth": {"type": "synthetic", "rows": 3, "cols": 3, "k": 1},
            "n_replicates": 2,
            "models": ["fh", "vgms"]
        }"#;
        let cfg: SimulationConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.hmc.n_iterations, 20_000);
        assert_eq!(cfg.decoder_samples, 10_000);
        assert_eq!(cfg.models, vec![ModelKind::Fh, ModelKind::Vgms]);
        match cfg.truth {
            TruthSource::Synthetic(s) => {
                assert_eq!(s.n_covariates, 1);
                assert_eq!(s.gamma_low, 0.3);
            }
            _ => panic!("expected synthetic truth"),
        }
    }

    #[test]
    fn single_replicate_fh_study_produces_a_finite_report() {
        let report = run_study(&tiny_config()).unwrap();
        assert!(report.failures.is_empty(), "failures: {:?}", report.failures);
        // direct + fh, response r0 + all
        assert_eq!(report.aggregated.len(), 4);
        for row in &report.aggregated {
            assert!(row.rmse.is_finite() && row.rmse >= 0.0);
            assert!(row.interval_score.is_finite() && row.interval_score >= 0.0);
            assert!((0.0..=1.0).contains(&row.coverage));
        }
        let fh = report.aggregate("fh", "all").unwrap();
        let direct = report.aggregate("direct", "all").unwrap();
        assert!(fh.rmse > 0.0 && direct.rmse > 0.0);
        assert_eq!(report.timing.len(), 1);
        assert_eq!(report.timing[0].model, "fh");
        assert!(report.timing[0].total_seconds > 0.0);
    }

    #[test]
    fn fixed_seed_reports_are_bit_identical() {
        let mut cfg = tiny_config();
        cfg.n_replicates = 2;
        cfg.missing_frac = 0.2;
        let a = run_study(&cfg).unwrap();
        let b = run_study(&cfg).unwrap();
        assert_eq!(
            a.deterministic_json().unwrap(),
            b.deterministic_json().unwrap()
        );
        assert!(!a.interpolation.is_empty());
        assert_eq!(a.interpolation_win_rate.len(), 1);
    }
}
