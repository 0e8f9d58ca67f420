//! Exact sampling and log densities for the spatial priors, plus generation
//! and persistence of VAE training sets.
//!
//! Three priors are covered: the univariate CAR prior, the separable
//! matrix-normal prior with K CAR columns sharing one rho, and the two-response
//! GMCAR prior built from a marginal CAR draw and a conditional CAR draw
//! around a sparse bridge A = eta0 I + eta1 W. Sampling always goes through
//! the sparse precision Cholesky (solve Lq^T x = e); the dense inverse is
//! never formed.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::car::{factor_q, CarError};
use crate::dense;
use crate::graph::RegionGraph;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error(transparent)]
    Car(#[from] CarError),
    #[error("Sigma is not symmetric positive definite")]
    SigmaNotPd,
    #[error("phi has shape ({rows}, {cols}), expected ({want_rows}, {want_cols})")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("univariate layout requires K = 1, got {0}")]
    LayoutKMismatch(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training file is corrupt: {0}")]
    CorruptFile(String),
    #[error("training file version {0} is not supported")]
    VersionUnsupported(u32),
}

/// Draws from a CAR prior. Columns of `values` are independent draws; all
/// share `rho`.
#[derive(Debug, Clone)]
pub struct CarSample {
    pub values: Array2<f64>,
    pub rho: f64,
}

/// Samples `n_draws` vectors with covariance `sigma2 * Q(rho)^{-1}`.
pub fn sample_car<R: Rng + ?Sized>(
    graph: &RegionGraph,
    rho: f64,
    sigma2: f64,
    n_draws: usize,
    rng: &mut R,
) -> Result<CarSample, CarError> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(CarError::InvalidScale(sigma2));
    }
    let n = graph.n_regions();
    let factor = factor_q(graph, rho)?;
    let sigma = sigma2.sqrt();
    let mut values = Array2::<f64>::zeros((n, n_draws));
    let mut draw = vec![0.0; n];
    for j in 0..n_draws {
        factor.sample_standard(rng, &mut draw);
        for i in 0..n {
            values[[i, j]] = sigma * draw[i];
        }
    }
    Ok(CarSample { values, rho })
}

/// CAR log density: `-(N/2) log(2 pi sigma2) + 1/2 log det Q - x'Qx/(2 sigma2)`.
pub fn car_logpdf(
    graph: &RegionGraph,
    rho: f64,
    sigma2: f64,
    x: &[f64],
) -> Result<f64, CarError> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(CarError::InvalidScale(sigma2));
    }
    if x.len() != graph.n_regions() {
        return Err(CarError::LengthMismatch {
            got: x.len(),
            want: graph.n_regions(),
        });
    }
    let factor = factor_q(graph, rho)?;
    let n = graph.n_regions() as f64;
    let quad = graph.q_quad(rho, x);
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln() + 0.5 * factor.log_det()
        - quad / (2.0 * sigma2))
}

/// Draws from the separable matrix-normal prior: psi has K independent CAR
/// columns sharing one rho, and phi = psi L^T with Sigma = L L^T.
#[derive(Debug, Clone)]
pub struct SeparableSample {
    pub psi: Vec<Array2<f64>>,
    pub phi: Vec<Array2<f64>>,
    pub sigma: Array2<f64>,
    pub chol_l: Array2<f64>,
}

pub fn sample_separable<R: Rng + ?Sized>(
    graph: &RegionGraph,
    rho: f64,
    sigma: &Array2<f64>,
    n_draws: usize,
    rng: &mut R,
) -> Result<SeparableSample, PriorError> {
    let k = sigma.nrows();
    let l = dense::cholesky(sigma).ok_or(PriorError::SigmaNotPd)?;
    let n = graph.n_regions();
    let factor = factor_q(graph, rho)?;
    let mut psi_draws = Vec::with_capacity(n_draws);
    let mut phi_draws = Vec::with_capacity(n_draws);
    let mut col = vec![0.0; n];
    for _ in 0..n_draws {
        let mut psi = Array2::<f64>::zeros((n, k));
        for c in 0..k {
            factor.sample_standard(rng, &mut col);
            for i in 0..n {
                psi[[i, c]] = col[i];
            }
        }
        let phi = psi.dot(&l.t());
        psi_draws.push(psi);
        phi_draws.push(phi);
    }
    Ok(SeparableSample {
        psi: psi_draws,
        phi: phi_draws,
        sigma: sigma.clone(),
        chol_l: l,
    })
}

/// Matrix-normal log density of one separable draw phi (N rows = locations,
/// K columns = responses):
/// `-(NK/2) log 2pi - (N/2) log det Sigma + (K/2) log det Q - tr(Sigma^{-1} phi' Q phi)/2`.
pub fn separable_logpdf(
    graph: &RegionGraph,
    rho: f64,
    sigma: &Array2<f64>,
    phi: &Array2<f64>,
) -> Result<f64, PriorError> {
    let n = graph.n_regions();
    let k = sigma.nrows();
    if phi.nrows() != n || phi.ncols() != k {
        return Err(PriorError::ShapeMismatch {
            rows: phi.nrows(),
            cols: phi.ncols(),
            want_rows: n,
            want_cols: k,
        });
    }
    let l = dense::cholesky(sigma).ok_or(PriorError::SigmaNotPd)?;
    let factor = factor_q(graph, rho)?;
    // S = phi' Q phi via K sparse matvecs
    let mut s = Array2::<f64>::zeros((k, k));
    let mut qcol = vec![0.0; n];
    for a in 0..k {
        let col_a: Vec<f64> = phi.column(a).to_vec();
        graph.q_matvec(rho, &col_a, &mut qcol);
        for b in 0..k {
            s[[a, b]] = phi.column(b).iter().zip(qcol.iter()).map(|(p, q)| p * q).sum();
        }
    }
    let mut trace = 0.0;
    for b in 0..k {
        let col = Array1::from_iter(s.column(b).iter().copied());
        let solved = dense::spd_solve(&l, &col);
        trace += solved[b];
    }
    let logdet_sigma = dense::logdet_from_cholesky(&l);
    Ok(-0.5 * (n * k) as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * n as f64 * logdet_sigma
        + 0.5 * k as f64 * factor.log_det()
        - 0.5 * trace)
}

/// Parameters of the two-response GMCAR prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmcarParams {
    pub sigma2_1: f64,
    pub sigma2_2: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub eta0: f64,
    pub eta1: f64,
}

/// Draws from the GMCAR prior. Columns of `phi1`/`phi2` are paired draws.
#[derive(Debug, Clone)]
pub struct GmcarSample {
    pub phi1: Array2<f64>,
    pub phi2: Array2<f64>,
    pub params: GmcarParams,
}

/// Applies the bridge A = eta0 I + eta1 W: one sparse matvec plus a scaled
/// copy.
pub fn bridge_apply(graph: &RegionGraph, eta0: f64, eta1: f64, x: &[f64], out: &mut [f64]) {
    graph.w_matvec(x, out);
    for i in 0..x.len() {
        out[i] = eta0 * x[i] + eta1 * out[i];
    }
}

pub fn sample_gmcar<R: Rng + ?Sized>(
    graph: &RegionGraph,
    params: &GmcarParams,
    n_draws: usize,
    rng: &mut R,
) -> Result<GmcarSample, CarError> {
    let n = graph.n_regions();
    let marginal = sample_car(graph, params.rho2, params.sigma2_2, n_draws, rng)?;
    let noise = sample_car(graph, params.rho1, params.sigma2_1, n_draws, rng)?;
    let mut phi1 = Array2::<f64>::zeros((n, n_draws));
    let mut bridged = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n_draws {
        for i in 0..n {
            col[i] = marginal.values[[i, j]];
        }
        bridge_apply(graph, params.eta0, params.eta1, &col, &mut bridged);
        for i in 0..n {
            phi1[[i, j]] = bridged[i] + noise.values[[i, j]];
        }
    }
    Ok(GmcarSample {
        phi1,
        phi2: marginal.values,
        params: *params,
    })
}

/// GMCAR log density: marginal CAR term for phi2 plus conditional CAR term
/// for the residual phi1 - A phi2.
pub fn gmcar_logpdf(
    graph: &RegionGraph,
    params: &GmcarParams,
    phi1: &[f64],
    phi2: &[f64],
) -> Result<f64, CarError> {
    let n = graph.n_regions();
    if phi1.len() != n || phi2.len() != n {
        return Err(CarError::LengthMismatch {
            got: phi1.len().max(phi2.len()),
            want: n,
        });
    }
    let mut resid = vec![0.0; n];
    bridge_apply(graph, params.eta0, params.eta1, phi2, &mut resid);
    for i in 0..n {
        resid[i] = phi1[i] - resid[i];
    }
    let marginal = car_logpdf(graph, params.rho2, params.sigma2_2, phi2)?;
    let conditional = car_logpdf(graph, params.rho1, params.sigma2_1, &resid)?;
    Ok(marginal + conditional)
}

/// Row layout of a VAE training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Rows are single CAR draws of length N.
    UnivariateN,
    /// Rows stack K independent CAR columns sharing one rho: length N*K.
    VectorizedNk,
}

impl Layout {
    fn tag(self) -> u8 {
        match self {
            Layout::UnivariateN => 0,
            Layout::VectorizedNk => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Layout::UnivariateN),
            1 => Some(Layout::VectorizedNk),
            _ => None,
        }
    }
}

/// Prior draws used to train a VAE decoder: one row per sample, with the
/// Unif(0,1) rho used for each row recorded alongside.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub layout: Layout,
    pub n_regions: usize,
    pub k: usize,
    pub samples: Array2<f64>,
    pub rhos: Vec<f64>,
}

/// Sidecar metadata persisted next to a training-set file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingMeta {
    pub graph_hash: String,
    pub seed: u64,
}

impl TrainingSet {
    pub fn dim(&self) -> usize {
        self.n_regions * self.k
    }

    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }
}

/// Generates a training set: per sample draw rho ~ Unif(0,1), then one CAR
/// draw per column with sigma2 = 1. The scale is excluded on purpose; it
/// re-enters through the model's own scale parameters at fit time.
pub fn generate_training_set<R: Rng + ?Sized>(
    graph: &RegionGraph,
    n_samples: usize,
    layout: Layout,
    k: usize,
    rng: &mut R,
) -> Result<TrainingSet, PriorError> {
    if layout == Layout::UnivariateN && k != 1 {
        return Err(PriorError::LayoutKMismatch(k));
    }
    let n = graph.n_regions();
    let dim = n * k;
    let mut samples = Array2::<f64>::zeros((n_samples, dim));
    let mut rhos = Vec::with_capacity(n_samples);
    let mut draw = vec![0.0; n];
    for s in 0..n_samples {
        let rho: f64 = rng.random::<f64>();
        let factor = factor_q(graph, rho)?;
        for c in 0..k {
            factor.sample_standard(rng, &mut draw);
            for i in 0..n {
                samples[[s, c * n + i]] = draw[i];
            }
        }
        rhos.push(rho);
    }
    Ok(TrainingSet {
        layout,
        n_regions: n,
        k,
        samples,
        rhos,
    })
}

const TRAINING_MAGIC: &[u8; 8] = b"SAETRAIN";
const TRAINING_VERSION: u32 = 1;

/// Writes the binary training file and its JSON metadata sidecar
/// (`<path>.meta.json`).
pub fn save_training_set(
    set: &TrainingSet,
    meta: &TrainingMeta,
    path: &Path,
) -> Result<(), PriorError> {
    let mut buf = Vec::with_capacity(32 + 8 * set.samples.len() + 8 * set.rhos.len());
    buf.extend_from_slice(TRAINING_MAGIC);
    buf.extend_from_slice(&TRAINING_VERSION.to_le_bytes());
    buf.push(set.layout.tag());
    buf.extend_from_slice(&(set.n_regions as u32).to_le_bytes());
    buf.extend_from_slice(&(set.k as u32).to_le_bytes());
    buf.extend_from_slice(&(set.n_samples() as u64).to_le_bytes());
    for row in set.samples.rows() {
        for &v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &rho in &set.rhos {
        buf.extend_from_slice(&rho.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    let sidecar = path_with_meta_suffix(path);
    let json = serde_json::to_string_pretty(meta).expect("metadata serializes");
    std::fs::write(sidecar, json)?;
    Ok(())
}

/// Reads a training file written by [`save_training_set`], with its sidecar.
pub fn load_training_set(path: &Path) -> Result<(TrainingSet, TrainingMeta), PriorError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, len: usize| -> Result<&[u8], PriorError> {
        if *cursor + len > bytes.len() {
            return Err(PriorError::CorruptFile(format!(
                "unexpected end of file at byte {cursor} (need {len} more)",
                cursor = *cursor
            )));
        }
        let out = &bytes[*cursor..*cursor + len];
        *cursor += len;
        Ok(out)
    };
    if take(&mut cursor, 8)? != TRAINING_MAGIC {
        return Err(PriorError::CorruptFile("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != TRAINING_VERSION {
        return Err(PriorError::VersionUnsupported(version));
    }
    let layout = Layout::from_tag(take(&mut cursor, 1)?[0])
        .ok_or_else(|| PriorError::CorruptFile("unknown layout tag".into()))?;
    let n_regions = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let n_samples = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    let dim = n_regions * k;
    let mut samples = Array2::<f64>::zeros((n_samples, dim));
    for s in 0..n_samples {
        for d in 0..dim {
            samples[[s, d]] = f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
        }
    }
    let mut rhos = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        rhos.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
    }
    if cursor != bytes.len() {
        return Err(PriorError::CorruptFile(format!(
            "{} trailing bytes",
            bytes.len() - cursor
        )));
    }
    let sidecar = path_with_meta_suffix(path);
    let meta: TrainingMeta = serde_json::from_str(&std::fs::read_to_string(sidecar)?)
        .map_err(|e| PriorError::CorruptFile(format!("sidecar: {e}")))?;
    Ok((
        TrainingSet {
            layout,
            n_regions,
            k,
            samples,
            rhos,
        },
        meta,
    ))
}

fn path_with_meta_suffix(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}
