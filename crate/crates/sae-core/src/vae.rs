//! Beta-VAE training on spatial-prior draws, and the frozen decoder artifact
//! that later stands in for the prior generator inside posterior sampling.
//!
//! The architecture follows a fixed dimension rule: one hidden layer whose
//! width equals the input dimension, and a latent layer of the same size, so
//! input_dim = hidden_dim = latent_dim = J. The KL weight is alpha = 1/J.
//! Hidden activations are ELU; the decoder output layer is linear because
//! the emulated spatial factor is unbounded. The reconstruction likelihood
//! is Gaussian with identity covariance.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use base64::Engine as _;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ExprGraph, ExprId};
use crate::dense::symmetric_eigh;
use crate::priors::{Layout, TrainingSet};
use crate::util::derive_seed;

/// logvar is clamped to this magnitude before exponentiation when sampling,
/// preventing overflow in exp(logvar/2).
pub const LOGVAR_CLAMP: f64 = 30.0;

/// Window length of the moving-average ELBO used for early stopping.
pub const ELBO_MA_WINDOW: usize = 20;

const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("training set dim {got} does not match model input dim {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("batch has {got} columns, expected {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: elbo = {value}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },
    #[error("internal expression graph error: {0}")]
    Graph(#[from] crate::autodiff::AdError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("decoder artifact is corrupt: {0}")]
    CorruptFile(String),
    #[error("decoder artifact version {0} is not supported")]
    VersionUnsupported(u32),
}

/// Encoder and decoder weights of the beta-VAE.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub input_dim: usize,
    pub alpha: f64,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub wmu: Array2<f64>,
    pub bmu: Array1<f64>,
    pub wsig: Array2<f64>,
    pub bsig: Array1<f64>,
    pub dw1: Array2<f64>,
    pub db1: Array1<f64>,
    pub dwout: Array2<f64>,
    pub dbout: Array1<f64>,
}

/// Per-epoch objective trace: elbo = recon - alpha * kl at every epoch,
/// evaluated on the full training set with one fixed noise draw so that
/// epoch-to-epoch movement reflects the weights, not fresh Monte Carlo noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElboTrace {
    pub elbo: Vec<f64>,
    pub kl: Vec<f64>,
    pub recon: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub patience: usize,
    pub mc_samples: usize,
    /// Replace the passed-in weights with the closed-form linear-autoencoder
    /// optimum computed from the training set before the first epoch (see
    /// [`warm_start`]). Gradient ascent then refines that point instead of
    /// crossing the whole loss landscape from a random init.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            epochs: 500,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            patience: 25,
            mc_samples: 1,
            warm_start: true,
            seed: 0,
        }
    }
}

fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Fresh model with symmetric-uniform fan-scaled weights, zero biases, and
/// alpha = 1/input_dim.
pub fn init_vae(input_dim: usize, seed: u64) -> VaeModel {
    assert!(input_dim >= 1, "input_dim must be at least 1");
    let j = input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VaeModel {
        input_dim,
        alpha: 1.0 / j as f64,
        w1: glorot_uniform(j, j, &mut rng),
        b1: Array1::zeros(j),
        wmu: glorot_uniform(j, j, &mut rng),
        bmu: Array1::zeros(j),
        wsig: glorot_uniform(j, j, &mut rng),
        bsig: Array1::zeros(j),
        dw1: glorot_uniform(j, j, &mut rng),
        db1: Array1::zeros(j),
        dwout: glorot_uniform(j, j, &mut rng),
        dbout: Array1::zeros(j),
    }
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = x.dot(w);
    for mut row in out.rows_mut() {
        for (o, &bv) in row.iter_mut().zip(b.iter()) {
            *o += bv;
        }
    }
    out
}

fn elu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| if v >= 0.0 { v } else { v.exp() - 1.0 });
}

/// Shared decoder arithmetic; [`VaeModel::decode`] and
/// [`DecoderArtifact::decode`] both route through this so a round-tripped
/// artifact is bit-identical to the in-memory model.
fn decode_with(
    z: &Array2<f64>,
    dw1: &Array2<f64>,
    db1: &Array1<f64>,
    dwout: &Array2<f64>,
    dbout: &Array1<f64>,
) -> Array2<f64> {
    let mut h = affine(z, dw1, db1);
    elu_inplace(&mut h);
    affine(&h, dwout, dbout)
}

impl VaeModel {
    /// Encoder pass: mu and raw (unclamped) logvar heads.
    pub fn encode(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>), VaeError> {
        if x.ncols() != self.input_dim {
            return Err(VaeError::ShapeMismatch {
                got: x.ncols(),
                want: self.input_dim,
            });
        }
        let mut h = affine(x, &self.w1, &self.b1);
        elu_inplace(&mut h);
        let mu = affine(&h, &self.wmu, &self.bmu);
        let logvar = affine(&h, &self.wsig, &self.bsig);
        Ok((mu, logvar))
    }

    /// Decoder pass.
    pub fn decode(&self, z: &Array2<f64>) -> Result<Array2<f64>, VaeError> {
        if z.ncols() != self.input_dim {
            return Err(VaeError::ShapeMismatch {
                got: z.ncols(),
                want: self.input_dim,
            });
        }
        Ok(decode_with(z, &self.dw1, &self.db1, &self.dwout, &self.dbout))
    }
}

/// z = mu + exp(logvar/2) * eps with logvar clamped to +-LOGVAR_CLAMP.
pub fn reparameterize<R: Rng + ?Sized>(
    mu: &Array2<f64>,
    logvar: &Array2<f64>,
    rng: &mut R,
) -> Array2<f64> {
    let mut z = mu.clone();
    for (zv, &lv) in z.iter_mut().zip(logvar.iter()) {
        let clamped = lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
        let eps: f64 = rng.sample(StandardNormal);
        *zv += (0.5 * clamped).exp() * eps;
    }
    z
}

/// Closed-form KL penalty of the encoder posterior against N(0, I), summed
/// over latent coordinates: 1/2 sum(mu^2 + sigma^2 - 1 - logvar) per row.
fn kl_penalty_sum(mu: &Array2<f64>, logvar: &Array2<f64>) -> f64 {
    mu.iter()
        .zip(logvar.iter())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Monte Carlo ELBO of one batch: returns batch-mean (elbo, kl penalty,
/// reconstruction). The KL term is closed form; the reconstruction term uses
/// `l` noise draws (default 1) through the reparameterization.
pub fn elbo<R: Rng + ?Sized>(
    model: &VaeModel,
    batch: &Array2<f64>,
    rng: &mut R,
    l: usize,
) -> Result<(f64, f64, f64), VaeError> {
    let m = batch.nrows() as f64;
    let dim = model.input_dim as f64;
    let (mu, logvar) = model.encode(batch)?;
    let kl = kl_penalty_sum(&mu, &logvar) / m;
    let mut recon_acc = 0.0;
    for _ in 0..l.max(1) {
        let z = reparameterize(&mu, &logvar, rng);
        let xhat = model.decode(&z)?;
        let sq: f64 = batch
            .iter()
            .zip(xhat.iter())
            .map(|(&x, &xh)| (x - xh) * (x - xh))
            .sum();
        recon_acc += -0.5 * sq - batch.nrows() as f64 * 0.5 * dim * (2.0 * std::f64::consts::PI).ln();
    }
    let recon = recon_acc / (l.max(1) as f64 * m);
    Ok((recon - model.alpha * kl, kl, recon))
}

/// Node handles of the training objective graph. `neg_kl_sum` and
/// `recon_total` are ancestors of `elbo_mean`, so one forward pass from the
/// objective yields all three.
struct ElboGraph {
    graph: ExprGraph,
    batch: usize,
    elbo_mean: ExprId,
    neg_kl_sum: ExprId,
    recon_total: ExprId,
}

const WEIGHT_NAMES: [&str; 10] = [
    "w1", "b1", "wmu", "bmu", "wsig", "bsig", "dw1", "db1", "dwout", "dbout",
];

/// Builds the batch ELBO as an expression over inputs "x", "eps0".."eps{L-1}"
/// and the ten weight tensors. Biases enter as (1, J) rows.
fn build_elbo_graph(j: usize, batch: usize, l: usize, alpha: f64) -> ElboGraph {
    let mut g = ExprGraph::new();
    let x = g.input("x", batch, j).unwrap();
    let w1 = g.input("w1", j, j).unwrap();
    let b1 = g.input("b1", 1, j).unwrap();
    let wmu = g.input("wmu", j, j).unwrap();
    let bmu = g.input("bmu", 1, j).unwrap();
    let wsig = g.input("wsig", j, j).unwrap();
    let bsig = g.input("bsig", 1, j).unwrap();
    let dw1 = g.input("dw1", j, j).unwrap();
    let db1 = g.input("db1", 1, j).unwrap();
    let dwout = g.input("dwout", j, j).unwrap();
    let dbout = g.input("dbout", 1, j).unwrap();

    let h_lin = g.matmul(x, w1).unwrap();
    let h_aff = g.row_broadcast_add(h_lin, b1).unwrap();
    let h = g.elu(h_aff);
    let mu_lin = g.matmul(h, wmu).unwrap();
    let mu = g.row_broadcast_add(mu_lin, bmu).unwrap();
    let lv_lin = g.matmul(h, wsig).unwrap();
    let lv = g.row_broadcast_add(lv_lin, bsig).unwrap();

    let half_lv = g.scalar_mul(lv, 0.5);
    let std = g.exp(half_lv);

    // reconstruction: average of l Monte Carlo draws
    let mut recon_sums = Vec::with_capacity(l);
    for draw in 0..l {
        let eps = g.input(&format!("eps{draw}"), batch, j).unwrap();
        let noise = g.mul(std, eps).unwrap();
        let z = g.add(mu, noise).unwrap();
        let hd_lin = g.matmul(z, dw1).unwrap();
        let hd_aff = g.row_broadcast_add(hd_lin, db1).unwrap();
        let hd = g.elu(hd_aff);
        let out_lin = g.matmul(hd, dwout).unwrap();
        let xhat = g.row_broadcast_add(out_lin, dbout).unwrap();
        let resid = g.sub(x, xhat).unwrap();
        let sq = g.square(resid);
        let sum_sq = g.sum(sq);
        recon_sums.push(g.scalar_mul(sum_sq, -0.5));
    }
    let mut recon_sum = recon_sums[0];
    for &r in &recon_sums[1..] {
        recon_sum = g.add(recon_sum, r).unwrap();
    }
    let recon_avg = g.scalar_mul(recon_sum, 1.0 / l as f64);
    let log2pi_term = g.scalar_constant(
        -(batch as f64) * 0.5 * (j as f64) * (2.0 * std::f64::consts::PI).ln(),
    );
    let recon_total = g.add(recon_avg, log2pi_term).unwrap();

    // closed-form negative KL: 1/2 sum(1 + logvar - mu^2 - exp(logvar))
    let ones = g.constant(Array2::from_elem((batch, j), 1.0));
    let t1 = g.add(ones, lv).unwrap();
    let mu_sq = g.square(mu);
    let t2 = g.sub(t1, mu_sq).unwrap();
    let var = g.exp(lv);
    let t3 = g.sub(t2, var).unwrap();
    let t3_sum = g.sum(t3);
    let neg_kl_sum = g.scalar_mul(t3_sum, 0.5);

    let weighted_neg_kl = g.scalar_mul(neg_kl_sum, alpha);
    let elbo_sum = g.add(recon_total, weighted_neg_kl).unwrap();
    let elbo_mean = g.scalar_mul(elbo_sum, 1.0 / batch as f64);
    ElboGraph {
        graph: g,
        batch,
        elbo_mean,
        neg_kl_sum,
        recon_total,
    }
}

fn weight_bindings(model: &VaeModel, bindings: &mut HashMap<String, Array2<f64>>) {
    let as_row = |b: &Array1<f64>| b.clone().insert_axis(Axis(0));
    bindings.insert("w1".into(), model.w1.clone());
    bindings.insert("b1".into(), as_row(&model.b1));
    bindings.insert("wmu".into(), model.wmu.clone());
    bindings.insert("bmu".into(), as_row(&model.bmu));
    bindings.insert("wsig".into(), model.wsig.clone());
    bindings.insert("bsig".into(), as_row(&model.bsig));
    bindings.insert("dw1".into(), model.dw1.clone());
    bindings.insert("db1".into(), as_row(&model.db1));
    bindings.insert("dwout".into(), model.dwout.clone());
    bindings.insert("dbout".into(), as_row(&model.dbout));
}

/// Adam state for one weight tensor, updating by gradient ascent.
struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
}

struct Adam {
    states: HashMap<String, AdamState>,
    t: usize,
}

impl Adam {
    fn new() -> Self {
        Adam {
            states: HashMap::new(),
            t: 0,
        }
    }

    fn step(
        &mut self,
        cfg: &VaeConfig,
        grads: &HashMap<String, Array2<f64>>,
        weights: &mut HashMap<String, Array2<f64>>,
    ) {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for &name in WEIGHT_NAMES.iter() {
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            let w = weights.get_mut(name).expect("weight bound");
            let state = self.states.entry(name.to_string()).or_insert_with(|| AdamState {
                m: Array2::zeros(g.dim()),
                v: Array2::zeros(g.dim()),
            });
            for ((wv, (mv, vv)), &gv) in w
                .iter_mut()
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
                .zip(g.iter())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *wv += cfg.learning_rate * mhat / (vhat.sqrt() + 1e-8);
            }
        }
    }
}

fn model_from_bindings(template: &VaeModel, weights: &HashMap<String, Array2<f64>>) -> VaeModel {
    let row = |name: &str| -> Array1<f64> { weights[name].row(0).to_owned() };
    VaeModel {
        input_dim: template.input_dim,
        alpha: template.alpha,
        w1: weights["w1"].clone(),
        b1: row("b1"),
        wmu: weights["wmu"].clone(),
        bmu: row("bmu"),
        wsig: weights["wsig"].clone(),
        bsig: row("bsig"),
        dw1: weights["dw1"].clone(),
        db1: row("db1"),
        dwout: weights["dwout"].clone(),
        dbout: row("dbout"),
    }
}

/// Evaluates the full-set ELBO triple with a fixed noise matrix, in chunks.
fn trace_elbo(
    graphs: &mut HashMap<usize, ElboGraph>,
    j: usize,
    alpha: f64,
    weights: &HashMap<String, Array2<f64>>,
    samples: &Array2<f64>,
    fixed_eps: &Array2<f64>,
) -> Result<(f64, f64, f64), VaeError> {
    const CHUNK: usize = 2048;
    let n = samples.nrows();
    let mut sums = (0.0, 0.0, 0.0);
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let eg = graphs
            .entry(len)
            .or_insert_with(|| build_elbo_graph(j, len, 1, alpha));
        let mut bindings = weights.clone();
        bindings.insert(
            "x".into(),
            samples.slice(ndarray::s![start..start + len, ..]).to_owned(),
        );
        bindings.insert(
            "eps0".into(),
            fixed_eps.slice(ndarray::s![start..start + len, ..]).to_owned(),
        );
        let pass = eg.graph.forward(eg.elbo_mean, &bindings)?;
        let w = len as f64;
        let m = eg.batch as f64;
        sums.0 += w * pass.value(eg.elbo_mean)?[[0, 0]];
        sums.1 += w * (-pass.value(eg.neg_kl_sum)?[[0, 0]] / m);
        sums.2 += w * (pass.value(eg.recon_total)?[[0, 0]] / m);
        start += len;
    }
    let n = n as f64;
    Ok((sums.0 / n, sums.1 / n, sums.2 / n))
}

fn moving_average(values: &[f64], window: usize) -> f64 {
    let len = values.len().min(window);
    values[values.len() - len..].iter().sum::<f64>() / len as f64
}

/// Closed-form warm start: places the encoder/decoder pair at the ELBO
/// optimum of the linear analogue of this VAE, computed from the
/// training-set principal components.
///
/// For centered data with covariance eigenpairs `(lambda_i, v_i)` and KL
/// weight `alpha`, the linear network that maximizes the same objective
/// encodes along `v_i` with scale `(1 - alpha/lambda_i) / sqrt(lambda_i -
/// alpha)`, decodes with scale `sqrt(lambda_i - alpha)`, and holds the
/// posterior variance at `alpha / lambda_i`; every aggregate-posterior
/// coordinate then has mean zero and second moment one, and the decoder
/// pushes standard-normal latents to the training mean and covariance up to
/// the `alpha`-shrinkage. Directions with `lambda_i <= alpha` carry less
/// signal than their KL cost and stay at the latent prior. Both hidden ELU
/// layers receive a positive offset large enough to keep every training
/// point inside the activation's identity region, so the assembled network
/// realizes the linear map exactly while gradient ascent stays free to bend
/// it afterwards.
///
/// Only `model.input_dim` and `model.alpha` are read from the template; the
/// returned weights do not depend on its random initialization.
pub fn warm_start(model: &VaeModel, set: &TrainingSet) -> VaeModel {
    let j = model.input_dim;
    let n = set.n_samples();
    if n < 2 || set.dim() != j {
        return model.clone();
    }
    let alpha = model.alpha;
    let mean = set.samples.mean_axis(Axis(0)).expect("non-empty training set");
    let centered = &set.samples - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let (vals, vecs) = symmetric_eigh(&cov);

    let mut enc_scale = Array1::<f64>::zeros(j);
    let mut dec_scale = Array1::<f64>::zeros(j);
    let mut logvar = Array1::<f64>::zeros(j);
    for i in 0..j {
        let lambda = vals[i];
        if lambda > alpha * (1.0 + 1e-9) {
            let b = (lambda - alpha).sqrt();
            enc_scale[i] = (1.0 - alpha / lambda) / b;
            dec_scale[i] = b;
            logvar[i] = (alpha / lambda).ln();
        }
    }

    // Each stack passes its input through the hidden ELU layer as s*x + c,
    // undone by dividing the head weights by s. The offset c must clear the
    // whole input range (the latent projections of spatial-prior draws are
    // heavy-tailed, so the ranges are measured, not assumed Gaussian), and
    // the scale s balances the curvature the optimizer sees between the two
    // layers: a plain identity pass-through parks the hidden units at the
    // offset value, whose squared magnitude multiplies the head-layer
    // curvature and makes the first noisy optimizer steps crater the
    // objective.
    let max_abs = set.samples.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    let enc_cover = 1.25 * max_abs.max(1.0);
    let mean_sq = set.samples.iter().map(|v| v * v).sum::<f64>() / (n * j) as f64;

    let ones = Array1::<f64>::from_elem(j, 1.0);
    let wmu_core = vecs.dot(&Array2::from_diag(&enc_scale));
    let dwout_core = Array2::from_diag(&dec_scale).dot(&vecs.t());
    let mu = centered.dot(&wmu_core);
    let max_abs_mu = mu.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    let z_cover = 6.0 + 1.25 * max_abs_mu;

    let enc_weight = enc_scale.iter().map(|v| v * v).sum::<f64>();
    let dec_weight = dec_scale.iter().map(|v| v * v).sum::<f64>();
    let s_e = balance_scale(mean_sq, enc_weight, j, enc_cover);
    let s_d = balance_scale(1.0, dec_weight, j, z_cover);

    // the head biases see the hidden offset divided by s, which is the
    // cover itself; they subtract it along with the data mean
    let bmu = -((&mean + &(&ones * enc_cover)).dot(&wmu_core));
    let dbout = &mean - &(&ones * z_cover).dot(&dwout_core);

    VaeModel {
        input_dim: j,
        alpha,
        w1: Array2::eye(j) * s_e,
        b1: Array1::from_elem(j, s_e * enc_cover),
        wmu: wmu_core / s_e,
        bmu,
        wsig: Array2::zeros((j, j)),
        bsig: logvar,
        dw1: Array2::eye(j) * s_d,
        db1: Array1::from_elem(j, s_d * z_cover),
        dwout: dwout_core / s_d,
        dbout,
    }
}

/// Pass-through scale that equalizes the optimizer-visible curvature between
/// the identity layer (input second moment `p`, head weight mass
/// `weight_sum` divided by s^2) and the head layer (hidden second moment
/// `(s*cover)^2 + s^2*p`): the balance point is
/// s^4 = p * weight_sum / (j * (cover^2 + p)).
fn balance_scale(p: f64, weight_sum: f64, j: usize, cover: f64) -> f64 {
    let s4 = p * weight_sum / (j as f64 * (cover * cover + p));
    if !s4.is_finite() || s4 <= 0.0 {
        return 1.0;
    }
    s4.powf(0.25).clamp(1e-3, 1.0)
}

/// Trains the model by Adam gradient ascent on the batch ELBO.
///
/// With `cfg.warm_start` (the default) the passed-in weights are first
/// replaced by the closed-form linear-autoencoder optimum for this training
/// set, so the epochs refine an already-consistent generator; see
/// [`warm_start`]. Mini-batches are reshuffled every epoch. After each epoch
/// the full training set's ELBO is evaluated with one fixed noise draw; the
/// weights at the best such ELBO are returned, with the starting weights
/// evaluated once as the first candidate, and training stops early when the
/// 20-epoch moving average has not improved for `patience` epochs.
pub fn train(
    model: VaeModel,
    set: &TrainingSet,
    cfg: &VaeConfig,
) -> Result<(VaeModel, ElboTrace), VaeError> {
    if set.dim() != model.input_dim {
        return Err(VaeError::DimMismatch {
            got: set.dim(),
            want: model.input_dim,
        });
    }
    let model = if cfg.warm_start {
        warm_start(&model, set)
    } else {
        model
    };
    let j = model.input_dim;
    let n = set.n_samples();
    let l = cfg.mc_samples.max(1);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut trace_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let fixed_eps = Array2::from_shape_fn((n, j), |_| trace_rng.sample::<f64, _>(StandardNormal));

    let mut graphs: HashMap<usize, ElboGraph> = HashMap::new();
    let mut trace_graphs: HashMap<usize, ElboGraph> = HashMap::new();
    let mut weights = HashMap::new();
    weight_bindings(&model, &mut weights);
    let mut adam = Adam::new();

    let mut trace = ElboTrace {
        elbo: Vec::new(),
        kl: Vec::new(),
        recon: Vec::new(),
    };
    // the starting weights compete for the returned snapshot: a run whose
    // epochs never beat the initial objective hands back the start untouched
    let (start_elbo, _, _) = trace_elbo(
        &mut trace_graphs,
        j,
        model.alpha,
        &weights,
        &set.samples,
        &fixed_eps,
    )?;
    let mut best_elbo = start_elbo;
    let mut best_weights = weights.clone();
    let mut best_ma = f64::NEG_INFINITY;
    let mut stale = 0usize;

    let mut indices: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        // Fisher-Yates with the dedicated shuffle stream
        for i in (1..indices.len()).rev() {
            let pick = shuffle_rng.random_range(0..=i);
            indices.swap(i, pick);
        }
        let mut batch_index = 0usize;
        let mut start = 0usize;
        while start < n {
            let len = cfg.batch_size.min(n - start);
            let eg = graphs
                .entry(len)
                .or_insert_with(|| build_elbo_graph(j, len, l, model.alpha));
            let mut x = Array2::<f64>::zeros((len, j));
            for (row, &src) in indices[start..start + len].iter().enumerate() {
                x.row_mut(row).assign(&set.samples.row(src));
            }
            let mut bindings = weights.clone();
            bindings.insert("x".into(), x);
            for draw in 0..l {
                let eps =
                    Array2::from_shape_fn((len, j), |_| noise_rng.sample::<f64, _>(StandardNormal));
                bindings.insert(format!("eps{draw}"), eps);
            }
            let result = eg.graph.gradient(eg.elbo_mean, &bindings)?;
            if !result.value.is_finite() {
                return Err(VaeError::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                    value: result.value,
                });
            }
            adam.step(cfg, &result.grads, &mut weights);
            start += len;
            batch_index += 1;
        }

        let (e, kl, recon) = trace_elbo(
            &mut trace_graphs,
            j,
            model.alpha,
            &weights,
            &set.samples,
            &fixed_eps,
        )?;
        trace.elbo.push(e);
        trace.kl.push(kl);
        trace.recon.push(recon);
        if e > best_elbo {
            best_elbo = e;
            best_weights = weights.clone();
        }
        let ma = moving_average(&trace.elbo, ELBO_MA_WINDOW);
        if ma > best_ma {
            best_ma = ma;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((model_from_bindings(&model, &best_weights), trace))
}

/// Frozen decoder with the provenance needed to refuse mismatched reuse.
#[derive(Debug, Clone)]
pub struct DecoderArtifact {
    pub version: u32,
    pub latent_dim: usize,
    pub output_dim: usize,
    pub layout: Layout,
    pub graph_hash: String,
    pub seed: u64,
    pub n_samples: usize,
    pub final_elbo: f64,
    pub dw1: Array2<f64>,
    pub db1: Array1<f64>,
    pub dwout: Array2<f64>,
    pub dbout: Array1<f64>,
}

impl DecoderArtifact {
    pub fn decode(&self, z: &Array2<f64>) -> Result<Array2<f64>, VaeError> {
        if z.ncols() != self.latent_dim {
            return Err(VaeError::ShapeMismatch {
                got: z.ncols(),
                want: self.latent_dim,
            });
        }
        Ok(decode_with(z, &self.dw1, &self.db1, &self.dwout, &self.dbout))
    }

    /// Builds the artifact from a trained model plus provenance metadata.
    pub fn from_model(model: &VaeModel, meta: DecoderMeta) -> Self {
        DecoderArtifact {
            version: ARTIFACT_VERSION,
            latent_dim: model.input_dim,
            output_dim: model.input_dim,
            layout: meta.layout,
            graph_hash: meta.graph_hash,
            seed: meta.seed,
            n_samples: meta.n_samples,
            final_elbo: meta.final_elbo,
            dw1: model.dw1.clone(),
            db1: model.db1.clone(),
            dwout: model.dwout.clone(),
            dbout: model.dbout.clone(),
        }
    }
}

/// Provenance recorded inside a decoder artifact.
#[derive(Debug, Clone)]
pub struct DecoderMeta {
    pub layout: Layout,
    pub graph_hash: String,
    pub seed: u64,
    pub n_samples: usize,
    pub final_elbo: f64,
}

#[derive(Serialize, Deserialize)]
struct ArtifactFile {
    version: u32,
    latent_dim: usize,
    output_dim: usize,
    layout: Layout,
    graph_hash: String,
    seed: u64,
    n_samples: usize,
    final_elbo: f64,
    weights_b64: String,
    crc32: u32,
}

fn pack_weights(a: &DecoderArtifact) -> Vec<u8> {
    let mut blob = Vec::with_capacity(
        8 * (a.dw1.len() + a.db1.len() + a.dwout.len() + a.dbout.len()),
    );
    for &v in a.dw1.iter().chain(a.dwout.iter()) {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    for &v in a.db1.iter().chain(a.dbout.iter()) {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    blob
}

/// Writes the artifact as a single JSON file with a base64 weight blob and
/// CRC-32 checksum.
pub fn save_decoder(artifact: &DecoderArtifact, path: &Path) -> Result<(), VaeError> {
    let blob = pack_weights(artifact);
    let file = ArtifactFile {
        version: artifact.version,
        latent_dim: artifact.latent_dim,
        output_dim: artifact.output_dim,
        layout: artifact.layout,
        graph_hash: artifact.graph_hash.clone(),
        seed: artifact.seed,
        n_samples: artifact.n_samples,
        final_elbo: artifact.final_elbo,
        weights_b64: base64::engine::general_purpose::STANDARD.encode(&blob),
        crc32: crc32fast::hash(&blob),
    };
    let json = serde_json::to_string_pretty(&file).expect("artifact serializes");
    let mut f = std::fs::File::create(path)?;
    f.write_all(json.as_bytes())?;
    Ok(())
}

pub fn load_decoder(path: &Path) -> Result<DecoderArtifact, VaeError> {
    let text = std::fs::read_to_string(path)?;
    let file: ArtifactFile =
        serde_json::from_str(&text).map_err(|e| VaeError::CorruptFile(e.to_string()))?;
    if file.version != ARTIFACT_VERSION {
        return Err(VaeError::VersionUnsupported(file.version));
    }
    let blob = base64::engine::general_purpose::STANDARD
        .decode(&file.weights_b64)
        .map_err(|e| VaeError::CorruptFile(format!("base64: {e}")))?;
    if crc32fast::hash(&blob) != file.crc32 {
        return Err(VaeError::CorruptFile("checksum mismatch".into()));
    }
    let j = file.latent_dim;
    let d = file.output_dim;
    let want = 8 * (j * j + j * d + j + d);
    if blob.len() != want {
        return Err(VaeError::CorruptFile(format!(
            "weight blob has {} bytes, expected {want}",
            blob.len()
        )));
    }
    let mut cursor = 0usize;
    let mut next = || {
        let v = f64::from_le_bytes(blob[cursor..cursor + 8].try_into().unwrap());
        cursor += 8;
        v
    };
    let dw1 = Array2::from_shape_fn((j, j), |_| next());
    let dwout = Array2::from_shape_fn((j, d), |_| next());
    let db1 = Array1::from_shape_fn(j, |_| next());
    let dbout = Array1::from_shape_fn(d, |_| next());
    Ok(DecoderArtifact {
        version: file.version,
        latent_dim: j,
        output_dim: d,
        layout: file.layout,
        graph_hash: file.graph_hash,
        seed: file.seed,
        n_samples: file.n_samples,
        final_elbo: file.final_elbo,
        dw1,
        db1,
        dwout,
        dbout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RegionGraph;
    use crate::priors::generate_training_set;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn zero_model(dim: usize) -> VaeModel {
        VaeModel {
            input_dim: dim,
            alpha: 1.0 / dim as f64,
            w1: Array2::zeros((dim, dim)),
            b1: Array1::zeros(dim),
            wmu: Array2::zeros((dim, dim)),
            bmu: Array1::zeros(dim),
            wsig: Array2::zeros((dim, dim)),
            bsig: Array1::zeros(dim),
            dw1: Array2::zeros((dim, dim)),
            db1: Array1::zeros(dim),
            dwout: Array2::zeros((dim, dim)),
            dbout: Array1::zeros(dim),
        }
    }

    #[test]
    fn init_dims_and_alpha() {
        let m = init_vae(100, 1);
        assert_eq!(m.w1.dim(), (100, 100));
        assert_eq!(m.dwout.dim(), (100, 100));
        assert_abs_diff_eq!(m.alpha, 0.01, epsilon = 1e-15);
        let tiny = init_vae(1, 1);
        assert_abs_diff_eq!(tiny.alpha, 1.0, epsilon = 1e-15);
        // bound check: |w| <= sqrt(6 / (fan_in + fan_out))
        let bound = (6.0 / 200.0f64).sqrt();
        assert!(m.w1.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_vae(10, 42);
        let b = init_vae(10, 42);
        assert_eq!(a.w1, b.w1);
        assert_eq!(a.dwout, b.dwout);
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let m = zero_model(3);
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]];
        let (mu, lv) = m.encode(&x).unwrap();
        assert!(mu.iter().all(|&v| v == 0.0));
        assert!(lv.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_encode_identically() {
        let m = init_vae(4, 9);
        let row = [0.3, -1.0, 0.7, 0.0];
        let x = Array2::from_shape_fn((2, 4), |(_, j)| row[j]);
        let (mu, _) = m.encode(&x).unwrap();
        assert_eq!(mu.row(0), mu.row(1));
    }

    #[test]
    fn encode_is_finite_for_large_inputs() {
        let m = init_vae(8, 3);
        let x = Array2::from_elem((4, 8), 1e3);
        let (mu, lv) = m.encode(&x).unwrap();
        assert!(mu.iter().chain(lv.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn reparameterize_clamps_and_matches_moments() {
        let mu = Array2::from_elem((1, 4), 0.7);
        let deep = Array2::from_elem((1, 4), -1e9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = reparameterize(&mu, &deep, &mut rng);
        // exp(-30/2) noise is below addressable precision relative to 0.7
        for &v in z.iter() {
            assert_abs_diff_eq!(v, 0.7, epsilon = 1e-4);
        }

        let mu = Array2::zeros((100_000, 1));
        let lv = Array2::zeros((100_000, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = reparameterize(&mu, &lv, &mut rng);
        let mean = z.mean().unwrap();
        let var = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.97..1.03).contains(&var), "var {var}");
    }

    #[test]
    fn reparameterize_is_seed_reproducible() {
        let mu = Array2::zeros((3, 3));
        let lv = Array2::from_elem((3, 3), -0.5);
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(reparameterize(&mu, &lv, &mut r1), reparameterize(&mu, &lv, &mut r2));
    }

    #[test]
    fn zero_decoder_outputs_bias() {
        let mut m = zero_model(2);
        m.dbout = array![1.5, -0.5];
        let z = Array2::zeros((3, 2));
        let out = m.decode(&z).unwrap();
        for r in 0..3 {
            assert_eq!(out[[r, 0]], 1.5);
            assert_eq!(out[[r, 1]], -0.5);
        }
    }

    #[test]
    fn elbo_at_the_prior_has_zero_kl() {
        // zero weights force mu = 0, logvar = 0: each KL summand vanishes
        let m = zero_model(3);
        let x = Array2::zeros((4, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, kl, _) = elbo(&m, &x, &mut rng, 1).unwrap();
        assert_abs_diff_eq!(kl, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn perfect_reconstruction_recon_value() {
        // x = 0 and a zero decoder reconstruct exactly: recon is the constant
        let m = zero_model(3);
        let x = Array2::zeros((2, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, _, recon) = elbo(&m, &x, &mut rng, 1).unwrap();
        let want = -1.5 * (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(recon, want, epsilon = 1e-12);
    }

    #[test]
    fn doubling_alpha_doubles_kl_contribution() {
        let mut m = init_vae(3, 77);
        let x = array![[0.3, -0.8, 1.2], [0.0, 0.4, -0.4]];
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let (e1, kl1, rec1) = elbo(&m, &x, &mut r1, 1).unwrap();
        m.alpha *= 2.0;
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let (e2, kl2, rec2) = elbo(&m, &x, &mut r2, 1).unwrap();
        assert_abs_diff_eq!(kl1, kl2, epsilon = 1e-12);
        assert_abs_diff_eq!(rec1, rec2, epsilon = 1e-12);
        assert_abs_diff_eq!(e2 - e1, -0.5 * m.alpha * kl1, epsilon = 1e-10);
    }

    #[test]
    fn kl_penalty_nonnegative_and_zero_only_at_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let mu = Array2::from_shape_fn((2, 3), |_| rng.random_range(-2.0..2.0));
            let lv = Array2::from_shape_fn((2, 3), |_| rng.random_range(-2.0..2.0));
            let kl = kl_penalty_sum(&mu, &lv);
            assert!(kl >= 0.0);
            if mu.iter().any(|&v| v.abs() > 1e-3) || lv.iter().any(|&v| v.abs() > 1e-3) {
                assert!(kl > 0.0);
            }
        }
        assert_eq!(kl_penalty_sum(&Array2::zeros((2, 2)), &Array2::zeros((2, 2))), 0.0);
    }

    #[test]
    fn closed_form_kl_matches_monte_carlo() {
        // KL(q || p) with q = N(mu, sigma^2), p = N(0,1), via log-ratio draws
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mu = 0.8f64;
        let lv = -0.4f64;
        let sigma = (0.5 * lv).exp();
        let closed = 0.5 * (mu * mu + lv.exp() - 1.0 - lv);
        let n = 100_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            let z = mu + sigma * e;
            let logq = -0.5 * ((z - mu) / sigma).powi(2) - sigma.ln();
            let logp = -0.5 * z * z;
            let ratio = logq - logp;
            acc += ratio;
            acc2 += ratio * ratio;
        }
        let mean = acc / n as f64;
        let se = ((acc2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - closed).abs() < 3.0 * se,
            "mc {mean} closed {closed} se {se}"
        );
    }

    #[test]
    fn elbo_graph_gradient_matches_finite_differences() {
        let j = 4;
        let eg = build_elbo_graph(j, 3, 1, 1.0 / j as f64);
        let model = init_vae(j, 55);
        let mut bindings = HashMap::new();
        weight_bindings(&model, &mut bindings);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        bindings.insert(
            "x".into(),
            Array2::from_shape_fn((3, j), |_| rng.random_range(-1.0..1.0)),
        );
        bindings.insert(
            "eps0".into(),
            Array2::from_shape_fn((3, j), |_| rng.sample::<f64, _>(StandardNormal)),
        );
        let err = eg.graph.check_gradient(eg.elbo_mean, &bindings, 1e-5).unwrap();
        assert!(err < 1e-4, "elbo gradient max relative error {err}");
    }

    fn tiny_training_set(seed: u64) -> TrainingSet {
        let g = RegionGraph::lattice(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_training_set(&g, 300, Layout::UnivariateN, 1, &mut rng).unwrap()
    }

    #[test]
    fn training_improves_the_objective() {
        let set = tiny_training_set(31);
        let model = init_vae(4, 7);
        let cfg = VaeConfig {
            epochs: 40,
            batch_size: 64,
            patience: 40,
            seed: 7,
            // random init: this test watches the optimizer climb, not the
            // closed-form starting point
            warm_start: false,
            ..VaeConfig::default()
        };
        let (_, trace) = train(model, &set, &cfg).unwrap();
        assert!(trace.elbo.len() >= 2);
        let first = trace.elbo[0];
        let best = trace.elbo.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(best > first, "elbo did not improve: {first} -> {best}");
        // trace identity: elbo = recon - alpha * kl
        for i in 0..trace.elbo.len() {
            assert_abs_diff_eq!(
                trace.elbo[i],
                trace.recon[i] - 0.25 * trace.kl[i],
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn zero_learning_rate_freezes_weights() {
        let set = tiny_training_set(13);
        let model = init_vae(4, 3);
        let w1_before = model.w1.clone();
        let cfg = VaeConfig {
            epochs: 3,
            learning_rate: 0.0,
            seed: 3,
            warm_start: false,
            ..VaeConfig::default()
        };
        let (trained, trace) = train(model, &set, &cfg).unwrap();
        assert_eq!(trained.w1, w1_before);
        assert_abs_diff_eq!(trace.elbo[0], trace.elbo[1], epsilon = 1e-12);
        assert_abs_diff_eq!(trace.elbo[1], trace.elbo[2], epsilon = 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let set = tiny_training_set(17);
        let cfg = VaeConfig {
            epochs: 5,
            seed: 11,
            ..VaeConfig::default()
        };
        let (m1, t1) = train(init_vae(4, 2), &set, &cfg).unwrap();
        let (m2, t2) = train(init_vae(4, 2), &set, &cfg).unwrap();
        assert_eq!(m1.w1, m2.w1);
        assert_eq!(m1.dwout, m2.dwout);
        assert_eq!(t1.elbo, t2.elbo);
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let set = tiny_training_set(1);
        let model = init_vae(7, 1);
        assert!(matches!(
            train(model, &set, &VaeConfig::default()),
            Err(VaeError::DimMismatch { got: 4, want: 7 })
        ));
    }

    #[test]
    fn destructive_epochs_fall_back_to_the_starting_snapshot() {
        // a step size large enough to wreck the objective every epoch: the
        // returned snapshot must be the untouched warm start
        let set = tiny_training_set(41);
        let cfg = VaeConfig {
            epochs: 3,
            learning_rate: 2.0,
            patience: 10,
            seed: 5,
            ..VaeConfig::default()
        };
        let (trained, _) = train(init_vae(4, 9), &set, &cfg).unwrap();
        let start = warm_start(&init_vae(4, 9), &set);
        assert_eq!(trained.w1, start.w1);
        assert_eq!(trained.bmu, start.bmu);
        assert_eq!(trained.dwout, start.dwout);
        assert_eq!(trained.dbout, start.dbout);
    }

    #[test]
    fn warm_start_reproduces_training_moments_before_any_epoch() {
        let g = RegionGraph::lattice(3, 3);
        let j = 9;
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let set = generate_training_set(&g, 4000, Layout::UnivariateN, 1, &mut rng).unwrap();
        let model = warm_start(&init_vae(j, 5), &set);

        // every aggregate-posterior coordinate has second moment one
        let (mu, logvar) = model.encode(&set.samples).unwrap();
        for c in 0..j {
            let mut m2 = 0.0;
            for r in 0..mu.nrows() {
                m2 += mu[[r, c]].powi(2) + logvar[[r, c]].exp();
            }
            m2 /= mu.nrows() as f64;
            assert_abs_diff_eq!(m2, 1.0, epsilon = 0.02);
        }

        // the decoder pushes standard-normal latents to the training mean
        // and to the covariance shrunk by alpha along the kept directions
        let zn = 40_000;
        let z = Array2::from_shape_fn((zn, j), |_| rng.sample::<f64, _>(StandardNormal));
        let out = model.decode(&z).unwrap();
        let out_mean = out.mean_axis(Axis(0)).unwrap();
        let data_mean = set.samples.mean_axis(Axis(0)).unwrap();
        for c in 0..j {
            assert_abs_diff_eq!(out_mean[c], data_mean[c], epsilon = 0.03);
        }
        let centered_out = &out - &out_mean;
        let out_cov = centered_out.t().dot(&centered_out) / (zn as f64 - 1.0);
        let centered_data = &set.samples - &data_mean;
        let data_cov = centered_data.t().dot(&centered_data) / (set.n_samples() as f64 - 1.0);
        let (vals, vecs) = symmetric_eigh(&data_cov);
        let alpha = 1.0 / j as f64;
        let shrunk = Array1::from_iter(vals.iter().map(|&l| (l - alpha).max(0.0)));
        let want = vecs.dot(&Array2::from_diag(&shrunk)).dot(&vecs.t());
        let frob = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = frob(&(&out_cov - &want)) / frob(&want);
        assert!(rel < 0.05, "pushforward covariance off by {rel}");
    }

    #[test]
    fn warm_start_stays_in_the_elu_identity_region() {
        let g = RegionGraph::lattice(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let set = generate_training_set(&g, 2000, Layout::UnivariateN, 1, &mut rng).unwrap();
        let model = warm_start(&init_vae(9, 5), &set);
        // encoder hidden pre-activation is positive at every training point
        let enc_pre = set.samples.dot(&model.w1) + &model.b1;
        let min_pre = enc_pre.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        assert!(min_pre > 0.0, "encoder pre-activation dips to {min_pre}");
        // decoder hidden pre-activation is positive at the posterior means
        let (mu, _) = model.encode(&set.samples).unwrap();
        let dec_pre = mu.dot(&model.dw1) + &model.db1;
        let min_dec = dec_pre.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        assert!(min_dec > 0.0, "decoder pre-activation dips to {min_dec}");
    }

    #[test]
    fn artifact_roundtrip_is_bit_exact() {
        let model = init_vae(5, 19);
        let artifact = DecoderArtifact::from_model(
            &model,
            DecoderMeta {
                layout: Layout::UnivariateN,
                graph_hash: "abc123".into(),
                seed: 19,
                n_samples: 300,
                final_elbo: -12.5,
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decoder.json");
        save_decoder(&artifact, &path).unwrap();
        let loaded = load_decoder(&path).unwrap();
        assert_eq!(loaded.graph_hash, "abc123");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let z = Array2::from_shape_fn((1, 5), |_| rng.sample::<f64, _>(StandardNormal));
            let a = artifact.decode(&z).unwrap();
            let b = loaded.decode(&z).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn tampered_artifact_is_rejected() {
        let model = init_vae(3, 23);
        let artifact = DecoderArtifact::from_model(
            &model,
            DecoderMeta {
                layout: Layout::UnivariateN,
                graph_hash: "h".into(),
                seed: 23,
                n_samples: 10,
                final_elbo: 0.0,
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decoder.json");
        save_decoder(&artifact, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // flip one base64 character inside the weight blob
        let marker = "\"weights_b64\": \"";
        let idx = text.find(marker).unwrap() + marker.len() + 10;
        let mut bytes = text.into_bytes();
        bytes[idx] = if bytes[idx] == b'A' { b'B' } else { b'A' };
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_decoder(&path),
            Err(VaeError::CorruptFile(_))
        ));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let model = init_vae(3, 29);
        let artifact = DecoderArtifact::from_model(
            &model,
            DecoderMeta {
                layout: Layout::UnivariateN,
                graph_hash: "h".into(),
                seed: 29,
                n_samples: 10,
                final_elbo: 0.0,
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decoder.json");
        save_decoder(&artifact, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let text = text.replace("\"version\": 1", "\"version\": 9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_decoder(&path),
            Err(VaeError::VersionUnsupported(9))
        ));
    }
}
