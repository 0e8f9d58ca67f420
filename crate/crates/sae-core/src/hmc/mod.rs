//! Hamiltonian Monte Carlo with dual-averaging step-size adaptation,
//! jittered fixed-length trajectories, diagonal mass-matrix estimation from
//! burn-in variances, and embarrassingly parallel multi-chain execution.

pub mod diagnostics;

use std::io::{Read as _, Write as _};
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::derive_seed;

/// Proposals whose absolute Hamiltonian error exceeds this are rejected and
/// counted as divergences.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// A differentiable unnormalized log density over unconstrained coordinates.
///
/// Implementations must be safe for concurrent evaluation: chains call these
/// methods in parallel.
pub trait TargetDensity: Sync {
    fn dim(&self) -> usize;

    /// Log density and its gradient at `position`.
    fn log_density_gradient(&self, position: &Array1<f64>) -> (f64, Array1<f64>);

    /// Log density alone; the default recomputes the gradient and drops it.
    fn log_density(&self, position: &Array1<f64>) -> f64 {
        self.log_density_gradient(position).0
    }

    /// Named parameter blocks as index ranges covering 0..dim.
    fn blocks(&self) -> Vec<(String, Range<usize>)>;
}

#[derive(Debug, Error)]
pub enum HmcError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("log density is not finite at the initial point of chain {chain}")]
    NonFiniteInit { chain: usize },
    #[error(
        "chain {chain} diverged on {divergences} of {kept} post-burn-in iterations"
    )]
    AllDivergent {
        chain: usize,
        divergences: usize,
        kept: usize,
    },
    #[error("gradient check failed: max relative error {max_rel_error}")]
    GradientCheckFailed { max_rel_error: f64 },
    #[error("diagnostics need >= 2 chains and >= 100 kept draws, got {chains} and {kept}")]
    TooFewDraws { chains: usize, kept: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("draws file is corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub n_iterations: usize,
    pub n_burnin: usize,
    pub n_chains: usize,
    pub target_accept: f64,
    pub max_leapfrog_steps: usize,
    pub init_jitter: f64,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            n_iterations: 20_000,
            n_burnin: 10_000,
            n_chains: 4,
            target_accept: 0.8,
            max_leapfrog_steps: 64,
            init_jitter: 0.1,
            seed: 0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<(), HmcError> {
        if self.n_burnin >= self.n_iterations {
            return Err(HmcError::InvalidConfig(format!(
                "burn-in {} must be smaller than total iterations {}",
                self.n_burnin, self.n_iterations
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(HmcError::InvalidConfig(format!(
                "target_accept {} must lie in (0, 1)",
                self.target_accept
            )));
        }
        if self.n_chains == 0 {
            return Err(HmcError::InvalidConfig("n_chains must be >= 1".into()));
        }
        if self.max_leapfrog_steps == 0 {
            return Err(HmcError::InvalidConfig(
                "max_leapfrog_steps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Posterior sample store: `draws[(chain, iteration, coordinate)]` holds the
/// kept (post-burn-in) draws of every chain.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub blocks: Vec<(String, Range<usize>)>,
    pub draws: Array3<f64>,
    pub accept_rate: Vec<f64>,
    pub step_size: Vec<f64>,
    pub divergences: Vec<usize>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.draws.shape()[0]
    }

    pub fn n_kept(&self) -> usize {
        self.draws.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.draws.shape()[2]
    }

    /// All chains' draws of one coordinate, concatenated chain-by-chain.
    pub fn pooled(&self, coord: usize) -> Array1<f64> {
        let mut out = Array1::zeros(self.n_chains() * self.n_kept());
        let mut w = 0;
        for c in 0..self.n_chains() {
            for i in 0..self.n_kept() {
                out[w] = self.draws[[c, i, coord]];
                w += 1;
            }
        }
        out
    }

    pub fn block_range(&self, name: &str) -> Option<Range<usize>> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
    }

    /// Pooled posterior mean of one coordinate.
    pub fn mean(&self, coord: usize) -> f64 {
        self.draws
            .index_axis(Axis(2), coord)
            .mean()
            .expect("non-empty draws")
    }
}

struct ChainOutput {
    draws: Array2<f64>,
    accept_mean: f64,
    step_size: f64,
    divergences: usize,
}

fn kinetic(p: &Array1<f64>, inv_mass: &Array1<f64>) -> f64 {
    0.5 * p
        .iter()
        .zip(inv_mass.iter())
        .map(|(&pi, &im)| pi * pi * im)
        .sum::<f64>()
}

fn sample_momentum<R: Rng + ?Sized>(inv_mass: &Array1<f64>, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_fn(inv_mass.len(), |i| {
        rng.sample::<f64, _>(StandardNormal) / inv_mass[i].sqrt()
    })
}

struct TrajectoryEnd {
    q: Array1<f64>,
    p: Array1<f64>,
    logp: f64,
    grad: Array1<f64>,
}

/// Kick-drift-kick leapfrog under H(q, p) = -log pi(q) + 1/2 p' M^-1 p.
/// Returns None as soon as the trajectory produces a non-finite density or
/// gradient, which the caller records as a divergence.
fn integrate<T: TargetDensity + ?Sized>(
    target: &T,
    q0: &Array1<f64>,
    p0: &Array1<f64>,
    grad0: &Array1<f64>,
    step_size: f64,
    n_steps: usize,
    inv_mass: &Array1<f64>,
) -> Option<TrajectoryEnd> {
    let mut q = q0.clone();
    let mut p = p0.clone();
    let mut grad = grad0.clone();
    let mut logp = f64::NAN;
    let half = 0.5 * step_size;
    for _ in 0..n_steps {
        p.iter_mut().zip(grad.iter()).for_each(|(pv, &g)| *pv += half * g);
        q.iter_mut()
            .zip(p.iter().zip(inv_mass.iter()))
            .for_each(|(qv, (&pv, &im))| *qv += step_size * pv * im);
        let (lp, g) = target.log_density_gradient(&q);
        if !lp.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        logp = lp;
        grad = g;
        p.iter_mut().zip(grad.iter()).for_each(|(pv, &g)| *pv += half * g);
    }
    if n_steps == 0 {
        logp = target.log_density(&q);
    }
    Some(TrajectoryEnd { q, p, logp, grad })
}

/// Leapfrog integration with identity mass, exposed for direct inspection of
/// the integrator (reversibility, hand-checked steps, energy scaling).
/// Returns None when the trajectory reaches a non-finite state.
pub fn leapfrog<T: TargetDensity + ?Sized>(
    target: &T,
    position: &Array1<f64>,
    momentum: &Array1<f64>,
    step_size: f64,
    n_steps: usize,
) -> Option<(Array1<f64>, Array1<f64>)> {
    let inv_mass = Array1::from_elem(position.len(), 1.0);
    let (_, grad) = target.log_density_gradient(position);
    integrate(target, position, momentum, &grad, step_size, n_steps, &inv_mass)
        .map(|end| (end.q, end.p))
}

/// Heuristic initial step size: double or halve until one leapfrog step's
/// acceptance ratio crosses 1/2.
fn find_reasonable_step_size<T: TargetDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    q: &Array1<f64>,
    logp: f64,
    grad: &Array1<f64>,
    inv_mass: &Array1<f64>,
    rng: &mut R,
) -> f64 {
    let mut eps = 1.0_f64;
    let p = sample_momentum(inv_mass, rng);
    let h0 = -logp + kinetic(&p, inv_mass);
    let log_ratio = |eps: f64| -> f64 {
        match integrate(target, q, &p, grad, eps, 1, inv_mass) {
            Some(end) => h0 - (-end.logp + kinetic(&end.p, inv_mass)),
            None => f64::NEG_INFINITY,
        }
    };
    let mut lr = log_ratio(eps);
    let mut guard = 0;
    while !lr.is_finite() && guard < 80 {
        eps *= 0.5;
        lr = log_ratio(eps);
        guard += 1;
    }
    if !lr.is_finite() {
        return 1e-6;
    }
    let a: f64 = if lr > (0.5_f64).ln() { 1.0 } else { -1.0 };
    guard = 0;
    while a * lr > -a * (2.0_f64).ln() && guard < 80 {
        eps *= (2.0_f64).powf(a);
        if !(1e-10..=1e6).contains(&eps) {
            break;
        }
        lr = log_ratio(eps);
        guard += 1;
    }
    eps.clamp(1e-10, 1e6)
}

/// Dual-averaging controller driving the mean acceptance toward a target.
struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, delta: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            m: 0.0,
            delta,
        }
    }

    fn update(&mut self, accept_prob: f64) -> f64 {
        self.m += 1.0;
        let frac = 1.0 / (self.m + Self::T0);
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.delta - accept_prob);
        self.log_eps = self.mu - self.m.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.m.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
        self.log_eps.exp()
    }

    fn adapted(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Streaming mean/variance accumulator for mass estimation.
struct Welford {
    n: f64,
    mean: Array1<f64>,
    m2: Array1<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0.0,
            mean: Array1::zeros(dim),
            m2: Array1::zeros(dim),
        }
    }

    fn push(&mut self, x: &Array1<f64>) {
        self.n += 1.0;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / self.n;
            self.m2[i] += delta * (x[i] - self.mean[i]);
        }
    }

    /// Regularized variance estimate shrunk toward 1e-3, matching common
    /// adaptive-MCMC practice so early noisy estimates stay usable.
    fn regularized_variance(&self) -> Option<Array1<f64>> {
        if self.n < 2.0 {
            return None;
        }
        let var = self.m2.mapv(|m2| m2 / (self.n - 1.0));
        let w = self.n / (self.n + 5.0);
        Some(var.mapv(|v| (w * v + (1.0 - w) * 1e-3).max(1e-12)))
    }
}

fn run_single_chain<T: TargetDensity + ?Sized>(
    target: &T,
    cfg: &HmcConfig,
    chain: usize,
    seed: u64,
) -> Result<ChainOutput, HmcError> {
    let d = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Array1::from_shape_fn(d, |_| {
        cfg.init_jitter * rng.sample::<f64, _>(StandardNormal)
    });
    let (mut logp, mut grad) = target.log_density_gradient(&q);
    if !logp.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(HmcError::NonFiniteInit { chain });
    }

    let mut inv_mass = Array1::from_elem(d, 1.0);
    let eps0 = find_reasonable_step_size(target, &q, logp, &grad, &inv_mass, &mut rng);
    let mut da = DualAveraging::new(eps0, cfg.target_accept);
    let mut eps = eps0;

    let burnin = cfg.n_burnin;
    let kept = cfg.n_iterations - burnin;
    // Mass adaptation, when burn-in is long enough: the diagonal metric is
    // estimated from second-half-of-burn-in variances (window [b/2, 7b/8)),
    // and the step size then re-adapts under the final metric for the rest
    // of burn-in so the frozen pair is mutually consistent.
    let adapt_mass = burnin >= 40;
    let window_start = burnin / 2;
    let window_end = burnin - burnin / 8;
    let mut window = Welford::new(d);

    let mut draws = Array2::zeros((kept, d));
    let mut accept_acc = 0.0;
    let mut divergences = 0usize;

    for iter in 0..cfg.n_iterations {
        let n_steps = rng.random_range(1..=cfg.max_leapfrog_steps);
        let p0 = sample_momentum(&inv_mass, &mut rng);
        let h0 = -logp + kinetic(&p0, &inv_mass);
        let mut accept_prob = 0.0;
        let mut divergent = true;
        if let Some(end) = integrate(target, &q, &p0, &grad, eps, n_steps, &inv_mass) {
            let h1 = -end.logp + kinetic(&end.p, &inv_mass);
            let delta_h = h1 - h0;
            if delta_h.is_finite() && delta_h.abs() <= DIVERGENCE_THRESHOLD {
                divergent = false;
                accept_prob = (-delta_h).exp().min(1.0);
                if rng.random::<f64>() < accept_prob {
                    q = end.q;
                    logp = end.logp;
                    grad = end.grad;
                }
            }
        }

        if iter < burnin {
            eps = da.update(accept_prob);
            if adapt_mass {
                if iter >= window_start && iter < window_end {
                    window.push(&q);
                }
                if iter + 1 == window_end {
                    if let Some(var) = window.regularized_variance() {
                        inv_mass = var;
                    }
                    // metric changed: re-seed the step-size search and
                    // restart dual averaging under the final metric
                    let eps_new =
                        find_reasonable_step_size(target, &q, logp, &grad, &inv_mass, &mut rng);
                    da = DualAveraging::new(eps_new, cfg.target_accept);
                    eps = eps_new;
                }
            }
            if iter + 1 == burnin {
                eps = da.adapted();
            }
        } else {
            let row = iter - burnin;
            draws.row_mut(row).assign(&q);
            accept_acc += accept_prob;
            if divergent {
                divergences += 1;
            }
        }
    }

    if divergences * 2 > kept {
        return Err(HmcError::AllDivergent {
            chain,
            divergences,
            kept,
        });
    }
    Ok(ChainOutput {
        draws,
        accept_mean: accept_acc / kept as f64,
        step_size: eps,
        divergences,
    })
}

/// Runs `config.n_chains` independent chains in parallel and stacks their
/// kept draws. Chain seeds derive from one value drawn from `rng`, so an
/// identically seeded caller reproduces every draw bit for bit.
pub fn run_chain<T: TargetDensity + ?Sized>(
    target: &T,
    config: &HmcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PosteriorDraws, HmcError> {
    config.validate()?;
    let d = target.dim();
    if d == 0 {
        return Err(HmcError::InvalidConfig("target dimension is zero".into()));
    }
    let base: u64 = rng.random();
    let outputs = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_single_chain(target, config, c, derive_seed(base, c as u64)))
        .collect::<Result<Vec<_>, _>>()?;

    let kept = config.n_iterations - config.n_burnin;
    let mut draws = Array3::zeros((config.n_chains, kept, d));
    let mut accept_rate = Vec::with_capacity(config.n_chains);
    let mut step_size = Vec::with_capacity(config.n_chains);
    let mut divergences = Vec::with_capacity(config.n_chains);
    for (c, out) in outputs.into_iter().enumerate() {
        draws.index_axis_mut(Axis(0), c).assign(&out.draws);
        accept_rate.push(out.accept_mean);
        step_size.push(out.step_size);
        divergences.push(out.divergences);
    }
    Ok(PosteriorDraws {
        blocks: target.blocks(),
        draws,
        accept_rate,
        step_size,
        divergences,
    })
}

/// Compares the target's gradient against central finite differences at
/// `n_points` random points, probing at most `max_coords` coordinates per
/// point. Returns the worst relative error (floored denominator).
pub fn validate_gradient<T: TargetDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    n_points: usize,
    max_coords: usize,
    fd_eps: f64,
    rng: &mut R,
) -> f64 {
    let d = target.dim();
    let mut worst = 0.0_f64;
    for _ in 0..n_points {
        let x = Array1::from_shape_fn(d, |_| 0.5 * rng.sample::<f64, _>(StandardNormal));
        let (_, grad) = target.log_density_gradient(&x);
        let coords: Vec<usize> = if d <= max_coords {
            (0..d).collect()
        } else {
            let mut picked: Vec<usize> = (0..d).collect();
            for i in 0..max_coords {
                let j = rng.random_range(i..d);
                picked.swap(i, j);
            }
            picked.truncate(max_coords);
            picked
        };
        for &c in &coords {
            let mut xp = x.clone();
            xp[c] += fd_eps;
            let fp = target.log_density(&xp);
            xp[c] = x[c] - fd_eps;
            let fm = target.log_density(&xp);
            let fd = (fp - fm) / (2.0 * fd_eps);
            let denom = fd.abs().max(grad[c].abs()).max(1.0);
            worst = worst.max((fd - grad[c]).abs() / denom);
        }
    }
    worst
}

const DRAWS_MAGIC: &[u8; 8] = b"SAEDRAWS";
const DRAWS_VERSION: u32 = 1;

/// Writes draws as a columnar binary file: header (blocks, dims, chains,
/// per-chain stats) followed by 64-bit little-endian floats grouped by
/// coordinate, then by chain.
pub fn save_draws(draws: &PosteriorDraws, path: &Path) -> Result<(), HmcError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(DRAWS_MAGIC)?;
    f.write_all(&DRAWS_VERSION.to_le_bytes())?;
    f.write_all(&(draws.n_chains() as u32).to_le_bytes())?;
    f.write_all(&(draws.dim() as u32).to_le_bytes())?;
    f.write_all(&(draws.n_kept() as u64).to_le_bytes())?;
    f.write_all(&(draws.blocks.len() as u32).to_le_bytes())?;
    for (name, range) in &draws.blocks {
        let bytes = name.as_bytes();
        f.write_all(&(bytes.len() as u32).to_le_bytes())?;
        f.write_all(bytes)?;
        f.write_all(&(range.start as u64).to_le_bytes())?;
        f.write_all(&(range.end as u64).to_le_bytes())?;
    }
    for c in 0..draws.n_chains() {
        f.write_all(&draws.accept_rate[c].to_le_bytes())?;
        f.write_all(&draws.step_size[c].to_le_bytes())?;
        f.write_all(&(draws.divergences[c] as u64).to_le_bytes())?;
    }
    for coord in 0..draws.dim() {
        for chain in 0..draws.n_chains() {
            for iter in 0..draws.n_kept() {
                f.write_all(&draws.draws[[chain, iter, coord]].to_le_bytes())?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_draws(path: &Path) -> Result<PosteriorDraws, HmcError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let corrupt = |msg: &str| HmcError::Corrupt(msg.to_string());
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != DRAWS_MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    let mut read_u32 = |f: &mut dyn std::io::Read| -> Result<u32, HmcError> {
        f.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut f)?;
    if version != DRAWS_VERSION {
        return Err(HmcError::Corrupt(format!("unsupported version {version}")));
    }
    let n_chains = read_u32(&mut f)? as usize;
    let dim = read_u32(&mut f)? as usize;
    f.read_exact(&mut u64buf)?;
    let kept = u64::from_le_bytes(u64buf) as usize;
    let n_blocks = read_u32(&mut f)? as usize;
    if n_chains == 0 || dim == 0 || kept == 0 || n_blocks > dim {
        return Err(corrupt("implausible header"));
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let len = read_u32(&mut f)? as usize;
        if len > 4096 {
            return Err(corrupt("block name too long"));
        }
        let mut name = vec![0u8; len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("block name not utf-8"))?;
        f.read_exact(&mut u64buf)?;
        let start = u64::from_le_bytes(u64buf) as usize;
        f.read_exact(&mut u64buf)?;
        let end = u64::from_le_bytes(u64buf) as usize;
        if start > end || end > dim {
            return Err(corrupt("block range out of bounds"));
        }
        blocks.push((name, start..end));
    }
    let mut accept_rate = Vec::with_capacity(n_chains);
    let mut step_size = Vec::with_capacity(n_chains);
    let mut divergences = Vec::with_capacity(n_chains);
    for _ in 0..n_chains {
        f.read_exact(&mut u64buf)?;
        accept_rate.push(f64::from_le_bytes(u64buf));
        f.read_exact(&mut u64buf)?;
        step_size.push(f64::from_le_bytes(u64buf));
        f.read_exact(&mut u64buf)?;
        divergences.push(u64::from_le_bytes(u64buf) as usize);
    }
    let mut draws = Array3::zeros((n_chains, kept, dim));
    for coord in 0..dim {
        for chain in 0..n_chains {
            for iter in 0..kept {
                f.read_exact(&mut u64buf)?;
                draws[[chain, iter, coord]] = f64::from_le_bytes(u64buf);
            }
        }
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(PosteriorDraws {
        blocks,
        draws,
        accept_rate,
        step_size,
        divergences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Independent N(0, diag(scales^2)) target.
    struct DiagNormal {
        scales: Vec<f64>,
    }

    impl TargetDensity for DiagNormal {
        fn dim(&self) -> usize {
            self.scales.len()
        }
        fn log_density_gradient(&self, x: &Array1<f64>) -> (f64, Array1<f64>) {
            let mut lp = 0.0;
            let mut g = Array1::zeros(x.len());
            for i in 0..x.len() {
                let v = self.scales[i] * self.scales[i];
                lp += -0.5 * x[i] * x[i] / v;
                g[i] = -x[i] / v;
            }
            (lp, g)
        }
        fn blocks(&self) -> Vec<(String, Range<usize>)> {
            vec![("q".to_string(), 0..self.scales.len())]
        }
    }

    fn std_normal(d: usize) -> DiagNormal {
        DiagNormal {
            scales: vec![1.0; d],
        }
    }

    /// Finite density whose reported gradient is astronomically large:
    /// every momentum kick overflows the trajectory, so each iteration
    /// diverges regardless of how small the step size adapts.
    struct ExplodingGradient;

    impl TargetDensity for ExplodingGradient {
        fn dim(&self) -> usize {
            1
        }
        fn log_density_gradient(&self, x: &Array1<f64>) -> (f64, Array1<f64>) {
            (-0.5 * x[0] * x[0], array![1e200])
        }
        fn blocks(&self) -> Vec<(String, Range<usize>)> {
            vec![("q".to_string(), 0..1)]
        }
    }

    #[test]
    fn leapfrog_hand_checked_single_step() {
        let t = std_normal(1);
        let (q, p) = leapfrog(&t, &array![1.0], &array![0.0], 0.1, 1).unwrap();
        assert_abs_diff_eq!(q[0], 0.995, epsilon = 1e-12);
        assert_abs_diff_eq!(p[0], -0.09975, epsilon = 1e-12);
    }

    #[test]
    fn leapfrog_zero_steps_is_identity() {
        let t = std_normal(2);
        let q0 = array![0.3, -0.7];
        let p0 = array![1.0, 0.5];
        let (q, p) = leapfrog(&t, &q0, &p0, 0.1, 0).unwrap();
        assert_eq!(q, q0);
        assert_eq!(p, p0);
    }

    #[test]
    fn leapfrog_is_reversible() {
        let t = std_normal(3);
        let q0 = array![0.4, -1.2, 2.0];
        let p0 = array![-0.3, 0.8, 0.1];
        let (q1, p1) = leapfrog(&t, &q0, &p0, 0.05, 40).unwrap();
        let (q2, p2) = leapfrog(&t, &q1, &p1.mapv(|v| -v), 0.05, 40).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(q2[i], q0[i], epsilon = 1e-10);
            assert_abs_diff_eq!(p2[i], -p0[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn leapfrog_energy_error_scales_quadratically() {
        // halving the step size at fixed trajectory length (so double the
        // steps) should cut the Hamiltonian error by ~4x
        let t = std_normal(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let energy_err = |q0: f64, p0: f64, eps: f64, steps: usize| -> f64 {
            let (q, p) = leapfrog(&t, &array![q0], &array![p0], eps, steps).unwrap();
            let h0 = 0.5 * (q0 * q0 + p0 * p0);
            let h1 = 0.5 * (q[0] * q[0] + p[0] * p[0]);
            (h1 - h0).abs()
        };
        let mut coarse = 0.0;
        let mut fine = 0.0;
        for _ in 0..200 {
            let q0: f64 = rng.sample(StandardNormal);
            let p0: f64 = rng.sample(StandardNormal);
            coarse += energy_err(q0, p0, 0.2, 10);
            fine += energy_err(q0, p0, 0.1, 20);
        }
        let ratio = coarse / fine;
        assert!((3.5..=4.5).contains(&ratio), "energy-error ratio {ratio}");
    }

    fn quick_config(iters: usize, burnin: usize, chains: usize, seed: u64) -> HmcConfig {
        HmcConfig {
            n_iterations: iters,
            n_burnin: burnin,
            n_chains: chains,
            seed,
            ..HmcConfig::default()
        }
    }

    #[test]
    fn standard_normal_moments_recovered() {
        let t = std_normal(1);
        let cfg = quick_config(6000, 3000, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let draws = run_chain(&t, &cfg, &mut rng).unwrap();
        let pooled = draws.pooled(0);
        let mean = pooled.mean().unwrap();
        let var = pooled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (pooled.len() - 1) as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((0.9..=1.1).contains(&var), "variance {var}");
        assert!(draws.divergences.iter().all(|&d| d == 0));
    }

    #[test]
    fn conjugate_posterior_mean_matches_closed_form() {
        // y ~ N(theta, 1), theta ~ N(0, 1), y = 2 -> posterior N(1, 1/2)
        struct Conjugate;
        impl TargetDensity for Conjugate {
            fn dim(&self) -> usize {
                1
            }
            fn log_density_gradient(&self, x: &Array1<f64>) -> (f64, Array1<f64>) {
                let theta = x[0];
                let lp = -0.5 * (2.0 - theta) * (2.0 - theta) - 0.5 * theta * theta;
                (lp, array![(2.0 - theta) - theta])
            }
            fn blocks(&self) -> Vec<(String, Range<usize>)> {
                vec![("theta".to_string(), 0..1)]
            }
        }
        let cfg = quick_config(6000, 3000, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let draws = run_chain(&Conjugate, &cfg, &mut rng).unwrap();
        let diag = diagnostics::diagnostics(&draws).unwrap();
        let pooled = draws.pooled(0);
        let mean = pooled.mean().unwrap();
        let mc_se = (0.5_f64).sqrt() / diag.ess[0].sqrt();
        assert!(
            (mean - 1.0).abs() < 3.0 * mc_se,
            "mean {mean}, mc se {mc_se}"
        );
    }

    #[test]
    fn same_seed_gives_identical_draws() {
        let t = std_normal(2);
        let cfg = quick_config(400, 200, 2, 9);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = run_chain(&t, &cfg, &mut r1).unwrap();
        let b = run_chain(&t, &cfg, &mut r2).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.step_size, b.step_size);
    }

    #[test]
    fn acceptance_lands_near_target() {
        let t = std_normal(5);
        let cfg = quick_config(4000, 2000, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = run_chain(&t, &cfg, &mut rng).unwrap();
        for &acc in &draws.accept_rate {
            assert!(
                (acc - 0.8).abs() <= 0.1,
                "acceptance {acc} not within 0.1 of 0.8"
            );
        }
    }

    #[test]
    fn mass_adaptation_handles_scale_separation() {
        let t = DiagNormal {
            scales: vec![1.0, 10.0],
        };
        let cfg = quick_config(6000, 3000, 2, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let draws = run_chain(&t, &cfg, &mut rng).unwrap();
        for coord in 0..2 {
            let pooled = draws.pooled(coord);
            let mean = pooled.mean().unwrap();
            let var = pooled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (pooled.len() - 1) as f64;
            let want = if coord == 0 { 1.0 } else { 100.0 };
            assert!(
                (var / want - 1.0).abs() < 0.25,
                "coord {coord} variance {var}, want ~{want}"
            );
        }
    }

    #[test]
    fn kolmogorov_smirnov_on_standard_normal_draws() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let t = std_normal(1);
        let cfg = quick_config(12_000, 2_000, 1, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = run_chain(&t, &cfg, &mut rng).unwrap();
        let mut xs: Vec<f64> = draws.pooled(0).to_vec();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let norm = Normal::new(0.0, 1.0).unwrap();
        let mut d_stat = 0.0_f64;
        for (i, &x) in xs.iter().enumerate() {
            let cdf = norm.cdf(x);
            let hi = (i as f64 + 1.0) / n - cdf;
            let lo = cdf - i as f64 / n;
            d_stat = d_stat.max(hi.max(lo));
        }
        // alpha = 0.01 asymptotic critical value
        let critical = 1.628 / n.sqrt();
        assert!(
            d_stat < critical,
            "KS statistic {d_stat} exceeds critical {critical}"
        );
    }

    #[test]
    fn exploding_gradient_reports_all_divergent() {
        let cfg = quick_config(400, 200, 1, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        match run_chain(&ExplodingGradient, &cfg, &mut rng) {
            Err(HmcError::AllDivergent { .. }) => {}
            Err(other) => panic!("expected AllDivergent, got {other:?}"),
            Ok(_) => panic!("expected AllDivergent, sampler succeeded"),
        }
    }

    #[test]
    fn non_finite_init_is_reported() {
        struct Bad;
        impl TargetDensity for Bad {
            fn dim(&self) -> usize {
                1
            }
            fn log_density_gradient(&self, _: &Array1<f64>) -> (f64, Array1<f64>) {
                (f64::NEG_INFINITY, Array1::zeros(1))
            }
            fn blocks(&self) -> Vec<(String, Range<usize>)> {
                vec![("q".to_string(), 0..1)]
            }
        }
        let cfg = quick_config(200, 100, 1, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        assert!(matches!(
            run_chain(&Bad, &cfg, &mut rng),
            Err(HmcError::NonFiniteInit { chain: 0 })
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_burnin = HmcConfig {
            n_burnin: 100,
            n_iterations: 100,
            ..HmcConfig::default()
        };
        assert!(matches!(
            bad_burnin.validate(),
            Err(HmcError::InvalidConfig(_))
        ));
        let bad_accept = HmcConfig {
            target_accept: 1.0,
            ..HmcConfig::default()
        };
        assert!(bad_accept.validate().is_err());
    }

    #[test]
    fn validate_gradient_flags_a_wrong_gradient() {
        struct Lying;
        impl TargetDensity for Lying {
            fn dim(&self) -> usize {
                2
            }
            fn log_density_gradient(&self, x: &Array1<f64>) -> (f64, Array1<f64>) {
                // density of a standard normal, gradient deliberately scaled
                (-0.5 * (x[0] * x[0] + x[1] * x[1]), x.mapv(|v| -2.0 * v))
            }
            fn blocks(&self) -> Vec<(String, Range<usize>)> {
                vec![("q".to_string(), 0..2)]
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let err = validate_gradient(&Lying, 10, 8, 1e-5, &mut rng);
        assert!(err > 1e-2, "expected a large error, got {err}");
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let ok = validate_gradient(&std_normal(2), 10, 8, 1e-5, &mut rng);
        assert!(ok < 1e-6, "honest gradient scored {ok}");
    }

    #[test]
    fn draws_roundtrip_bit_exactly() {
        let t = std_normal(3);
        let cfg = quick_config(300, 150, 2, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let draws = run_chain(&t, &cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("draws.bin");
        save_draws(&draws, &path).unwrap();
        let loaded = load_draws(&path).unwrap();
        assert_eq!(loaded.blocks, draws.blocks);
        assert_eq!(loaded.divergences, draws.divergences);
        assert_eq!(loaded.draws.shape(), draws.draws.shape());
        for (a, b) in loaded.draws.iter().zip(draws.draws.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_draws_file_is_rejected() {
        let t = std_normal(1);
        let cfg = quick_config(200, 100, 1, 37);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let draws = run_chain(&t, &cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("draws.bin");
        save_draws(&draws, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_draws(&path).is_err());
    }
}
