//! Convergence diagnostics: split R-hat and effective sample size per
//! coordinate, aggregated over named parameter blocks.

use serde::{Deserialize, Serialize};

use super::{HmcError, PosteriorDraws};

/// Worst-case diagnostics for one named parameter block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    pub name: String,
    /// Maximum split R-hat over the block's coordinates; NaN when degenerate.
    pub rhat_max: f64,
    /// Minimum effective sample size over the block's coordinates.
    pub ess_min: f64,
    /// True when any coordinate's chains were constant, making R-hat
    /// undefined.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub blocks: Vec<BlockDiagnostics>,
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub mean_accept: f64,
    pub total_divergences: usize,
}

impl ChainDiagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.ess.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Splits each chain's draws of one coordinate in half, giving 2C sequences.
fn split_sequences(draws: &PosteriorDraws, coord: usize) -> Vec<Vec<f64>> {
    let kept = draws.n_kept();
    let half = kept / 2;
    let mut seqs = Vec::with_capacity(2 * draws.n_chains());
    for c in 0..draws.n_chains() {
        let mut first = Vec::with_capacity(half);
        let mut second = Vec::with_capacity(half);
        // odd kept counts drop the middle draw so halves stay equal length
        for i in 0..half {
            first.push(draws.draws[[c, i, coord]]);
        }
        for i in kept - half..kept {
            second.push(draws.draws[[c, i, coord]]);
        }
        seqs.push(first);
        seqs.push(second);
    }
    seqs
}

struct VarianceDecomposition {
    w: f64,
    var_plus: f64,
    seq_means: Vec<f64>,
    n: usize,
}

fn decompose(seqs: &[Vec<f64>]) -> VarianceDecomposition {
    let m = seqs.len() as f64;
    let n = seqs[0].len();
    let nf = n as f64;
    let seq_means: Vec<f64> = seqs
        .iter()
        .map(|s| s.iter().sum::<f64>() / nf)
        .collect();
    let seq_vars: Vec<f64> = seqs
        .iter()
        .zip(seq_means.iter())
        .map(|(s, &mu)| s.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / (nf - 1.0))
        .collect();
    let w = seq_vars.iter().sum::<f64>() / m;
    let grand = seq_means.iter().sum::<f64>() / m;
    let b = nf / (m - 1.0)
        * seq_means
            .iter()
            .map(|&mu| (mu - grand) * (mu - grand))
            .sum::<f64>();
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    VarianceDecomposition {
        w,
        var_plus,
        seq_means,
        n,
    }
}

/// Split R-hat of one coordinate; NaN when every sequence is constant.
fn split_rhat(seqs: &[Vec<f64>]) -> f64 {
    let d = decompose(seqs);
    if d.w <= 0.0 || !d.w.is_finite() {
        return f64::NAN;
    }
    (d.var_plus / d.w).sqrt()
}

/// Effective sample size via the initial monotone positive pair sequence of
/// autocorrelations, pooled across split chains.
fn effective_sample_size(seqs: &[Vec<f64>]) -> f64 {
    let d = decompose(seqs);
    let m = seqs.len() as f64;
    let n = d.n;
    let total = m * n as f64;
    if d.var_plus <= 0.0 || !d.var_plus.is_finite() {
        return f64::NAN;
    }
    // biased (1/n) autocovariance of one sequence at a given lag
    let acov = |seq: &[f64], mean: f64, lag: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n - lag {
            s += (seq[i] - mean) * (seq[i + lag] - mean);
        }
        s / n as f64
    };
    let mean_acov = |lag: usize| -> f64 {
        seqs.iter()
            .zip(d.seq_means.iter())
            .map(|(s, &mu)| acov(s, mu, lag))
            .sum::<f64>()
            / m
    };
    let rho = |lag: usize| -> f64 { 1.0 - (d.w - mean_acov(lag)) / d.var_plus };

    // Geyer: accumulate pair sums while positive, enforcing monotone decay
    let mut tau = 1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 1usize;
    let max_lag = n.saturating_sub(2);
    while lag + 1 <= max_lag {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    (total / tau).min(total)
}

/// Per-coordinate split R-hat and ESS, aggregated per block. Needs at least
/// two chains and 100 kept draws.
pub fn diagnostics(draws: &PosteriorDraws) -> Result<ChainDiagnostics, HmcError> {
    if draws.n_chains() < 2 || draws.n_kept() < 100 {
        return Err(HmcError::TooFewDraws {
            chains: draws.n_chains(),
            kept: draws.n_kept(),
        });
    }
    let dim = draws.dim();
    let mut rhat = Vec::with_capacity(dim);
    let mut ess = Vec::with_capacity(dim);
    for coord in 0..dim {
        let seqs = split_sequences(draws, coord);
        rhat.push(split_rhat(&seqs));
        ess.push(effective_sample_size(&seqs));
    }
    let blocks = draws
        .blocks
        .iter()
        .map(|(name, range)| {
            let coords = range.clone();
            let degenerate = coords.clone().any(|c| rhat[c].is_nan());
            let rhat_max = coords
                .clone()
                .map(|c| rhat[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let ess_min = coords.map(|c| ess[c]).fold(f64::INFINITY, f64::min);
            BlockDiagnostics {
                name: name.clone(),
                rhat_max: if degenerate { f64::NAN } else { rhat_max },
                ess_min,
                degenerate,
            }
        })
        .collect();
    let mean_accept =
        draws.accept_rate.iter().sum::<f64>() / draws.accept_rate.len() as f64;
    Ok(ChainDiagnostics {
        blocks,
        rhat,
        ess,
        mean_accept,
        total_divergences: draws.divergences.iter().sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn draws_from(
        mut fill: impl FnMut(usize, usize, usize) -> f64,
        chains: usize,
        kept: usize,
        dim: usize,
    ) -> PosteriorDraws {
        PosteriorDraws {
            blocks: vec![("q".to_string(), 0..dim)],
            draws: Array3::from_shape_fn((chains, kept, dim), |(c, i, d)| fill(c, i, d)),
            accept_rate: vec![0.8; chains],
            step_size: vec![0.1; chains],
            divergences: vec![0; chains],
        }
    }

    #[test]
    fn iid_chains_have_rhat_near_one_and_full_ess() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<f64> = (0..4 * 1000)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let d = draws_from(|c, i, _| samples[c * 1000 + i], 4, 1000, 1);
        let diag = diagnostics(&d).unwrap();
        assert!(diag.rhat[0] < 1.01, "rhat {}", diag.rhat[0]);
        assert!(diag.ess[0] <= 4000.0 + 1e-9);
        assert!(diag.ess[0] > 2000.0, "iid ess {}", diag.ess[0]);
        assert!(!diag.blocks[0].degenerate);
    }

    #[test]
    fn separated_chains_have_large_rhat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = draws_from(
            |c, _, _| {
                let base = if c == 0 { 0.0 } else { 10.0 };
                base + rng.sample::<f64, _>(StandardNormal)
            },
            2,
            500,
            1,
        );
        let diag = diagnostics(&d).unwrap();
        assert!(diag.rhat[0] > 2.0, "rhat {}", diag.rhat[0]);
    }

    #[test]
    fn autocorrelated_chains_have_reduced_ess() {
        // AR(1) with coefficient 0.9: ESS should be far below the draw count
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chains = 2;
        let kept = 2000;
        let mut series = vec![vec![0.0f64; kept]; chains];
        for chain in series.iter_mut() {
            let mut x = 0.0;
            for v in chain.iter_mut() {
                x = 0.9 * x + rng.sample::<f64, _>(StandardNormal);
                *v = x;
            }
        }
        let d = draws_from(|c, i, _| series[c][i], chains, kept, 1);
        let diag = diagnostics(&d).unwrap();
        let total = (chains * kept) as f64;
        assert!(
            diag.ess[0] < total / 5.0,
            "ess {} not much below {total}",
            diag.ess[0]
        );
    }

    #[test]
    fn constant_chain_is_degenerate() {
        let d = draws_from(|_, _, _| 3.0, 2, 200, 1);
        let diag = diagnostics(&d).unwrap();
        assert!(diag.rhat[0].is_nan());
        assert!(diag.blocks[0].degenerate);
    }

    #[test]
    fn too_few_draws_is_an_error() {
        let d = draws_from(|_, i, _| i as f64, 1, 500, 1);
        assert!(matches!(
            diagnostics(&d),
            Err(HmcError::TooFewDraws { chains: 1, .. })
        ));
        let d = draws_from(|_, i, _| i as f64, 2, 50, 1);
        assert!(matches!(diagnostics(&d), Err(HmcError::TooFewDraws { .. })));
    }

    #[test]
    fn blocks_aggregate_worst_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = draws_from(
            |_, _, _| rng.sample::<f64, _>(StandardNormal),
            2,
            400,
            3,
        );
        d.blocks = vec![("a".to_string(), 0..2), ("b".to_string(), 2..3)];
        // make coordinate 2 disagree across chains
        for i in 0..400 {
            d.draws[[1, i, 2]] += 50.0;
        }
        let diag = diagnostics(&d).unwrap();
        assert!(diag.blocks[0].rhat_max < 1.05);
        assert!(diag.blocks[1].rhat_max > 2.0);
        assert!(diag.blocks[1].ess_min <= diag.blocks[0].ess_min);
    }
}
