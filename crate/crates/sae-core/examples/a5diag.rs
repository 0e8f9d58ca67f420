//! Scratch diagnostic for the decoder-vs-prior covariance check. Not shipped.

use ndarray::{Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sae_core::dense::spd_inverse;
use sae_core::graph::RegionGraph;
use sae_core::priors::{generate_training_set, Layout};
use sae_core::vae::{init_vae, train, VaeConfig};

fn dense_precision(graph: &RegionGraph, rho: f64) -> Array2<f64> {
    let n = graph.n_regions();
    let mut q = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        q[[i, i]] = graph.degree(i) as f64;
        for &j in graph.neighbors_of(i) {
            q[[i, j]] -= rho;
        }
    }
    q
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(500);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let mc: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);
    let patience: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(25);

    let graph = RegionGraph::lattice(10, 10);
    let j = graph.n_regions();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let set = generate_training_set(&graph, 10_000, Layout::UnivariateN, 1, &mut rng).unwrap();

    // data scale
    let data_mean = set.samples.mean_axis(Axis(0)).unwrap();
    let data_sd: Vec<f64> = (0..j)
        .map(|c| set.samples.column(c).std(1.0))
        .collect();
    let sd_min = data_sd.iter().cloned().fold(f64::INFINITY, f64::min);
    let sd_max = data_sd.iter().cloned().fold(0.0_f64, f64::max);
    println!(
        "data: mean sup {:.4}, per-dim sd in [{:.3},{:.3}]",
        data_mean.iter().fold(0.0_f64, |a, v| a.max(v.abs())),
        sd_min,
        sd_max
    );

    let cfg = VaeConfig {
        seed: 506,
        epochs,
        learning_rate: lr,
        mc_samples: mc,
        patience,
        ..VaeConfig::default()
    };
    let model = init_vae(j, cfg.seed);
    let t0 = std::time::Instant::now();
    let (trained, trace) = train(model, &set, &cfg).unwrap();
    println!("trained {} epochs in {:.0}s", trace.elbo.len(), t0.elapsed().as_secs_f64());
    for (i, ((e, k), r)) in trace
        .elbo
        .iter()
        .zip(trace.kl.iter())
        .zip(trace.recon.iter())
        .enumerate()
    {
        if i % 25 == 0 || i + 1 == trace.elbo.len() {
            println!("epoch {i:4}  elbo {e:12.3}  kl {k:12.3}  recon {r:12.3}");
        }
    }

    // worst consecutive dip of the 20-epoch moving average, as the release
    // criterion measures it
    let window = 20;
    let ma: Vec<f64> = trace
        .elbo
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    let mut worst_dip = 0.0_f64;
    let mut dip_at = 0usize;
    for t in 1..ma.len() {
        let dip = (ma[t - 1] - ma[t]) / ma[t - 1].abs().max(1e-12);
        if dip > worst_dip {
            worst_dip = dip;
            dip_at = t + window - 1;
        }
    }
    println!("worst MA dip {worst_dip:.2e} at epoch {dip_at} (limit 1e-3)");

    // aggregate posterior of the trained encoder over the training set
    let (mu, logvar) = trained.encode(&set.samples).unwrap();
    let mu_mean = mu.mean_axis(Axis(0)).unwrap();
    let mu_mean_sup = mu_mean.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut second_moment = vec![0.0_f64; j];
    for r in 0..mu.nrows() {
        for c in 0..j {
            second_moment[c] += mu[[r, c]].powi(2) + logvar[[r, c]].exp();
        }
    }
    for v in &mut second_moment {
        *v /= mu.nrows() as f64;
    }
    let sm_min = second_moment.iter().cloned().fold(f64::INFINITY, f64::min);
    let sm_max = second_moment.iter().cloned().fold(0.0_f64, f64::max);
    let sigma_mean = logvar.iter().map(|lv| (0.5 * lv).exp()).sum::<f64>() / logvar.len() as f64;
    println!(
        "aggregate posterior: |mean(mu)| sup {mu_mean_sup:.4}, E[mu^2+sigma^2] per dim in [{sm_min:.3},{sm_max:.3}], mean sigma {sigma_mean:.4}"
    );

    // reconstruction error at the posterior mean
    let recon = trained.decode(&mu).unwrap();
    let resid = &set.samples - &recon;
    let mse = resid.iter().map(|v| v * v).sum::<f64>() / resid.len() as f64;
    println!("recon mse per cell at posterior mean: {:.5} (data var ~{:.3})", mse, sd_max * sd_max);

    // generation check, as in the acceptance criterion
    let m = 10_000;
    let mut zrng = ChaCha8Rng::seed_from_u64(507);
    let z = Array2::from_shape_fn((m, j), |_| zrng.sample::<f64, _>(StandardNormal));
    let decoded = trained.decode(&z).unwrap();
    let col_mean = decoded.mean_axis(Axis(0)).unwrap();
    let centered = &decoded - &col_mean;
    let dec_cov = centered.t().dot(&centered) / (m as f64 - 1.0);

    // shared-rho oracle: average Q(rho)^-1 over the training set's own draws
    let mut prior_cov = Array2::<f64>::zeros((j, j));
    for &rho in &set.rhos {
        prior_cov += &spd_inverse(&dense_precision(&graph, rho)).unwrap();
    }
    prior_cov /= set.rhos.len() as f64;

    // independent oracle, for reference: what tail luck alone costs
    let mut indep_cov = Array2::<f64>::zeros((j, j));
    let n_rho = 3000;
    let mut rho_rng = ChaCha8Rng::seed_from_u64(508);
    for _ in 0..n_rho {
        let rho: f64 = rho_rng.random();
        indep_cov += &spd_inverse(&dense_precision(&graph, rho)).unwrap();
    }
    indep_cov /= n_rho as f64;

    let frob = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = |a: &Array2<f64>, b: &Array2<f64>| frob(&(a - b)) / frob(b);

    // floor: the training-sample covariance itself against each oracle
    let train_mean = set.samples.mean_axis(Axis(0)).unwrap();
    let train_centered = &set.samples - &train_mean;
    let train_cov = train_centered.t().dot(&train_centered) / (set.n_samples() as f64 - 1.0);
    println!(
        "floors: train cov vs shared-rho oracle {:.4}, vs independent oracle {:.4}, oracles vs each other {:.4}",
        rel(&train_cov, &prior_cov),
        rel(&train_cov, &indep_cov),
        rel(&prior_cov, &indep_cov)
    );

    let rel_frob = rel(&dec_cov, &prior_cov);
    let mean_inf = col_mean.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let dec_var_mean = (0..j).map(|i| dec_cov[[i, i]]).sum::<f64>() / j as f64;
    let prior_var_mean = (0..j).map(|i| prior_cov[[i, i]]).sum::<f64>() / j as f64;
    println!(
        "generation: mean sup {:.4} (limit 0.1), rel frobenius {:.4} (limit 0.25), mean decoded var {:.4} vs prior {:.4}, vs independent oracle {:.4}",
        mean_inf, rel_frob, dec_var_mean, prior_var_mean,
        rel(&dec_cov, &indep_cov)
    );
}
