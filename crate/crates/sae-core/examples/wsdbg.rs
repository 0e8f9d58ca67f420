//! Scratch debug for the warm-start map. Not shipped.

use ndarray::{Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use sae_core::dense::symmetric_eigh;
use sae_core::graph::RegionGraph;
use sae_core::priors::{generate_training_set, Layout};
use sae_core::vae::{init_vae, warm_start};

fn main() {
    let g = RegionGraph::lattice(3, 3);
    let j = 9;
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let set = generate_training_set(&g, 2000, Layout::UnivariateN, 1, &mut rng).unwrap();
    let model = warm_start(&init_vae(j, 5), &set);

    let mean = set.samples.mean_axis(Axis(0)).unwrap();
    let centered = &set.samples - &mean;
    let cov: Array2<f64> = centered.t().dot(&centered) / (set.n_samples() as f64 - 1.0);
    let (vals, _) = symmetric_eigh(&cov);
    println!("alpha = {}", model.alpha);
    println!("eigenvalues: {:?}", vals.to_vec());

    let (mu, logvar) = model.encode(&set.samples).unwrap();
    for c in 0..j {
        let col = mu.column(c);
        let m = col.mean().unwrap();
        let sd = col.std(1.0);
        let mn = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "latent {c}: mean {m:8.4} sd {sd:8.4} min {mn:8.4} max {mx:8.4} logvar {:8.4}",
            logvar[[0, c]]
        );
    }
    println!("b1 = {:?}", model.b1.to_vec());
    println!("bmu = {:?}", model.bmu.to_vec());
}
