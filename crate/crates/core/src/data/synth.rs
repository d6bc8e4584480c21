//! Gaussian-cluster dataset for desk-scale runs.
//!
//! Features are `n − 1` raw coordinates plus a trailing bias of 1. Only the
//! first half of the raw coordinates (rounded up) separate the classes; the
//! rest are pure noise, which gives an ℓ1 regularizer something to prune.
//! Class means sit on random directions in the informative subspace at
//! distance `separation / 2` from the origin; with two classes the means are
//! antipodal, so they are exactly `separation` apart. Every raw coordinate
//! carries independent Gaussian noise of standard deviation `spread`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{FedError, Result};
use crate::model::Sample;
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    /// Feature dimension including the bias.
    pub features: usize,
    /// Training samples; a further `n_samples / 5` are drawn for testing.
    pub n_samples: usize,
    pub separation: f64,
    /// Per-coordinate noise standard deviation.
    pub spread: f64,
    pub seed: u64,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    let SynthSpec {
        classes: m,
        features: n,
        n_samples,
        separation,
        spread,
        seed,
    } = *spec;
    if m < 2 {
        return Err(FedError::invalid(format!("synthetic data needs at least 2 classes, got {m}")));
    }
    if n < 2 {
        return Err(FedError::invalid("synthetic data needs at least one raw feature besides the bias"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(FedError::invalid(format!("separation must be finite and >= 0, got {separation}")));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(FedError::invalid(format!("spread must be finite and >= 0, got {spread}")));
    }
    let raw = n - 1;
    let informative = raw.div_ceil(2);
    let mut rng = stream(seed, Purpose::DataGen, &[0]);

    let mut means = vec![vec![0.0f64; raw]; m];
    for (k, mean) in means.iter_mut().enumerate() {
        if m == 2 && k == 1 {
            break;
        }
        let dir: Vec<f64> = (0..informative).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for (slot, v) in mean.iter_mut().zip(&dir) {
            *slot = v / norm * separation / 2.0;
        }
    }
    if m == 2 {
        means[1] = means[0].iter().map(|v| -v).collect();
    }

    let draw = |count: usize, rng: &mut crate::rng::StreamRng| -> Vec<Sample> {
        let mut out: Vec<Sample> = (0..count)
            .map(|i| {
                let label = i % m;
                let mut f: Vec<f32> = means[label]
                    .iter()
                    .map(|mu| (mu + spread * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect();
                f.push(1.0);
                Sample::new(f, label)
            })
            .collect();
        out.shuffle(rng);
        out
    };
    let train = draw(n_samples, &mut rng);
    let mut test_rng = stream(seed, Purpose::DataGen, &[1]);
    let test = draw(n_samples / 5, &mut test_rng);
    Ok(Dataset {
        train,
        test,
        classes: m,
        features: n,
    })
}
