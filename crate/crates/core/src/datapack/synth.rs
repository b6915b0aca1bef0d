//! Class-conditional synthetic videos standing in for real extracted features.
//!
//! Every foreground class owns an audio prototype and a visual prototype.
//! A sample picks one class and one contiguous event interval; event segments
//! carry both prototypes (the visual one at a random spatial cell) plus
//! Gaussian noise, background segments carry unrelated random vectors in the
//! two modalities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::labels::foreground_classes;
use super::sample::{FeatureSample, SampleDims};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numkit::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    /// Noise standard deviation added to prototypes.
    pub sigma: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { sigma: 0.1 }
    }
}

pub fn synth_dataset(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<FeatureSample>> {
    synth_dataset_with(cfg, n, seed, &SynthOptions::default())
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

pub fn synth_dataset_with(cfg: &ModelConfig, n: usize, seed: u64, opts: &SynthOptions) -> Result<Vec<FeatureSample>> {
    let d = SampleDims::from_config(cfg);
    if d.c < 2 {
        return Err(Error::Config("synthetic data needs C >= 2".into()));
    }
    if d.background_index >= d.c {
        return Err(Error::Config(format!("background_index {} >= C = {}", d.background_index, d.c)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg = foreground_classes(d.c, d.background_index);
    let proto_a: Vec<Vec<f64>> = fg.iter().map(|_| normal_vec(&mut rng, d.d_a, 1.0)).collect();
    let proto_v: Vec<Vec<f64>> = fg.iter().map(|_| normal_vec(&mut rng, d.d_v, 1.0)).collect();
    let cells = d.h * d.w;
    let width = n.max(1).to_string().len();

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let k = rng.random_range(0..fg.len());
        let len = rng.random_range(1..=d.t);
        let start = rng.random_range(0..=d.t - len);
        let mut audio = Vec::with_capacity(d.t * d.d_a);
        let mut visual = Vec::with_capacity(d.t * cells * d.d_v);
        let mut classes = Vec::with_capacity(d.t);
        for t in 0..d.t {
            let event = (start..start + len).contains(&t);
            let (a, v) = if event {
                let noise_a = normal_vec(&mut rng, d.d_a, opts.sigma);
                let noise_v = normal_vec(&mut rng, d.d_v, opts.sigma);
                (
                    proto_a[k].iter().zip(noise_a).map(|(p, e)| p + e).collect::<Vec<_>>(),
                    proto_v[k].iter().zip(noise_v).map(|(p, e)| p + e).collect::<Vec<_>>(),
                )
            } else {
                (normal_vec(&mut rng, d.d_a, 1.0), normal_vec(&mut rng, d.d_v, 1.0))
            };
            audio.extend(a);
            let object_cell = rng.random_range(0..cells);
            for cell in 0..cells {
                if cell == object_cell {
                    visual.extend_from_slice(&v);
                } else {
                    visual.extend(normal_vec(&mut rng, d.d_v, opts.sigma));
                }
            }
            classes.push(if event { fg[k] } else { d.background_index });
        }
        out.push(FeatureSample::new(
            format!("synth-{i:0width$}"),
            Tensor::new(vec![d.t, d.d_a], audio)?,
            Tensor::new(vec![d.t, d.h, d.w, d.d_v], visual)?,
            &classes,
            d.c,
        )?);
    }
    Ok(out)
}

/// Deterministic 80/10/10 partition (train, val, test) by position.
pub fn split_80_10_10<T>(items: Vec<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = items.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut it = items.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let val = it.by_ref().take(n_val).collect();
    (train, val, it.collect())
}
