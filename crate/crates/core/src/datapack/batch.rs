use rand::seq::SliceRandom;
use rand::Rng;

use super::labels::{derive_labels, DerivedLabels};
use super::sample::FeatureSample;
use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// Samples stacked along a leading batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// B x T x d_a
    pub audio: Tensor,
    /// B x T x H x W x d_v
    pub visual: Tensor,
    pub labels: Vec<DerivedLabels>,
    /// Ground-truth class per segment, per sample.
    pub classes: Vec<Vec<usize>>,
    /// B x C temporal means of the segment labels.
    pub video_labels: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn stack(samples: &[&FeatureSample], background_index: usize) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Contract("cannot stack an empty batch".into()));
        };
        let b = samples.len();
        let mut audio = Vec::with_capacity(b * first.audio.numel());
        let mut visual = Vec::with_capacity(b * first.visual.numel());
        let mut video = Vec::with_capacity(b * first.num_classes());
        let mut labels = Vec::with_capacity(b);
        let mut classes = Vec::with_capacity(b);
        for s in samples {
            if s.audio.dims() != first.audio.dims() || s.visual.dims() != first.visual.dims() {
                return Err(Error::Dimension(format!("sample `{}` differs in shape from `{}`", s.id, first.id)));
            }
            audio.extend_from_slice(s.audio.data());
            visual.extend_from_slice(s.visual.data());
            video.extend(s.video_label());
            labels.push(derive_labels(s, background_index)?);
            classes.push(s.classes());
        }
        let mut ad = vec![b];
        ad.extend_from_slice(first.audio.dims());
        let mut vd = vec![b];
        vd.extend_from_slice(first.visual.dims());
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            audio: Tensor::new(ad, audio)?,
            visual: Tensor::new(vd, visual)?,
            labels,
            classes,
            video_labels: Tensor::new(vec![b, first.num_classes()], video)?,
        })
    }
}

/// Index batches over `0..n`; the final partial batch is kept.
pub fn batch_order<R: Rng + ?Sized>(n: usize, batch_size: usize, shuffle: bool, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Contract("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        idx.shuffle(rng);
    }
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Stack `samples` into batches; shuffling is driven by `seed`.
pub fn batch(samples: &[FeatureSample], batch_size: usize, shuffle: bool, seed: u64, background_index: usize) -> Result<Vec<Batch>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    batch_order(samples.len(), batch_size, shuffle, &mut rng)?
        .iter()
        .map(|ix| {
            let refs: Vec<&FeatureSample> = ix.iter().map(|&i| &samples[i]).collect();
            Batch::stack(&refs, background_index)
        })
        .collect()
}
