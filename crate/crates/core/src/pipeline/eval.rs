use super::model::Model;
use crate::config::Mode;
use crate::datapack::{Batch, FeatureSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub segments: usize,
    /// C x C counts, rows index the true class.
    pub confusion: Vec<Vec<u64>>,
}

/// Fraction of segments whose decoded label equals the ground truth.
pub fn segment_accuracy(pred: &[Vec<usize>], truth: &[Vec<usize>], c: usize) -> EvalReport {
    let mut confusion = vec![vec![0u64; c]; c];
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        for (&pi, &ti) in p.iter().zip(t) {
            confusion[ti][pi] += 1;
            hit += usize::from(pi == ti);
            n += 1;
        }
    }
    EvalReport {
        accuracy: if n == 0 { 0.0 } else { hit as f64 / n as f64 },
        segments: n,
        confusion,
    }
}

pub fn predict_all(model: &Model, samples: &[FeatureSample]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(model.cfg.train.batch_size.max(1)) {
        let refs: Vec<&FeatureSample> = chunk.iter().collect();
        let batch = Batch::stack(&refs, model.cfg.background_index)?;
        out.extend(model.predict(&batch)?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, samples: &[FeatureSample], mode: Mode) -> Result<EvalReport> {
    if mode != model.cfg.mode {
        return Err(Error::Config(format!(
            "evaluation mode {mode} does not match the model's {} head",
            model.cfg.mode
        )));
    }
    let pred = predict_all(model, samples)?;
    let truth: Vec<Vec<usize>> = samples.iter().map(|s| s.classes()).collect();
    Ok(segment_accuracy(&pred, &truth, model.cfg.dims.c))
}
