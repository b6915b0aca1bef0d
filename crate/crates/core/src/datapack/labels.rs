use super::sample::FeatureSample;
use crate::error::{Error, Result};

/// Foreground class ids in ascending order; position `i` is category logit `i`.
pub fn foreground_classes(c: usize, background_index: usize) -> Vec<usize> {
    (0..c).filter(|&k| k != background_index).collect()
}

/// Label views used by the fully-supervised objective.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivedLabels {
    /// `Y_t`: 1 where the segment contains an event.
    pub bg_mask: Vec<f64>,
    /// `Y_tc`: T x (C-1) rows, zero rows on background segments.
    pub cat_rows: Vec<f64>,
    /// `Y_tl`: l1-normalized `Y_t`, uniform `1/T` when no event is present.
    pub bg_l1: Vec<f64>,
    /// Set when every segment is background.
    pub degenerate: bool,
}

pub fn derive_labels(sample: &FeatureSample, background_index: usize) -> Result<DerivedLabels> {
    let (t, c) = (sample.t(), sample.num_classes());
    if background_index >= c {
        return Err(Error::Label(format!("background index {background_index} out of range for C = {c}")));
    }
    let fg = foreground_classes(c, background_index);
    let mut bg_mask = vec![0.0; t];
    let mut cat_rows = vec![0.0; t * (c - 1)];
    for (i, k) in sample.classes().into_iter().enumerate() {
        if k != background_index {
            bg_mask[i] = 1.0;
            let j = fg.iter().position(|&f| f == k).expect("foreground class");
            cat_rows[i * (c - 1) + j] = 1.0;
        }
    }
    let events: f64 = bg_mask.iter().sum();
    let degenerate = events == 0.0;
    let bg_l1 = if degenerate {
        vec![1.0 / t as f64; t]
    } else {
        bg_mask.iter().map(|v| v / events).collect()
    };
    Ok(DerivedLabels {
        bg_mask,
        cat_rows,
        bg_l1,
        degenerate,
    })
}
