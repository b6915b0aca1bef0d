use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// Per-video extents shared by every sample of a pack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleDims {
    pub t: usize,
    pub c: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub h: usize,
    pub w: usize,
    pub background_index: usize,
}

impl SampleDims {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        let d = &cfg.dims;
        SampleDims {
            t: d.t,
            c: d.c,
            d_a: d.d_a,
            d_v: d.d_v,
            h: d.h,
            w: d.w,
            background_index: cfg.background_index,
        }
    }

    /// Compare against a model configuration, naming the first differing field.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let want = SampleDims::from_config(cfg);
        let pairs = [
            ("t", self.t, want.t),
            ("c", self.c, want.c),
            ("d_a", self.d_a, want.d_a),
            ("d_v", self.d_v, want.d_v),
            ("h", self.h, want.h),
            ("w", self.w, want.w),
            ("background_index", self.background_index, want.background_index),
        ];
        for (field, found, expected) in pairs {
            if found != expected {
                return Err(Error::Mismatch {
                    field: field.into(),
                    found: found.to_string(),
                    expected: expected.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// One video: per-segment audio vectors, per-segment visual feature maps and
/// one-hot segment labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSample {
    pub id: String,
    /// T x d_a
    pub audio: Tensor,
    /// T x H x W x d_v
    pub visual: Tensor,
    /// T x C one-hot rows, row-major.
    pub seg_labels: Vec<u8>,
}

impl FeatureSample {
    pub fn new(id: impl Into<String>, audio: Tensor, visual: Tensor, classes: &[usize], c: usize) -> Result<Self> {
        let mut seg_labels = vec![0u8; classes.len() * c];
        for (t, &k) in classes.iter().enumerate() {
            if k >= c {
                return Err(Error::Label(format!("class {k} at segment {t} out of range for C = {c}")));
            }
            seg_labels[t * c + k] = 1;
        }
        Ok(FeatureSample {
            id: id.into(),
            audio,
            visual,
            seg_labels,
        })
    }

    pub fn t(&self) -> usize {
        self.audio.dims()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.seg_labels.len() / self.t()
    }

    pub fn label_row(&self, t: usize) -> &[u8] {
        let c = self.num_classes();
        &self.seg_labels[t * c..(t + 1) * c]
    }

    /// Class index of every segment.
    pub fn classes(&self) -> Vec<usize> {
        (0..self.t())
            .map(|t| self.label_row(t).iter().position(|&v| v == 1).unwrap_or(0))
            .collect()
    }

    /// Temporal mean of the one-hot segment rows.
    pub fn video_label(&self) -> Vec<f64> {
        let (t, c) = (self.t(), self.num_classes());
        let mut out = vec![0.0; c];
        for row in self.seg_labels.chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v as f64;
            }
        }
        out.iter_mut().for_each(|v| *v /= t as f64);
        out
    }

    pub fn validate(&self, dims: &SampleDims) -> Result<()> {
        let d = dims;
        if self.audio.dims() != [d.t, d.d_a] {
            return Err(Error::Dimension(format!(
                "sample `{}`: audio {} expected [{}x{}]",
                self.id,
                self.audio.shape(),
                d.t,
                d.d_a
            )));
        }
        if self.visual.dims() != [d.t, d.h, d.w, d.d_v] {
            return Err(Error::Dimension(format!(
                "sample `{}`: visual {} expected [{}x{}x{}x{}]",
                self.id,
                self.visual.shape(),
                d.t,
                d.h,
                d.w,
                d.d_v
            )));
        }
        if self.seg_labels.len() != d.t * d.c {
            return Err(Error::Label(format!("sample `{}`: {} label entries, expected {}", self.id, self.seg_labels.len(), d.t * d.c)));
        }
        for t in 0..d.t {
            let row = self.label_row(t);
            if row.iter().any(|&v| v > 1) || row.iter().map(|&v| v as u32).sum::<u32>() != 1 {
                return Err(Error::Label(format!("sample `{}`: segment {t} label row {row:?} is not one-hot", self.id)));
            }
        }
        Ok(())
    }
}
