//! Sample model, the binary feature-pack format, derived label views,
//! a synthetic data generator and mini-batch assembly.

mod batch;
mod labels;
mod manifest;
mod pack;
mod sample;
mod synth;

pub use batch::{batch, batch_order, Batch};
pub use labels::{derive_labels, foreground_classes, DerivedLabels};
pub use manifest::{Manifest, SplitEntry};
pub use pack::{read_pack, write_pack, PackHeader, PACK_MAGIC, PACK_VERSION};
pub use sample::{FeatureSample, SampleDims};
pub use synth::{split_80_10_10, synth_dataset, synth_dataset_with, SynthOptions};
