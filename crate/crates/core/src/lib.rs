//! Audio-visual event localization with video-level semantic consistency
//! guidance, operating on precomputed segment features.

pub mod config;
pub mod datapack;
pub mod error;
pub mod escm;
pub mod heads;
pub mod nn;
pub mod numkit;
pub mod pipeline;
pub mod segment_encoder;

pub use error::{Error, Result};
