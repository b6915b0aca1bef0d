use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pack::{read_pack, PackHeader};
use super::sample::FeatureSample;
use crate::error::{Error, Result};

/// One split: a pack path (relative to the manifest) and an optional
/// half-open sample range inside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub splits: Vec<SplitEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(splits: Vec<SplitEntry>) -> Self {
        Manifest {
            splits,
            ..Default::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn split(&self, name: &str) -> Option<&SplitEntry> {
        self.splits.iter().find(|s| s.name == name)
    }

    /// Read the samples of split `name`.
    pub fn load_split(&self, name: &str) -> Result<(PackHeader, Vec<FeatureSample>)> {
        let entry = self
            .split(name)
            .ok_or_else(|| Error::Config(format!("manifest has no split `{name}`")))?;
        let (header, samples) = read_pack(self.base_dir.join(&entry.path))?;
        let start = entry.start.unwrap_or(0);
        let end = entry.end.unwrap_or(samples.len());
        if start > end || end > samples.len() {
            return Err(Error::Config(format!(
                "split `{name}` range {start}..{end} outside pack of {} samples",
                samples.len()
            )));
        }
        let samples: Vec<FeatureSample> = samples.into_iter().skip(start).take(end - start).collect();
        Ok((
            PackHeader {
                n_samples: samples.len(),
                ..header
            },
            samples,
        ))
    }
}
