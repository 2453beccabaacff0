//! Split manifest written next to a synthetic dataset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use owas::skeleton::make_split;
use owas::{OpenWorldSplit, Result, SkeletonSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset: String,
    pub seed: u64,
    pub classes: usize,
    pub known: Vec<u32>,
    pub novel: Vec<u32>,
    pub train_ratio: f64,
    pub val_ratio: f64,
}

impl SplitManifest {
    /// `data.owas` → `data.split.toml`
    pub fn default_path(data: &Path) -> PathBuf {
        data.with_extension("split.toml")
    }

    pub fn load(path: &Path) -> std::result::Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read split manifest {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("bad split manifest {}: {e}", path.display()))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, toml::to_string(self).expect("manifest serialises"))
    }

    pub fn split(&self, sequences: &[SkeletonSequence]) -> Result<OpenWorldSplit> {
        make_split(
            sequences,
            &self.novel.iter().copied().collect(),
            (self.train_ratio, self.val_ratio),
        )
    }
}
