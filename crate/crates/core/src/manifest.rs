//! Dataset manifests: UTF-8 JSON sidecars describing one split's tensor file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::field::{NormStats, Units};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Val => f.write_str("val"),
            Split::Test => f.write_str("test"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Number of samples (sequences) in the tensor file.
    pub count: usize,
    /// Frames per sequence; the tensor file is [count, frames, height, width].
    pub frames_per_sample: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub units: Units,
    /// Normalization statistics of the *training* split, replicated to every
    /// split so downstream consumers never recompute them.
    pub stats: NormStats,
    pub split: Split,
    pub source: String,
    /// Tensor file path, relative to the manifest's directory.
    pub tensor_file: String,
    /// Fraction of generated candidates rejected by the patch filter.
    pub rejected_fraction: f64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(CoreError::InvalidArgument("manifest count must be >= 1".into()));
        }
        if self.frames_per_sample == 0 || self.channels == 0 || self.height == 0 || self.width == 0
        {
            return Err(CoreError::InvalidArgument("manifest shape must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rejected_fraction) {
            return Err(CoreError::InvalidArgument("rejected_fraction outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    /// Absolute path of the tensor file, resolved against the manifest's dir.
    pub fn tensor_path(&self, manifest_path: &Path) -> std::path::PathBuf {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&self.tensor_file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetManifest {
        DatasetManifest {
            count: 10,
            frames_per_sample: 3,
            channels: 1,
            height: 16,
            width: 16,
            units: Units::Kelvin,
            stats: NormStats::scalar(280.0, 12.0, Units::Kelvin).unwrap(),
            split: Split::Train,
            source: "blob world seed 1".into(),
            tensor_file: "train.edmt".into(),
            rejected_fraction: 0.05,
        }
    }

    #[test]
    fn round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.json");
        let m = sample();
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.tensor_path(&path), dir.path().join("train.edmt"));
    }

    #[test]
    fn rejects_zero_count() {
        let mut m = sample();
        m.count = 0;
        assert!(m.validate().is_err());
    }
}
