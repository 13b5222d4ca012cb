//! JSON dataset manifests (`"version": 1`).
//!
//! ```json
//! {
//!   "version": 1,
//!   "degradation": { "factor": 4, "noise": { "delta": 651.0, "seed": 7 } },
//!   "entries": [ { "gt": "cones.pgm", "mask": null, "split": "train" } ]
//! }
//! ```
//!
//! Relative paths are resolved against the manifest's directory when loading.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::atomic_write;
use crate::error::{Error, Result};
use crate::resample::NoiseSpec;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub gt: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    pub split: Split,
}

/// How low-resolution inputs are produced from ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Degradation {
    pub factor: usize,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub degradation: Degradation,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(degradation: Degradation, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest {
            version: MANIFEST_VERSION,
            degradation,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Unsupported(format!("manifest version {}", self.version)));
        }
        if self.degradation.factor < 2 {
            return Err(Error::InvalidArgument(format!(
                "degradation factor must be >= 2, got {}",
                self.degradation.factor
            )));
        }
        if let Some(noise) = &self.degradation.noise {
            noise.validate()?;
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.gt) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate manifest entry {}",
                    e.gt.display()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            e.gt = base.join(&e.gt);
            if let Some(mask) = &mut e.mask {
                *mask = base.join(&*mask);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        atomic_write(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_schema_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(
            &path,
            r#"{"version":1,"degradation":{"factor":4,"noise":{"delta":651.0,"seed":7}},
                "entries":[{"gt":"a.pgm","mask":null,"split":"train"},{"gt":"b.pfm","split":"test"}]}"#,
        )
        .unwrap();
        let m = DatasetManifest::load(&path).unwrap();
        assert_eq!(m.entries[0].gt, dir.path().join("a.pgm"));
        assert_eq!(m.degradation.noise.unwrap().delta, 651.0);
        assert_eq!(m.entries_in(Split::Test).count(), 1);
    }

    #[test]
    fn rejects_duplicates_versions_and_unknown_keys() {
        let entry = ManifestEntry { gt: "a.pgm".into(), mask: None, split: Split::Train };
        let deg = Degradation { factor: 2, noise: None };
        assert!(DatasetManifest::new(deg, vec![entry.clone(), entry.clone()]).is_err());
        let mut m = DatasetManifest::new(deg, vec![entry]).unwrap();
        m.version = 2;
        assert!(m.validate().is_err());
        let err = serde_json::from_str::<DatasetManifest>(
            r#"{"version":1,"degradation":{"factor":2},"entries":[],"extra":1}"#,
        );
        assert!(err.is_err());
    }
}
