//! JSON dataset manifest.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "entries": [
//!     {
//!       "sample_id": "subject-000",
//!       "image": "images/subject-000.nii.gz",
//!       "labels": [{ "tract": "CST_left", "path": "labels/subject-000/CST_left.nii.gz" }],
//!       "provenance": { "kind": "real" }
//!     },
//!     {
//!       "sample_id": "rc1-0000",
//!       "image": "rc1/0000/image.nii.gz",
//!       "labels": [{ "tract": "CST_left", "path": "rc1/0000/labels/CST_left.nii.gz" }],
//!       "provenance": { "kind": "synthetic", "strategy": "RC1", "seed": 7, "sample_index": 0 }
//!     }
//!   ]
//! }
//! ```
//!
//! Relative paths are resolved against the manifest's directory. Unknown
//! fields anywhere in the document are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::Strategy;
use crate::error::{Error, Result};
use crate::nifti;
use crate::volume::{TractLabelMap, Volume3D};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub image: PathBuf,
    pub labels: Vec<LabelPath>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelPath {
    pub tract: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Provenance {
    Real,
    Synthetic {
        strategy: Strategy,
        seed: u64,
        sample_index: usize,
    },
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            entries: Vec::new(),
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.sample_id.is_empty() {
                return Err(Error::Schema(format!("entry {i} has an empty sample_id")));
            }
            if self.entries[..i].iter().any(|p| p.sample_id == e.sample_id) {
                return Err(Error::Schema(format!("duplicate sample_id {:?}", e.sample_id)));
            }
            if e.image.as_os_str().is_empty() {
                return Err(Error::Schema(format!("{}: empty image path", e.sample_id)));
            }
            for (j, l) in e.labels.iter().enumerate() {
                if l.tract.is_empty() || l.path.as_os_str().is_empty() {
                    return Err(Error::Schema(format!("{}: label {j} lacks a tract or path", e.sample_id)));
                }
                if e.labels[..j].iter().any(|p| p.tract == l.tract) {
                    return Err(Error::Schema(format!("{}: tract {:?} listed twice", e.sample_id, l.tract)));
                }
            }
        }
        Ok(())
    }

    pub fn has_synthetic(&self) -> bool {
        self.entries
            .iter()
            .any(|e| matches!(e.provenance, Provenance::Synthetic { .. }))
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    m.validate()?;
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A manifest together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: DatasetManifest,
    pub base: PathBuf,
}

impl LoadedManifest {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest = read_manifest(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { manifest, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn load_image(&self, entry: &ManifestEntry) -> Result<Volume3D> {
        nifti::read_volume(self.resolve(&entry.image))
    }

    pub fn load_labels(&self, entry: &ManifestEntry) -> Result<TractLabelMap> {
        let pairs: Vec<(String, PathBuf)> = entry
            .labels
            .iter()
            .map(|l| (l.tract.clone(), self.resolve(&l.path)))
            .collect();
        nifti::read_label_map(&pairs)
    }

    pub fn entry(&self, sample_id: &str) -> Option<&ManifestEntry> {
        self.manifest.entries.iter().find(|e| e.sample_id == sample_id)
    }
}

/// Path of `target` relative to `base` when it lies underneath it.
pub fn relative_to(target: &Path, base: &Path) -> PathBuf {
    target.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| target.to_path_buf())
}
