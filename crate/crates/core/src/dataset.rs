//! Dataset directories: a JSON manifest assigning each volume to a split, one
//! `SQIV` file per volume, and a shared label CSV.
//!
//! ```text
//! <root>/manifest.json
//! <root>/labels.csv
//! <root>/volumes/<id>.sqiv
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{load_labels, save_labels, KeySet, KeySliceLabel, LabelSet};
use crate::synthetic::{generate_subjects, split_counts, SyntheticConfig};
use crate::volume::{load_volume, save_volume, SliceSequence, Source};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const VOLUME_DIR: &str = "volumes";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Real,
    Synthetic,
}

impl From<SourceTag> for Source {
    fn from(t: SourceTag) -> Self {
        match t {
            SourceTag::Real => Source::Real,
            SourceTag::Synthetic => Source::Synthetic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub source: SourceTag,
    pub n_slices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub volumes: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses and validates manifest JSON.
    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Rejects unknown versions and ids listed more than once.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        let mut seen = HashSet::new();
        for v in &self.volumes {
            if !seen.insert(v.id.as_str()) {
                return Err(Error::SplitViolation(format!("volume `{}` listed more than once", v.id)));
            }
            if v.id.is_empty() || v.id.contains(['/', '\\']) || v.id.starts_with('.') {
                return Err(Error::Malformed(format!("invalid volume id `{}`", v.id)));
            }
        }
        Ok(())
    }
}

/// A volume with its key labels and split.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub volume: SliceSequence,
    pub labels: Vec<KeySliceLabel>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct DatasetDir {
    root: PathBuf,
    manifest: Manifest,
    labels: LabelSet,
}

impl DatasetDir {
    pub fn open(root: &Path, keys: &KeySet) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = Manifest::from_json(&text)?;
        let registry: HashMap<String, usize> = manifest.volumes.iter().map(|v| (v.id.clone(), v.n_slices)).collect();
        let labels = load_labels(&root.join(LABELS_FILE), keys, Some(&registry))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            labels,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.manifest
            .volumes
            .iter()
            .filter(|v| v.split == split)
            .map(|v| v.id.as_str())
            .collect()
    }

    pub fn volume_path(&self, id: &str) -> PathBuf {
        self.root.join(VOLUME_DIR).join(format!("{id}.sqiv"))
    }

    /// Loads every volume of one split, in manifest order.
    pub fn load(&self, split: Split) -> Result<Vec<LabeledVolume>> {
        self.manifest
            .volumes
            .iter()
            .filter(|v| v.split == split)
            .map(|entry| {
                let mut volume = load_volume(&self.volume_path(&entry.id))?;
                if volume.len() != entry.n_slices {
                    return Err(Error::InvalidVolume(format!(
                        "`{}` has {} slices, manifest says {}",
                        entry.id,
                        volume.len(),
                        entry.n_slices
                    )));
                }
                volume.source = entry.source.into();
                let labels = self.labels.get(&entry.id).cloned().unwrap_or_default();
                Ok(LabeledVolume {
                    volume,
                    labels,
                    split,
                })
            })
            .collect()
    }
}

/// Generates a synthetic dataset and writes it to `root`. Subjects are
/// assigned to train, validation and test in generation order.
pub fn write_synthetic_dataset(root: &Path, cfg: &SyntheticConfig, keys: &KeySet) -> Result<Manifest> {
    let subjects = generate_subjects(cfg, keys)?;
    let [n_train, n_val, _] = split_counts(subjects.len(), cfg.split);
    let vol_dir = root.join(VOLUME_DIR);
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut labels = LabelSet::new();
    let mut volumes = Vec::with_capacity(subjects.len());
    for (i, s) in subjects.iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let id = s.volume.volume_id.clone();
        save_volume(&s.volume, &vol_dir.join(format!("{id}.sqiv")))?;
        labels.insert(id.clone(), s.labels.clone());
        volumes.push(ManifestEntry {
            id,
            split,
            source: SourceTag::Synthetic,
            n_slices: s.volume.len(),
        });
    }
    save_labels(&root.join(LABELS_FILE), &labels)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        volumes,
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
