//! Dataset manifest: a JSON file describing modality shapes, label names,
//! and the binary split files next to it.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use mmer_core::model::DataDims;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    Aligned,
    Unaligned,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModalityShape {
    /// Feature dimension `d_m`.
    pub dim: usize,
    /// Sequence length (exact when aligned, maximum when unaligned).
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModalityShapes {
    pub visual: ModalityShape,
    pub audio: ModalityShape,
    pub text: ModalityShape,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub file: String,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub alignment: Alignment,
    pub label_names: Vec<String>,
    pub instance_count: usize,
    pub modalities: ModalityShapes,
    pub splits: Vec<SplitEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.label_names.is_empty() {
            return Err(contract("manifest: label_names must not be empty"));
        }
        let unique: BTreeSet<&String> = self.label_names.iter().collect();
        if unique.len() != self.label_names.len() {
            return Err(contract("manifest: label_names must be unique"));
        }
        for (name, s) in [
            ("visual", self.modalities.visual),
            ("audio", self.modalities.audio),
            ("text", self.modalities.text),
        ] {
            if s.dim == 0 || s.len == 0 {
                return Err(contract(format!(
                    "manifest: {name} dim/len must be positive"
                )));
            }
        }
        if self.alignment == Alignment::Aligned {
            let (v, a, t) = (
                self.modalities.visual.len,
                self.modalities.audio.len,
                self.modalities.text.len,
            );
            if v != a || a != t {
                return Err(contract(format!(
                    "manifest: aligned dataset with unequal lengths {v}/{a}/{t}"
                )));
            }
        }
        if self.splits.is_empty() {
            return Err(contract("manifest: at least one split required"));
        }
        let split_names: BTreeSet<&String> = self.splits.iter().map(|s| &s.name).collect();
        if split_names.len() != self.splits.len() {
            return Err(contract("manifest: split names must be unique"));
        }
        let total: usize = self.splits.iter().map(|s| s.count).sum();
        if total != self.instance_count {
            return Err(contract(format!(
                "manifest: split counts sum to {total}, instance_count says {}",
                self.instance_count
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> DataDims {
        DataDims {
            visual_dim: self.modalities.visual.dim,
            audio_dim: self.modalities.audio.dim,
            text_dim: self.modalities.text.dim,
            visual_len: self.modalities.visual.len,
            audio_len: self.modalities.audio.len,
            text_len: self.modalities.text.len,
            label_count: self.label_names.len(),
        }
    }

    pub fn split(&self, name: &str) -> Result<&SplitEntry> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| contract(format!("manifest has no split named {name:?}")))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json + "\n")?;
        Ok(path)
    }
}

/// Accepts either the manifest file itself or its directory.
pub fn manifest_path(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        arg.join(MANIFEST_FILE)
    } else {
        arg.to_path_buf()
    }
}

pub fn load_manifest(arg: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let path = manifest_path(arg);
    let text = fs::read_to_string(&path)
        .map_err(|e| contract(format!("cannot read manifest {}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((manifest, dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_manifest() -> DatasetManifest {
        DatasetManifest {
            name: "toy".into(),
            alignment: Alignment::Aligned,
            label_names: (0..3).map(|i| format!("label{i}")).collect(),
            instance_count: 6,
            modalities: ModalityShapes {
                visual: ModalityShape { dim: 2, len: 4 },
                audio: ModalityShape { dim: 3, len: 4 },
                text: ModalityShape { dim: 3, len: 4 },
            },
            splits: vec![
                SplitEntry {
                    name: "train".into(),
                    file: "train.bin".into(),
                    count: 4,
                },
                SplitEntry {
                    name: "valid".into(),
                    file: "valid.bin".into(),
                    count: 2,
                },
            ],
        }
    }


    #[test]
    fn full_dataset_statistics_validate() {
        let m = DatasetManifest {
            name: "cmu-mosei-aligned".into(),
            alignment: Alignment::Aligned,
            label_names: ["angry", "disgust", "fear", "happy", "sad", "surprise"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            instance_count: 22_856,
            modalities: ModalityShapes {
                visual: ModalityShape { dim: 35, len: 60 },
                audio: ModalityShape { dim: 74, len: 60 },
                text: ModalityShape { dim: 300, len: 60 },
            },
            splits: vec![
                SplitEntry { name: "train".into(), file: "train.bin".into(), count: 16_326 },
                SplitEntry { name: "valid".into(), file: "valid.bin".into(), count: 1_871 },
                SplitEntry { name: "test".into(), file: "test.bin".into(), count: 4_659 },
            ],
        };
        m.validate().unwrap();
        let dims = m.dims();
        assert_eq!(dims.label_count, 6);
        assert_eq!(dims.text_dim, 300);

        // the unaligned variant keeps native maxima
        let mut unaligned = m;
        unaligned.alignment = Alignment::Unaligned;
        unaligned.modalities.visual.len = 500;
        unaligned.modalities.audio.len = 500;
        unaligned.modalities.text.len = 50;
        unaligned.validate().unwrap();
    }

    #[test]
    fn valid_manifest_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest();
        let path = m.save(dir.path()).unwrap();
        let (loaded, loaded_dir) = load_manifest(&path).unwrap();
        assert_eq!(loaded.name, "toy");
        assert_eq!(loaded_dir, dir.path());
        // loading by directory works too
        let (by_dir, _) = load_manifest(dir.path()).unwrap();
        assert_eq!(by_dir.instance_count, 6);
    }

    #[test]
    fn split_sum_mismatch_is_rejected() {
        let mut m = toy_manifest();
        m.instance_count = 7;
        assert!(m.validate().is_err());
    }

    #[test]
    fn duplicate_labels_are_rejected() {
        let mut m = toy_manifest();
        m.label_names[1] = m.label_names[0].clone();
        assert!(m.validate().is_err());
    }

    #[test]
    fn aligned_manifest_requires_equal_lengths() {
        let mut m = toy_manifest();
        m.modalities.text.len = 9;
        assert!(m.validate().is_err());
        m.alignment = Alignment::Unaligned;
        assert!(m.validate().is_ok());
    }
}
