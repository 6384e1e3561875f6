//! Dataset manifests: (image, label) volume pairs tagged with their split.
//!
//! Manifest format: one `image_path<TAB>label_path<TAB>split` line per pair,
//! paths relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{load_volume, Volume};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetHandle {
    /// Read the manifest under `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&manifest).map_err(|e| {
            Error::data(format!("cannot read {}: {e}", manifest.display()))
        })?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (image, label, split) = match (parts.next(), parts.next(), parts.next()) {
                (Some(i), Some(l), Some(s)) => (i, l, s),
                _ => {
                    return Err(Error::data(format!(
                        "manifest line {} is not image<TAB>label<TAB>split",
                        lineno + 1
                    )))
                }
            };
            entries.push(DatasetEntry {
                image: image.into(),
                label: label.into(),
                split: Split::parse(split)?,
            });
        }
        if entries.is_empty() {
            return Err(Error::data("manifest lists no samples".to_string()));
        }
        Ok(DatasetHandle {
            root: dir.to_path_buf(),
            entries,
        })
    }

    pub fn save_manifest(&self) -> Result<()> {
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&format!(
                "{}\t{}\t{}\n",
                e.image.display(),
                e.label.display(),
                e.split.as_str()
            ));
        }
        fs::write(self.root.join(MANIFEST_NAME), text)?;
        Ok(())
    }

    pub fn split_entries(&self, split: Split) -> Vec<&DatasetEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// One sample held in memory.
pub struct LoadedSample {
    pub image: Volume,
    pub label: Volume,
}

/// Load every pair of a split, checking that image and label geometry agree
/// and that labels are binary per-class masks.
pub fn load_split(handle: &DatasetHandle, split: Split) -> Result<Vec<LoadedSample>> {
    let mut out = Vec::new();
    for e in handle.split_entries(split) {
        let image = load_volume(&handle.root.join(&e.image))?;
        let label = load_volume(&handle.root.join(&e.label))?;
        if (image.height(), image.width(), image.depth())
            != (label.height(), label.width(), label.depth())
        {
            return Err(Error::data(format!(
                "{}: image dims {:?} and label dims {:?} disagree",
                e.image.display(),
                image.dims,
                label.dims
            )));
        }
        let lbl = label.u8_data()?;
        if lbl.iter().any(|&v| v > 1) {
            return Err(Error::data(format!(
                "{}: label voxels must be 0 or 1",
                e.label.display()
            )));
        }
        out.push(LoadedSample { image, label });
    }
    Ok(out)
}
