//! On-disk phantom datasets: `images/`, `labels/` and a `manifest.json`
//! listing every case and the train/val/test split.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpseg_core::phantom::{generate_dataset, PhantomSpec, Split};
use tpseg_core::{LabelVolume, Volume};

use crate::error::{Error, Result};
use crate::volume_io::{load_labels, load_volume, save_labels, save_volume, Dtype};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub name: String,
    /// Paths relative to the dataset directory.
    pub image: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub base_seed: u64,
    pub phantom: PhantomSpec,
    pub cases: Vec<CaseEntry>,
    pub split: Split,
}

pub struct Case {
    pub name: String,
    pub volume: Volume,
    pub labels: LabelVolume,
}

impl DatasetManifest {
    pub fn entry(&self, name: &str) -> Result<&CaseEntry> {
        self.cases
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Config(format!("case {name:?} is not in the dataset manifest")))
    }
}

/// Generates `n` phantom cases into `dir` and writes the manifest.
pub fn write_phantom_dataset(
    dir: &Path,
    n: usize,
    base_seed: u64,
    phantom: &PhantomSpec,
) -> Result<DatasetManifest> {
    let (cases, split) = generate_dataset(n, base_seed, phantom)?;
    let mut entries = Vec::with_capacity(cases.len());
    for case in &cases {
        let entry = CaseEntry {
            name: case.name.clone(),
            image: format!("images/{}.vol.json", case.name),
            label: format!("labels/{}.vol.json", case.name),
        };
        save_volume(&dir.join(&entry.image), &case.volume, Dtype::I16)?;
        save_labels(&dir.join(&entry.label), &case.labels)?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        base_seed,
        phantom: *phantom,
        cases: entries,
        split,
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::corrupt(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(Error::io(&path))?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

/// Reads the manifest; a missing manifest is a configuration error.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(dir);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "dataset manifest {} does not exist",
            path.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e))
}

pub fn load_case(dir: &Path, manifest: &DatasetManifest, name: &str) -> Result<Case> {
    let entry = manifest.entry(name)?;
    let volume = load_volume(&dir.join(&entry.image))?;
    let labels = load_labels(&dir.join(&entry.label))?;
    if volume.dims() != labels.dims() {
        return Err(Error::invalid(
            &dir.join(&entry.label),
            format!(
                "label dims {:?} differ from image dims {:?}",
                labels.dims(),
                volume.dims()
            ),
        ));
    }
    Ok(Case {
        name: name.to_string(),
        volume,
        labels,
    })
}
