//! Model weights: a JSON manifest plus a companion payload of little-endian
//! `f32` values. Offsets in the manifest are relative to the payload start.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpseg_core::model::NamedTensor;
use tpseg_core::{UNetConfig, UNetModel};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub format_version: u64,
    pub config: UNetConfig,
    pub running_stats_initialized: bool,
    /// File name of the payload, in the manifest's directory.
    pub payload: String,
    pub payload_length: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Payload path belonging to the manifest at `path`.
pub fn payload_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

pub fn save_weights(model: &UNetModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for t in model.export_tensors() {
        let offset = payload.len() as u64;
        for &v in &t.data {
            payload.extend((v as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: t.name,
            shape: t.shape,
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let bin = payload_path(path);
    let manifest = WeightsManifest {
        format_version: FORMAT_VERSION,
        config: *model.config(),
        running_stats_initialized: model.running_stats_initialized(),
        payload: bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        payload_length: payload.len() as u64,
        tensors,
    };
    fs::write(&bin, &payload).map_err(Error::io(&bin))?;
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::corrupt(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub fn read_manifest(path: &Path) -> Result<WeightsManifest> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64);
    match version {
        Some(FORMAT_VERSION) => {}
        Some(found) => {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(Error::corrupt(path, "missing format_version")),
    }
    serde_json::from_value(value).map_err(|e| Error::corrupt(path, e))
}

/// Loads a model, checking the payload length and every tensor shape against
/// the manifest's configuration.
pub fn load_weights(path: &Path) -> Result<UNetModel> {
    let manifest = read_manifest(path)?;
    let bin = path
        .parent()
        .unwrap_or(Path::new(""))
        .join(&manifest.payload);
    let payload = fs::read(&bin).map_err(Error::io(&bin))?;
    if payload.len() as u64 != manifest.payload_length {
        return Err(Error::Integrity {
            path: bin,
            expected: manifest.payload_length,
            actual: payload.len() as u64,
        });
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= manifest.payload_length);
        let Some(end) = end.filter(|_| e.length % 4 == 0) else {
            return Err(Error::corrupt(
                path,
                format!(
                    "tensor '{}' range {}+{} is invalid",
                    e.name, e.offset, e.length
                ),
            ));
        };
        let data = payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        tensors.push(NamedTensor {
            name: e.name,
            shape: e.shape,
            data,
        });
    }
    Ok(UNetModel::from_tensors(
        manifest.config,
        manifest.running_stats_initialized,
        tensors,
    )?)
}

/// Checks that a weights file exists, naming the path otherwise.
pub fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "weights file {} does not exist; train this plane first",
            path.display()
        )))
    }
}
