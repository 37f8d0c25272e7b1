//! Volume files: a JSON header `<name>.vol.json` next to a little-endian,
//! x-fastest raw payload `<name>.vol.raw`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpseg_core::{LabelVolume, Volume};

use crate::error::{Error, Result};

pub const MAGIC: &str = "TPSEG-VOL";
pub const VERSION: u64 = 1;
pub const ORDER: &str = "x-fastest";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    I16,
    F32,
    U8,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::I16 => "i16",
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Dtype::I16, Dtype::F32, Dtype::U8]
            .into_iter()
            .find(|d| d.name() == s)
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::I16 => 2,
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub magic: String,
    pub version: u64,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub order: String,
}

/// `(header, payload)` paths for a volume named by `path`, which may carry
/// the `.vol.json` suffix or none.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".vol.json")
        .or_else(|| s.strip_suffix(".vol.raw"))
        .unwrap_or(&s);
    (
        PathBuf::from(format!("{stem}.vol.json")),
        PathBuf::from(format!("{stem}.vol.raw")),
    )
}

fn write_pair(
    path: &Path,
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: Dtype,
    payload: &[u8],
) -> Result<()> {
    let (header_path, raw_path) = volume_paths(path);
    if let Some(dir) = header_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let header = VolumeHeader {
        magic: MAGIC.into(),
        version: VERSION,
        dims,
        spacing_mm: spacing,
        dtype: dtype.name().into(),
        order: ORDER.into(),
    };
    fs::write(&raw_path, payload).map_err(Error::io(&raw_path))?;
    let mut f = fs::File::create(&header_path).map_err(Error::io(&header_path))?;
    serde_json::to_writer_pretty(&mut f, &header).map_err(|e| Error::corrupt(&header_path, e))?;
    f.write_all(b"\n").map_err(Error::io(&header_path))
}

/// Writes an intensity or probability volume. `i16` and `u8` require
/// integral values inside the type's range; `f32` stores each value rounded
/// to single precision.
pub fn save_volume(path: &Path, volume: &Volume, dtype: Dtype) -> Result<()> {
    let data = volume.data();
    let mut payload = Vec::with_capacity(data.len() * dtype.size());
    for (i, &v) in data.iter().enumerate() {
        let fits = |lo: f64, hi: f64| v.fract() == 0.0 && (lo..=hi).contains(&v);
        match dtype {
            Dtype::I16 if fits(i16::MIN.into(), i16::MAX.into()) => {
                payload.extend((v as i16).to_le_bytes())
            }
            Dtype::U8 if fits(0.0, 255.0) => payload.push(v as u8),
            Dtype::F32 => payload.extend((v as f32).to_le_bytes()),
            _ => {
                return Err(Error::invalid(
                    path,
                    format!(
                        "voxel {i} value {v} is not representable as {}",
                        dtype.name()
                    ),
                ))
            }
        }
    }
    write_pair(path, volume.dims(), volume.spacing(), dtype, &payload)
}

/// Writes a binary label volume as `u8`, rejecting values other than 0 and 1.
pub fn save_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    if let Some(i) = labels.data().iter().position(|&v| v > 1) {
        return Err(Error::invalid(
            path,
            format!(
                "label voxel {i} has value {}, expected 0 or 1",
                labels.data()[i]
            ),
        ));
    }
    write_pair(
        path,
        labels.dims(),
        labels.spacing(),
        Dtype::U8,
        labels.data(),
    )
}

pub fn read_header(path: &Path) -> Result<(VolumeHeader, Dtype)> {
    let (header_path, _) = volume_paths(path);
    let text = fs::read_to_string(&header_path).map_err(Error::io(&header_path))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(&header_path, e))?;
    if header.magic != MAGIC {
        return Err(Error::BadMagic {
            path: header_path,
            found: header.magic,
            expected: MAGIC,
        });
    }
    if header.version != VERSION {
        return Err(Error::Version {
            path: header_path,
            found: header.version,
            expected: VERSION,
        });
    }
    let Some(dtype) = Dtype::parse(&header.dtype) else {
        return Err(Error::UnknownDtype {
            path: header_path,
            dtype: header.dtype,
        });
    };
    if header.order != ORDER {
        return Err(Error::corrupt(
            &header_path,
            format!("unsupported voxel order {:?}", header.order),
        ));
    }
    Ok((header, dtype))
}

fn read_payload(path: &Path) -> Result<(VolumeHeader, Dtype, Vec<u8>)> {
    let (header, dtype) = read_header(path)?;
    let (_, raw_path) = volume_paths(path);
    let bytes = fs::read(&raw_path).map_err(Error::io(&raw_path))?;
    let expected = header.dims.iter().product::<usize>() * dtype.size();
    if bytes.len() != expected {
        return Err(Error::Integrity {
            path: raw_path,
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok((header, dtype, bytes))
}

/// Loads any volume as real values.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let (header, dtype, bytes) = read_payload(path)?;
    let data = match dtype {
        Dtype::I16 => bytes
            .chunks_exact(2)
            .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect(),
        Dtype::U8 => bytes.iter().map(|&b| f64::from(b)).collect(),
    };
    Volume::new(header.dims, header.spacing_mm, data).map_err(|e| Error::invalid(path, e))
}

/// Loads a `u8` label volume with values in {0, 1}.
pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let (header, dtype, bytes) = read_payload(path)?;
    if dtype != Dtype::U8 {
        return Err(Error::invalid(
            path,
            format!("label volumes must be u8, found {}", dtype.name()),
        ));
    }
    LabelVolume::new(header.dims, header.spacing_mm, bytes).map_err(|e| Error::invalid(path, e))
}
