//! The run configuration: one JSON document holding every setting of an
//! experiment. A file only needs the fields it changes; the rest come from
//! the full-scale or desk-scale preset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tpseg_core::{AdamConfig, Axis, FusionKind, FusionPolicy, PlaneConfig, TrainSpec, UNetConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Planes {
    pub axial: PlaneConfig,
    pub sagittal: PlaneConfig,
    pub coronal: PlaneConfig,
}

impl Planes {
    pub fn get(&self, axis: Axis) -> &PlaneConfig {
        match axis {
            Axis::Axial => &self.axial,
            Axis::Sagittal => &self.sagittal,
            Axis::Coronal => &self.coronal,
        }
    }
}

/// Network shape shared by the three planes; each plane's input channel count
/// is its slab thickness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub channel_growth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    /// Checkpoint every this many epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/weights`.
    pub weights_dir: Option<PathBuf>,
    pub planes: Planes,
    pub network: NetworkConfig,
    pub train: TrainSettings,
    pub fusion: FusionPolicy,
    /// HU window mapped to [0, 1] before slab extraction.
    pub intensity_window: (f64, f64),
    /// Source of all randomness: phantom generation, initialization and
    /// sample order.
    pub seed: u64,
}

fn axis_index(axis: Axis) -> u64 {
    Axis::ALL.iter().position(|&a| a == axis).unwrap_or(0) as u64
}

impl RunConfig {
    pub fn full_scale() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            weights_dir: None,
            planes: Planes {
                axial: PlaneConfig::full_scale(Axis::Axial),
                sagittal: PlaneConfig::full_scale(Axis::Sagittal),
                coronal: PlaneConfig::full_scale(Axis::Coronal),
            },
            network: NetworkConfig {
                depth: 4,
                base_channels: 64,
                channel_growth: 2,
            },
            train: TrainSettings {
                epochs: 30,
                checkpoint_every: 0,
                adam: AdamConfig::default(),
            },
            fusion: FusionPolicy::default(),
            intensity_window: tpseg_core::volume::DEFAULT_HU_WINDOW,
            seed: 0,
        }
    }

    /// Small planes and network with a raised learning rate, sized for a
    /// CPU run on 64-cube phantoms.
    pub fn desk_scale() -> Self {
        Self {
            planes: Planes {
                axial: PlaneConfig::desk_scale(Axis::Axial),
                sagittal: PlaneConfig::desk_scale(Axis::Sagittal),
                coronal: PlaneConfig::desk_scale(Axis::Coronal),
            },
            network: NetworkConfig {
                depth: 2,
                base_channels: 8,
                channel_growth: 2,
            },
            train: TrainSettings {
                epochs: 15,
                checkpoint_every: 0,
                adam: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
            },
            ..Self::full_scale()
        }
    }

    /// Preset, overlaid with the JSON document at `file` if given.
    pub fn resolve(desk_scale: bool, file: Option<&Path>) -> Result<Self> {
        let preset = if desk_scale {
            Self::desk_scale()
        } else {
            Self::full_scale()
        };
        let Some(path) = file else {
            return Ok(preset);
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let overlay: Value = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("config {} is not valid JSON: {e}", path.display()))
        })?;
        let mut merged = serde_json::to_value(&preset).expect("config serializes");
        merge(&mut merged, overlay);
        serde_json::from_value(merged)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn unet(&self, axis: Axis) -> UNetConfig {
        UNetConfig {
            in_slices: self.planes.get(axis).slab,
            depth: self.network.depth,
            base_channels: self.network.base_channels,
            channel_growth: self.network.channel_growth,
        }
    }

    pub fn init_seed(&self, axis: Axis) -> u64 {
        self.seed
            .wrapping_mul(31)
            .wrapping_add(1 + axis_index(axis))
    }

    pub fn train_spec(&self, axis: Axis) -> TrainSpec {
        TrainSpec {
            epochs: self.train.epochs,
            plane: *self.planes.get(axis),
            shuffle_seed: self
                .seed
                .wrapping_mul(31)
                .wrapping_add(11 + axis_index(axis)),
            checkpoint_every: self.train.checkpoint_every,
            adam: self.train.adam,
        }
    }

    /// Checks every sub-configuration. Path existence is checked by the
    /// commands that read them.
    pub fn validate(&self) -> Result<()> {
        for axis in Axis::ALL {
            let plane = self.planes.get(axis);
            if plane.axis != axis {
                return Err(Error::Config(format!(
                    "planes.{axis} has axis {}",
                    plane.axis
                )));
            }
            let unet = self.unet(axis);
            unet.validate()?;
            self.train_spec(axis).validate()?;
            let d = unet.size_divisor();
            if !plane.crop_h.is_multiple_of(d) || !plane.crop_w.is_multiple_of(d) {
                return Err(Error::Config(format!(
                    "{axis} crop {}x{} must be divisible by {d} for depth {}",
                    plane.crop_h, plane.crop_w, self.network.depth
                )));
            }
        }
        self.fusion.validate()?;
        let (lo, hi) = self.intensity_window;
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::Config(format!(
                "intensity window ({lo}, {hi}) must satisfy lo < hi"
            )));
        }
        Ok(())
    }

    pub fn weights_dir(&self) -> PathBuf {
        self.weights_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("weights"))
    }

    pub fn weights_path(&self, axis: Axis) -> PathBuf {
        self.weights_dir().join(format!("{axis}.json"))
    }

    pub fn checkpoint_path(&self, axis: Axis, epoch: usize) -> PathBuf {
        self.weights_dir()
            .join(format!("{axis}.epoch{epoch:03}.json"))
    }

    pub fn loss_log_path(&self, axis: Axis) -> PathBuf {
        self.out_dir.join("logs").join(format!("{axis}_loss.csv"))
    }

    pub fn prediction_path(&self, case: &str, axis: Axis) -> PathBuf {
        self.out_dir
            .join("predictions")
            .join(format!("{case}_{axis}"))
    }

    pub fn fused_path(&self, case: &str, kind: &FusionKind) -> PathBuf {
        self.out_dir
            .join("fused")
            .join(format!("{case}_{}", kind.name()))
    }

    pub fn report_path(&self, case: &str, kind: &FusionKind) -> PathBuf {
        self.out_dir
            .join("reports")
            .join(format!("{case}_{}.csv", kind.name()))
    }

    pub fn summary_path(&self, kind: &FusionKind) -> PathBuf {
        self.out_dir
            .join("reports")
            .join(format!("summary_{}.json", kind.name()))
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key, any
/// other value replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
