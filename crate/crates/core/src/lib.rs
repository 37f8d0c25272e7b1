//! Tri-planar 2.5D volumetric segmentation.
//!
//! The crate is `no_std` (with `alloc`) and carries all numerical parts of the
//! pipeline: a small reverse-mode tensor engine, the encoder-decoder network,
//! soft-Dice training with Adam, slab extraction and reassembly along the three
//! orthogonal planes, fusion of the per-plane predictions and Dice statistics,
//! plus a synthetic phantom generator with exact ground truth.
//!
//! File formats, configuration and the command-line front end live in the
//! `tpseg` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod phantom;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};

pub use fusion::{
    dice_3d, fuse, per_slice_dice, DiceReport, FusionKind, FusionPolicy, SliceDice, Summary,
};
pub use model::{UNetConfig, UNetModel};
pub use tensor::{Graph, Mode, Tensor, Var};
pub use training::{AdamConfig, AdamState, TrainSpec};
pub use volume::{Axis, CropOrigin, LabelVolume, PlaneConfig, Volume};
