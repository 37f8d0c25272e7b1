//! Volumes, intensity windowing, slab extraction along the three orthogonal
//! planes, and reassembly of per-slice predictions into 3D.
//!
//! Voxels are stored x-fastest: `index = x + nx * (y + ny * z)`. The axis
//! convention is x = sagittal index, y = coronal index, z = axial index.
//! In-plane images are laid out as follows:
//!
//! | plane    | slice index | rows | cols |
//! |----------|-------------|------|------|
//! | axial    | z           | y    | x    |
//! | sagittal | x           | z    | y    |
//! | coronal  | y           | z    | x    |

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Axis {
    Axial,
    Sagittal,
    Coronal,
}

impl Axis {
    /// Fixed reporting order.
    pub const ALL: [Axis; 3] = [Axis::Axial, Axis::Sagittal, Axis::Coronal];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Axial => "axial",
            Axis::Sagittal => "sagittal",
            Axis::Coronal => "coronal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Number of slices along this axis.
    pub fn extent(self, dims: [usize; 3]) -> usize {
        match self {
            Axis::Axial => dims[2],
            Axis::Sagittal => dims[0],
            Axis::Coronal => dims[1],
        }
    }

    /// `(rows, cols)` of one slice.
    pub fn slice_shape(self, dims: [usize; 3]) -> (usize, usize) {
        let [nx, ny, nz] = dims;
        match self {
            Axis::Axial => (ny, nx),
            Axis::Sagittal => (nz, ny),
            Axis::Coronal => (nz, nx),
        }
    }

    /// Linear voxel index of pixel `(row, col)` of slice `k`.
    pub fn voxel(self, dims: [usize; 3], k: usize, row: usize, col: usize) -> usize {
        let (x, y, z) = match self {
            Axis::Axial => (col, row, k),
            Axis::Sagittal => (k, col, row),
            Axis::Coronal => (col, k, row),
        };
        x + dims[0] * (y + dims[1] * z)
    }
}

impl core::fmt::Display for Axis {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_geometry(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Data(format!(
            "volume dims must be positive, got {dims:?}"
        )));
    }
    if !spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
        return Err(Error::Data(format!(
            "voxel spacing must be positive, got {spacing:?}"
        )));
    }
    let n = dims.iter().product::<usize>();
    if n != len {
        return Err(Error::shape("volume", &dims, &[len]));
    }
    Ok(())
}

/// Scalar volume (raw HU or normalized/probability values).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f64) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    /// Full slice `k` along `axis`, row-major.
    pub fn slice(&self, axis: Axis, k: usize) -> Vec<f64> {
        let (rows, cols) = axis.slice_shape(self.dims);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(self.data[axis.voxel(self.dims, k, r, c)]);
            }
        }
        out
    }
}

/// Binary mask; every voxel is 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        let v = Self {
            dims,
            spacing,
            data,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Raw access; [`validate`](Self::validate) re-checks the binary invariant.
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn validate(&self) -> Result<()> {
        match self.data.iter().position(|&v| v > 1) {
            Some(i) => Err(Error::Data(format!(
                "label volume voxel {i} has value {}, expected 0 or 1",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn slice(&self, axis: Axis, k: usize) -> Vec<u8> {
        let (rows, cols) = axis.slice_shape(self.dims);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(self.data[axis.voxel(self.dims, k, r, c)]);
            }
        }
        out
    }
}

/// Clamps to `[lo, hi]` and maps affinely onto `[0, 1]`.
pub fn normalize_intensity(volume: &Volume, window: (f64, f64)) -> Result<Volume> {
    let (lo, hi) = window;
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(Error::precondition(
            "normalize_intensity",
            format!("window lower bound {lo} must be below upper bound {hi}"),
        ));
    }
    let data = volume
        .data
        .iter()
        .map(|&v| (v.clamp(lo, hi) - lo) / (hi - lo))
        .collect();
    Volume::new(volume.dims, volume.spacing, data)
}

pub const DEFAULT_HU_WINDOW: (f64, f64) = (-200.0, 1500.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CropOrigin {
    Center,
    At { row: usize, col: usize },
}

/// One orthogonal channel: the slicing axis, the odd slab thickness `s` and
/// the in-plane crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlaneConfig {
    pub axis: Axis,
    pub slab: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub crop_origin: CropOrigin,
}

impl PlaneConfig {
    /// Full-resolution channel settings: axial 512x512 with 3 slices, sagittal
    /// 400x400 with 7, coronal 400x400 with 9.
    pub fn full_scale(axis: Axis) -> Self {
        let (slab, h, w) = match axis {
            Axis::Axial => (3, 512, 512),
            Axis::Sagittal => (7, 400, 400),
            Axis::Coronal => (9, 400, 400),
        };
        Self {
            axis,
            slab,
            crop_h: h,
            crop_w: w,
            crop_origin: CropOrigin::Center,
        }
    }

    /// CPU-sized settings for 64^3 phantoms.
    pub fn desk_scale(axis: Axis) -> Self {
        let (slab, h, w) = match axis {
            Axis::Axial => (3, 64, 64),
            Axis::Sagittal | Axis::Coronal => (5, 48, 48),
        };
        Self {
            axis,
            slab,
            crop_h: h,
            crop_w: w,
            crop_origin: CropOrigin::Center,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slab == 0 || self.slab.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{} plane: slab thickness must be odd and >= 1, got {}",
                self.axis, self.slab
            )));
        }
        if self.crop_h == 0 || self.crop_w == 0 {
            return Err(Error::Config(format!(
                "{} plane: crop dims must be positive",
                self.axis
            )));
        }
        Ok(())
    }

    /// Top-left corner of the crop inside a slice of a `dims` volume.
    pub fn crop_window(&self, dims: [usize; 3]) -> Result<(usize, usize)> {
        self.validate()?;
        let (rows, cols) = self.axis.slice_shape(dims);
        let origin = match self.crop_origin {
            CropOrigin::Center if self.crop_h <= rows && self.crop_w <= cols => {
                ((rows - self.crop_h) / 2, (cols - self.crop_w) / 2)
            }
            CropOrigin::Center => (0, 0),
            CropOrigin::At { row, col } => (row, col),
        };
        if origin.0 + self.crop_h > rows || origin.1 + self.crop_w > cols {
            return Err(Error::precondition(
                "crop",
                format!(
                    "{} crop {}x{} at {:?} exceeds slice extent {}x{}",
                    self.axis, self.crop_h, self.crop_w, origin, rows, cols
                ),
            ));
        }
        Ok(origin)
    }
}

/// Source slice for slab channel `c` centred on `index`, with edge
/// replication at the volume boundary.
pub fn slab_source(index: usize, channel: usize, slab: usize, extent: usize) -> usize {
    let offset = channel as isize - (slab as isize - 1) / 2;
    (index as isize + offset).clamp(0, extent as isize - 1) as usize
}

fn crop_slice<T: Copy>(
    data: &[T],
    dims: [usize; 3],
    plane: &PlaneConfig,
    origin: (usize, usize),
    k: usize,
    out: &mut Vec<T>,
) {
    for r in 0..plane.crop_h {
        for c in 0..plane.crop_w {
            out.push(data[plane.axis.voxel(dims, k, origin.0 + r, origin.1 + c)]);
        }
    }
}

fn check_index(plane: &PlaneConfig, dims: [usize; 3], index: usize) -> Result<()> {
    let extent = plane.axis.extent(dims);
    if index >= extent {
        return Err(Error::precondition(
            "extract_slab",
            format!("{} index {index} outside 0..{extent}", plane.axis),
        ));
    }
    Ok(())
}

/// The `s` cropped slices centred on `index`, in ascending slice order, as a
/// `[s, crop_h, crop_w]` tensor.
pub fn extract_slab(volume: &Volume, plane: &PlaneConfig, index: usize) -> Result<Tensor> {
    let origin = plane.crop_window(volume.dims)?;
    check_index(plane, volume.dims, index)?;
    let extent = plane.axis.extent(volume.dims);
    let mut data = Vec::with_capacity(plane.slab * plane.crop_h * plane.crop_w);
    for c in 0..plane.slab {
        let k = slab_source(index, c, plane.slab, extent);
        crop_slice(&volume.data, volume.dims, plane, origin, k, &mut data);
    }
    Tensor::new(vec![plane.slab, plane.crop_h, plane.crop_w], data)
}

/// The cropped label slice at `index` as a `[1, crop_h, crop_w]` target.
pub fn extract_target(labels: &LabelVolume, plane: &PlaneConfig, index: usize) -> Result<Tensor> {
    let origin = plane.crop_window(labels.dims)?;
    check_index(plane, labels.dims, index)?;
    let mut data = Vec::with_capacity(plane.crop_h * plane.crop_w);
    crop_slice(&labels.data, labels.dims, plane, origin, index, &mut data);
    Tensor::new(
        vec![1, plane.crop_h, plane.crop_w],
        data.into_iter().map(f64::from).collect(),
    )
}

/// Anything that maps a `[s, H, W]` slab to a `[1, H, W]` probability map.
pub trait SlicePredictor {
    fn in_slices(&self) -> usize;

    /// Rejects crop sizes the predictor cannot process.
    fn check_size(&self, _h: usize, _w: usize) -> Result<()> {
        Ok(())
    }

    fn predict(&self, slab: &Tensor) -> Result<Tensor>;
}

/// Runs `model` on every slab along the plane axis and writes each predicted
/// slice back at its index. Voxels outside the crop window are 0.
pub fn predict_plane<P: SlicePredictor + ?Sized>(
    model: &P,
    volume: &Volume,
    plane: &PlaneConfig,
) -> Result<Volume> {
    predict_plane_with_coverage(model, volume, plane).map(|(v, _)| v)
}

/// [`predict_plane`] that also returns how many times each voxel was written.
pub fn predict_plane_with_coverage<P: SlicePredictor + ?Sized>(
    model: &P,
    volume: &Volume,
    plane: &PlaneConfig,
) -> Result<(Volume, Vec<u32>)> {
    let origin = plane.crop_window(volume.dims)?;
    if model.in_slices() != plane.slab {
        return Err(Error::shape(
            "predict_plane (model input slices vs plane slab)",
            &[model.in_slices()],
            &[plane.slab],
        ));
    }
    model.check_size(plane.crop_h, plane.crop_w)?;

    let dims = volume.dims;
    let mut out = vec![0.0; volume.data.len()];
    let mut writes = vec![0u32; volume.data.len()];
    for k in 0..plane.axis.extent(dims) {
        let slab = extract_slab(volume, plane, k)?;
        let pred = model.predict(&slab)?;
        if pred.shape() != [1, plane.crop_h, plane.crop_w] {
            return Err(Error::shape(
                "predict_plane (prediction)",
                pred.shape(),
                &[1, plane.crop_h, plane.crop_w],
            ));
        }
        let p = pred.data();
        for r in 0..plane.crop_h {
            for c in 0..plane.crop_w {
                let v = plane.axis.voxel(dims, k, origin.0 + r, origin.1 + c);
                out[v] = p[r * plane.crop_w + c];
                writes[v] += 1;
            }
        }
    }
    Ok((Volume::new(dims, volume.spacing, out)?, writes))
}

/// `1` where `value >= threshold`, else `0`.
pub fn binarize(prob: &Volume, threshold: f64) -> LabelVolume {
    let data = prob
        .data
        .iter()
        .map(|&v| u8::from(v >= threshold))
        .collect();
    LabelVolume::new(prob.dims, prob.spacing, data).expect("geometry already validated")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product();
        Volume::new(dims, [1.0, 1.0, 2.5], (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn normalize_window() {
        let v = Volume::new([4, 1, 1], [1.0; 3], vec![-200.0, 1500.0, 650.0, -1000.0]).unwrap();
        let n = normalize_intensity(&v, (-200.0, 1500.0)).unwrap();
        assert_eq!(n.data(), &[0.0, 1.0, 0.5, 0.0]);
        let c = Volume::filled([2, 2, 2], [1.0; 3], 17.0).unwrap();
        let n = normalize_intensity(&c, DEFAULT_HU_WINDOW).unwrap();
        assert!(n.data().iter().all(|&x| x == n.data()[0]));
        assert!(normalize_intensity(&c, (1.0, 1.0)).is_err());
    }

    #[test]
    fn axial_slab_channels_are_neighbours() {
        let v = ramp([4, 4, 6]);
        let plane = PlaneConfig {
            axis: Axis::Axial,
            slab: 3,
            crop_h: 4,
            crop_w: 4,
            crop_origin: CropOrigin::Center,
        };
        let slab = extract_slab(&v, &plane, 2).unwrap();
        for (c, k) in [1, 2, 3].into_iter().enumerate() {
            assert_eq!(slab.channel(c), &v.slice(Axis::Axial, k)[..]);
        }
        let slab = extract_slab(&v, &plane, 0).unwrap();
        for (c, k) in [0, 0, 1].into_iter().enumerate() {
            assert_eq!(slab.channel(c), &v.slice(Axis::Axial, k)[..]);
        }
    }

    #[test]
    fn crop_exceeding_slice_is_an_error() {
        let v = ramp([4, 4, 6]);
        let plane = PlaneConfig {
            axis: Axis::Sagittal,
            slab: 1,
            crop_h: 8,
            crop_w: 4,
            crop_origin: CropOrigin::Center,
        };
        assert!(matches!(
            extract_slab(&v, &plane, 0),
            Err(Error::Precondition { .. })
        ));
        let plane = PlaneConfig {
            crop_h: 4,
            crop_origin: CropOrigin::At { row: 3, col: 0 },
            ..plane
        };
        assert!(extract_slab(&v, &plane, 0).is_err());
    }

    #[test]
    fn binarize_rules() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 0.49).unwrap();
        assert_eq!(binarize(&v, 0.5).count(), 0);
        let v = Volume::filled([2, 2, 2], [1.0; 3], 0.5).unwrap();
        assert_eq!(binarize(&v, 0.5).count(), 8);
        let bin = Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 1.0]).unwrap();
        let once = binarize(&bin, 0.5);
        let as_vol = Volume::new(
            [2, 1, 1],
            [1.0; 3],
            once.data().iter().map(|&v| f64::from(v)).collect(),
        )
        .unwrap();
        assert_eq!(binarize(&as_vol, 0.5), once);
    }

    #[test]
    fn label_values_validated() {
        assert!(LabelVolume::new([2, 1, 1], [1.0; 3], vec![0, 2]).is_err());
        let mut l = LabelVolume::new([2, 1, 1], [1.0; 3], vec![0, 1]).unwrap();
        l.data_mut()[0] = 2;
        assert!(l.validate().is_err());
    }
}
