//! Synthetic mandible-like phantoms with exact ground truth.
//!
//! The solid is a horseshoe: a torus segment lying in an axial plane and
//! opening posteriorly, with a vertical cylindrical ramus rising from each end
//! (plus a spherical joint where the two meet). Labels are the exact
//! voxelization of that solid at voxel centres; intensities are
//! label-conditional Gaussians in HU.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

/// Analytic shape parameters, in voxels (angles in degrees).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Horseshoe {
    /// Arch centre `(x, y)` and the axial height `z` of the arch.
    pub center: [f64; 3],
    /// Distance from the arch centre to the tube centreline.
    pub arch_radius: f64,
    pub tube_radius: f64,
    /// Angular extent of the arch, symmetric about the anterior direction.
    pub arch_span_deg: f64,
    pub ramus_height: f64,
}

impl Horseshoe {
    fn half_span(&self) -> f64 {
        self.arch_span_deg.to_radians() / 2.0
    }

    /// Ramus axis position as (|dx|, anterior offset) from the arch centre.
    fn ramus_axis(&self) -> (f64, f64) {
        let half = self.half_span();
        (
            self.arch_radius * libm::sin(half),
            self.arch_radius * libm::cos(half),
        )
    }

    /// Point-in-solid test. Mirror symmetric in x about `center[0]`.
    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let [cx, cy, z0] = self.center;
        let r2 = self.tube_radius * self.tube_radius;
        let dx = libm::fabs(x - cx);
        // Anterior is towards y = 0.
        let ant = cy - y;
        let dz = z - z0;

        let rho = libm::hypot(dx, ant);
        let angle = libm::atan2(dx, ant);
        if angle <= self.half_span()
            && (rho - self.arch_radius) * (rho - self.arch_radius) + dz * dz <= r2
        {
            return true;
        }
        let (ex, ey) = self.ramus_axis();
        let radial = (dx - ex) * (dx - ex) + (ant - ey) * (ant - ey);
        if radial <= r2 && dz >= 0.0 && dz <= self.ramus_height {
            return true;
        }
        radial + dz * dz <= r2
    }

    /// Axis-aligned bounds `([x_min, y_min, z_min], [x_max, y_max, z_max])`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let [cx, cy, z0] = self.center;
        let (r, big_r) = (self.tube_radius, self.arch_radius);
        let half = self.half_span();
        let half_width = if half >= core::f64::consts::FRAC_PI_2 {
            big_r + r
        } else {
            big_r * libm::sin(half) + r
        };
        let (_, ey) = self.ramus_axis();
        let y_min = cy - (big_r + r);
        let y_max = cy - ey + r;
        let z_top = z0 + self.ramus_height.max(r);
        (
            [cx - half_width, y_min, z0 - r],
            [cx + half_width, y_max, z_top],
        )
    }
}

/// Uniform jitter amplitudes (`±value`) applied per case; all zero disables
/// geometry jitter.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Jitter {
    pub center_y: f64,
    pub center_z: f64,
    pub arch_radius: f64,
    pub tube_radius: f64,
    pub arch_span_deg: f64,
    pub ramus_height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub shape: Horseshoe,
    pub jitter: Jitter,
    /// `(mean, std)` in HU.
    pub foreground_hu: (f64, f64),
    pub background_hu: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            shape: Horseshoe {
                center: [31.5, 36.0, 22.0],
                arch_radius: 17.0,
                tube_radius: 4.0,
                arch_span_deg: 200.0,
                ramus_height: 22.0,
            },
            jitter: Jitter {
                center_y: 1.5,
                center_z: 2.0,
                arch_radius: 1.5,
                tube_radius: 0.5,
                arch_span_deg: 10.0,
                ramus_height: 3.0,
            },
            foreground_hu: (1200.0, 100.0),
            background_hu: (40.0, 30.0),
            seed: 0,
        }
    }
}

const MARGIN: f64 = 2.0;

impl PhantomSpec {
    pub fn without_jitter(mut self) -> Self {
        self.jitter = Jitter::default();
        self
    }

    /// Geometry after applying this spec's seeded jitter.
    pub fn realized_shape(&self) -> Horseshoe {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut draw = |amp: f64| {
            if amp > 0.0 {
                rng.random_range(-amp..=amp)
            } else {
                0.0
            }
        };
        let j = self.jitter;
        let mut s = self.shape;
        s.center[1] += draw(j.center_y);
        s.center[2] += draw(j.center_z);
        s.arch_radius += draw(j.arch_radius);
        s.tube_radius += draw(j.tube_radius);
        s.arch_span_deg += draw(j.arch_span_deg);
        s.ramus_height += draw(j.ramus_height);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Config(format!(
                "phantom dims must be positive, got {:?}",
                self.dims
            )));
        }
        let (fg, bg) = (self.foreground_hu, self.background_hu);
        if !(fg.1 >= 0.0 && bg.1 >= 0.0) {
            return Err(Error::Config(
                "intensity standard deviations must be non-negative".into(),
            ));
        }
        if fg.0 - bg.0 < 5.0 * bg.1 {
            return Err(Error::Config(format!(
                "foreground mean {} must exceed background mean {} by at least 5 background std ({})",
                fg.0, bg.0, bg.1
            )));
        }
        let s = self.realized_shape();
        if !(s.tube_radius > 0.0
            && s.arch_radius > s.tube_radius
            && s.arch_span_deg > 0.0
            && s.arch_span_deg < 360.0)
        {
            return Err(Error::Config(format!(
                "degenerate horseshoe geometry {s:?}"
            )));
        }
        let (lo, hi) = s.bounds();
        for axis in 0..3 {
            let max = (self.dims[axis] - 1) as f64 - MARGIN;
            if lo[axis] < MARGIN || hi[axis] > max {
                return Err(Error::Config(format!(
                    "shape extent [{:.2}, {:.2}] along axis {axis} leaves less than a {MARGIN}-voxel margin in 0..{}",
                    lo[axis], hi[axis], self.dims[axis]
                )));
            }
        }
        Ok(())
    }
}

/// Generates one phantom `(intensities in HU, exact label)`.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let shape = spec.realized_shape();
    let [nx, ny, nz] = spec.dims;
    let mut labels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                labels.push(u8::from(shape.contains(x as f64, y as f64, z as f64)));
            }
        }
    }
    let normal = |(mean, std): (f64, f64)| {
        Normal::new(mean, std).map_err(|e| Error::Config(format!("intensity distribution: {e}")))
    };
    let fg = normal(spec.foreground_hu)?;
    let bg = normal(spec.background_hu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let data = labels
        .iter()
        .map(|&l| {
            let v = if l == 1 {
                fg.sample(&mut rng)
            } else {
                bg.sample(&mut rng)
            };
            libm::round(v).clamp(i16::MIN as f64, i16::MAX as f64)
        })
        .collect();
    Ok((
        Volume::new(spec.dims, spec.spacing, data)?,
        LabelVolume::new(spec.dims, spec.spacing, labels)?,
    ))
}

/// Case names per split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Split sizes in the 8 : 2 : 1 proportion (validation `round(2n/11)`, test
/// `round(n/11)`, training the rest).
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = (2 * n + 5) / 11;
    let test = (n + 5) / 11;
    (n - val - test, val, test)
}

pub struct PhantomCase {
    pub name: String,
    pub volume: Volume,
    pub labels: LabelVolume,
}

pub fn case_name(i: usize) -> String {
    format!("case_{i:03}")
}

/// `n` jittered phantoms (case `i` seeded with `base_seed + i`) and a seeded
/// random split.
pub fn generate_dataset(
    n: usize,
    base_seed: u64,
    base: &PhantomSpec,
) -> Result<(Vec<PhantomCase>, Split)> {
    if n == 0 {
        return Err(Error::precondition("generate_dataset", "n must be >= 1"));
    }
    let cases = (0..n)
        .map(|i| {
            let spec = PhantomSpec {
                seed: base_seed.wrapping_add(i as u64),
                ..*base
            };
            let (volume, labels) = generate(&spec)?;
            Ok(PhantomCase {
                name: case_name(i),
                volume,
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let split = make_split(n, base_seed);
    Ok((cases, split))
}

pub fn make_split(n: usize, base_seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(base_seed));
    let (train, val, _) = split_sizes(n);
    let names = |r: &[usize]| {
        let mut v: Vec<usize> = r.to_vec();
        v.sort_unstable();
        v.into_iter().map(case_name).collect()
    };
    Split {
        train: names(&idx[..train]),
        val: names(&idx[train..train + val]),
        test: names(&idx[train + val..]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_proportions() {
        assert_eq!(split_sizes(11), (8, 2, 1));
        assert_eq!(split_sizes(22), (16, 4, 2));
        let s = make_split(11, 5);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 2, 1));
        assert_eq!(s, make_split(11, 5));
    }

    #[test]
    fn margin_violation_is_a_config_error() {
        let mut spec = PhantomSpec::default().without_jitter();
        spec.shape.arch_radius = 40.0;
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn weak_contrast_rejected() {
        let spec = PhantomSpec {
            foreground_hu: (100.0, 10.0),
            ..PhantomSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
