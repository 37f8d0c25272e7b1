//! Fusion of the three per-plane probability volumes and Dice statistics.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::volume::{Axis, LabelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FusionKind {
    /// At least two of the three binarized planes vote foreground.
    Majority,
    /// Mean of the three probabilities reaches the threshold.
    MeanThreshold,
    Union,
    Intersection,
    SinglePlane(Axis),
}

impl FusionKind {
    pub fn name(&self) -> alloc::string::String {
        match self {
            FusionKind::Majority => "majority".into(),
            FusionKind::MeanThreshold => "mean_threshold".into(),
            FusionKind::Union => "union".into(),
            FusionKind::Intersection => "intersection".into(),
            FusionKind::SinglePlane(a) => format!("single_plane_{a}"),
        }
    }

    /// Parses the names produced by [`name`](Self::name); `single_plane:<axis>`
    /// is accepted as well.
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "majority" => FusionKind::Majority,
            "mean_threshold" => FusionKind::MeanThreshold,
            "union" => FusionKind::Union,
            "intersection" => FusionKind::Intersection,
            _ => {
                let axis = s
                    .strip_prefix("single_plane_")
                    .or_else(|| s.strip_prefix("single_plane:"))?;
                FusionKind::SinglePlane(Axis::parse(axis)?)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FusionPolicy {
    pub kind: FusionKind,
    pub threshold: f64,
}

impl Default for FusionPolicy {
    fn default() -> Self {
        Self {
            kind: FusionKind::Majority,
            threshold: 0.5,
        }
    }
}

impl FusionPolicy {
    pub fn new(kind: FusionKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold > 0.0 && self.threshold < 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "fusion threshold must lie in (0, 1), got {}",
                self.threshold
            )))
        }
    }
}

/// Combines axial, sagittal and coronal probability volumes into one mask.
pub fn fuse(
    axial: &Volume,
    sagittal: &Volume,
    coronal: &Volume,
    policy: &FusionPolicy,
) -> Result<LabelVolume> {
    policy.validate()?;
    if axial.dims() != sagittal.dims() || axial.dims() != coronal.dims() {
        return Err(Error::Shape {
            op: "fuse (axial, sagittal, coronal)",
            lhs: [axial.dims(), sagittal.dims()].concat(),
            rhs: coronal.dims().to_vec(),
        });
    }
    let t = policy.threshold;
    let planes = [axial.data(), sagittal.data(), coronal.data()];
    let data = (0..axial.data().len())
        .map(|i| {
            let p = [planes[0][i], planes[1][i], planes[2][i]];
            let votes = p.iter().filter(|&&v| v >= t).count();
            let on = match policy.kind {
                FusionKind::Majority => votes >= 2,
                FusionKind::MeanThreshold => (p[0] + p[1] + p[2]) / 3.0 >= t,
                FusionKind::Union => votes >= 1,
                FusionKind::Intersection => votes == 3,
                FusionKind::SinglePlane(axis) => {
                    let k = Axis::ALL
                        .iter()
                        .position(|&a| a == axis)
                        .expect("axis in ALL");
                    p[k] >= t
                }
            };
            u8::from(on)
        })
        .collect();
    LabelVolume::new(axial.dims(), axial.spacing(), data)
}

fn set_dice(pred: &[u8], reference: &[u8]) -> Option<f64> {
    let (mut inter, mut np, mut nr) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.iter().zip(reference) {
        inter += usize::from(p == 1 && r == 1);
        np += usize::from(p == 1);
        nr += usize::from(r == 1);
    }
    (np + nr > 0).then(|| 2.0 * inter as f64 / (np + nr) as f64)
}

fn check_dims(op: &'static str, a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(Error::shape(op, &a.dims(), &b.dims()))
    }
}

/// Set Dice over all voxels; 1.0 when both masks are empty.
pub fn dice_3d(pred: &LabelVolume, reference: &LabelVolume) -> Result<f64> {
    check_dims("dice_3d", pred, reference)?;
    Ok(set_dice(pred.data(), reference.data()).unwrap_or(1.0))
}

/// Dice of one slice; `None` when the slice is empty in both masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceDice {
    pub axis: Axis,
    pub index: usize,
    pub dice: Option<f64>,
}

/// Box-whisker statistics with Tukey hinges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Five-number summary and mean. The hinges are the medians of the lower and
/// upper halves, excluding the overall median when the count is odd.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let half = n / 2;
    let (q1, q3) = if half == 0 {
        (v[0], v[0])
    } else {
        (median_sorted(&v[..half]), median_sorted(&v[n - half..]))
    };
    Some(Summary {
        min: v[0],
        q1,
        median: median_sorted(&v),
        q3,
        max: v[n - 1],
        mean: v.iter().sum::<f64>() / n as f64,
        count: n,
    })
}

/// Dice of every slice along `axis` plus the summary over slices that are
/// non-empty in at least one mask.
pub fn per_slice_dice(
    pred: &LabelVolume,
    reference: &LabelVolume,
    axis: Axis,
) -> Result<(Vec<SliceDice>, Option<Summary>)> {
    check_dims("per_slice_dice", pred, reference)?;
    let slices: Vec<SliceDice> = (0..axis.extent(pred.dims()))
        .map(|k| SliceDice {
            axis,
            index: k,
            dice: set_dice(&pred.slice(axis, k), &reference.slice(axis, k)),
        })
        .collect();
    let values: Vec<f64> = slices.iter().filter_map(|s| s.dice).collect();
    let summary = summarize(&values);
    Ok((slices, summary))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub volume_dice: f64,
    pub per_slice: Vec<SliceDice>,
    pub summaries: Vec<(Axis, Option<Summary>)>,
}

/// Volume Dice plus per-slice Dice along all three axes, in the order
/// axial, sagittal, coronal.
pub fn evaluate(pred: &LabelVolume, reference: &LabelVolume) -> Result<DiceReport> {
    let volume_dice = dice_3d(pred, reference)?;
    let mut per_slice = Vec::new();
    let mut summaries = Vec::new();
    for axis in Axis::ALL {
        let (slices, summary) = per_slice_dice(pred, reference, axis)?;
        per_slice.extend(slices);
        summaries.push((axis, summary));
    }
    Ok(DiceReport {
        volume_dice,
        per_slice,
        summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn vol(values: &[f64]) -> Volume {
        Volume::new([values.len(), 1, 1], [1.0; 3], values.to_vec()).unwrap()
    }

    #[test]
    fn majority_and_mean_threshold() {
        let a = vol(&[0.6, 0.6]);
        let s = vol(&[0.6, 0.6]);
        let c = vol(&[0.0, 0.9]);
        let m = fuse(&a, &s, &c, &FusionPolicy::new(FusionKind::Majority)).unwrap();
        assert_eq!(m.data(), &[1, 1]);
        let a = vol(&[0.6]);
        let s = vol(&[0.6]);
        let c = vol(&[0.0]);
        let m = fuse(&a, &s, &c, &FusionPolicy::new(FusionKind::MeanThreshold)).unwrap();
        assert_eq!(m.data(), &[0]);
    }

    #[test]
    fn dims_mismatch_names_all_three() {
        let a = vol(&[0.0, 1.0]);
        let b = vol(&[0.0]);
        let err = fuse(&a, &a, &b, &FusionPolicy::default()).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(
            msg.contains("[2, 1, 1, 2, 1, 1]") && msg.contains("[1, 1, 1]"),
            "{msg}"
        );
    }

    #[test]
    fn dice_hand_counts() {
        let lab = |v: Vec<u8>| LabelVolume::new([v.len(), 1, 1], [1.0; 3], v).unwrap();
        let a = lab(vec![1, 1, 1, 1, 0, 0]);
        let b = lab(vec![0, 0, 1, 1, 1, 1]);
        assert_eq!(dice_3d(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_3d(&a, &a).unwrap(), 1.0);
        let c = lab(vec![0, 0, 0, 0, 1, 1]);
        let e = lab(vec![1, 1, 0, 0, 0, 0]);
        assert_eq!(dice_3d(&c, &e).unwrap(), 0.0);
        let z = lab(vec![0; 6]);
        assert_eq!(dice_3d(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn tukey_hinges() {
        let s = summarize(&[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(
            (s.min, s.q1, s.median, s.q3, s.max, s.mean),
            (0.0, 0.0, 0.5, 1.0, 1.0, 0.5)
        );
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.5, 2.5, 3.5));
        let s = summarize(&[0.7]).unwrap();
        assert_eq!(
            (s.min, s.q1, s.median, s.q3, s.max),
            (0.7, 0.7, 0.7, 0.7, 0.7)
        );
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn policy_names_round_trip() {
        for k in [
            FusionKind::Majority,
            FusionKind::MeanThreshold,
            FusionKind::Union,
            FusionKind::Intersection,
            FusionKind::SinglePlane(Axis::Coronal),
        ] {
            assert_eq!(FusionKind::parse(&k.name()), Some(k));
        }
        assert!(FusionPolicy {
            kind: FusionKind::Union,
            threshold: 1.0
        }
        .validate()
        .is_err());
    }
}
