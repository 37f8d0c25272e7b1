mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use tpseg_core::fusion::{evaluate, summarize};
use tpseg_core::{
    dice_3d, fuse, per_slice_dice, Axis, Error, FusionKind, FusionPolicy, LabelVolume, Volume,
};

fn mask_from_bits(bits: u8) -> LabelVolume {
    LabelVolume::new(
        [2, 2, 2],
        [1.0; 3],
        (0..8).map(|i| (bits >> i) & 1).collect(),
    )
    .unwrap()
}

fn oracle_dice(a: &LabelVolume, b: &LabelVolume) -> f64 {
    let [nx, ny, nz] = a.dims();
    let (mut both, mut na, mut nb) = (0u32, 0u32, 0u32);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let (va, vb) = (a.data()[i] == 1, b.data()[i] == 1);
                both += u32::from(va && vb);
                na += u32::from(va);
                nb += u32::from(vb);
            }
        }
    }
    if na + nb == 0 {
        1.0
    } else {
        f64::from(2 * both) / f64::from(na + nb)
    }
}

fn all_policies() -> Vec<FusionPolicy> {
    let mut kinds = vec![
        FusionKind::Majority,
        FusionKind::MeanThreshold,
        FusionKind::Union,
        FusionKind::Intersection,
    ];
    kinds.extend(Axis::ALL.map(FusionKind::SinglePlane));
    kinds.into_iter().map(FusionPolicy::new).collect()
}

fn random_prob(r: &mut impl Rng, dims: [usize; 3]) -> Volume {
    Volume::new(
        dims,
        [1.0; 3],
        (0..dims.iter().product::<usize>())
            .map(|_| r.random_range(0.0..1.0))
            .collect(),
    )
    .unwrap()
}

#[test]
fn dice_3d_matches_voxel_loop_oracle_exhaustively() {
    let masks: Vec<LabelVolume> = (0..=255u8).map(mask_from_bits).collect();
    for a in &masks {
        for b in &masks {
            let d = dice_3d(a, b).unwrap();
            assert_eq!(d, oracle_dice(a, b));
            assert_eq!(d, dice_3d(b, a).unwrap());
        }
    }
}

#[test]
fn per_slice_hand_built_case() {
    // Axial slices of a [4, 1, 3] volume: identical, overlap 1 of 2 + 2, disjoint.
    let reference: Vec<u8> = [[1, 1, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]].concat();
    let pred: Vec<u8> = [[1, 1, 1, 1], [0, 1, 1, 0], [0, 0, 1, 1]].concat();
    let r = LabelVolume::new([4, 1, 3], [1.0; 3], reference).unwrap();
    let p = LabelVolume::new([4, 1, 3], [1.0; 3], pred).unwrap();
    let (slices, summary) = per_slice_dice(&p, &r, Axis::Axial).unwrap();
    let d: Vec<Option<f64>> = slices.iter().map(|s| s.dice).collect();
    assert_eq!(d, vec![Some(1.0), Some(0.5), Some(0.0)]);
    let s = summary.unwrap();
    assert_eq!(
        (s.median, s.mean, s.min, s.max, s.count),
        (0.5, 0.5, 0.0, 1.0, 3)
    );
}

#[test]
fn empty_slices_are_excluded_from_summary() {
    let r = LabelVolume::new([2, 1, 3], [1.0; 3], vec![1, 0, 0, 0, 1, 1]).unwrap();
    let (slices, summary) = per_slice_dice(&r, &r, Axis::Axial).unwrap();
    assert_eq!(slices[1].dice, None);
    let s = summary.unwrap();
    assert_eq!((s.count, s.median, s.mean), (2, 1.0, 1.0));
    let empty = LabelVolume::new([2, 1, 3], [1.0; 3], vec![0; 6]).unwrap();
    assert_eq!(per_slice_dice(&empty, &empty, Axis::Axial).unwrap().1, None);
    assert_eq!(dice_3d(&empty, &empty).unwrap(), 1.0);
}

#[test]
fn tukey_hinges() {
    let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
    assert_eq!((s.q1, s.median, s.q3), (2.0, 4.0, 6.0));
    let s = summarize(&[4.0, 1.0, 3.0, 2.0]).unwrap();
    assert_eq!(
        (s.min, s.q1, s.median, s.q3, s.max),
        (1.0, 1.5, 2.5, 3.5, 4.0)
    );
    let s = summarize(&[0.3]).unwrap();
    assert_eq!(
        (s.min, s.q1, s.median, s.q3, s.max),
        (0.3, 0.3, 0.3, 0.3, 0.3)
    );
}

#[test]
fn policies_are_unanimous_on_identical_masks() {
    let mut r = rng(41);
    let dims = [5, 4, 3];
    let labels: Vec<u8> = (0..60).map(|_| u8::from(r.random_bool(0.4))).collect();
    let mask = LabelVolume::new(dims, [1.0; 3], labels.clone()).unwrap();
    let prob = Volume::new(
        dims,
        [1.0; 3],
        labels.iter().map(|&v| f64::from(v)).collect(),
    )
    .unwrap();
    for policy in all_policies() {
        assert_eq!(
            fuse(&prob, &prob, &prob, &policy).unwrap(),
            mask,
            "{}",
            policy.kind.name()
        );
    }
}

#[test]
fn fuse_reports_all_three_shapes() {
    let a = Volume::filled([2, 2, 2], [1.0; 3], 0.5).unwrap();
    let c = Volume::filled([2, 2, 3], [1.0; 3], 0.5).unwrap();
    match fuse(&a, &a, &c, &FusionPolicy::default()) {
        Err(e @ Error::Shape { .. }) => {
            let msg = e.to_string();
            assert!(
                msg.contains("2, 2, 2, 2, 2, 2") && msg.contains("2, 2, 3"),
                "{msg}"
            );
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn evaluate_reports_axes_in_order() {
    let mut r = rng(42);
    let dims = [4, 5, 6];
    let a = LabelVolume::new(
        dims,
        [1.0; 3],
        (0..120).map(|_| u8::from(r.random_bool(0.5))).collect(),
    )
    .unwrap();
    let b = LabelVolume::new(
        dims,
        [1.0; 3],
        (0..120).map(|_| u8::from(r.random_bool(0.5))).collect(),
    )
    .unwrap();
    let rep = evaluate(&a, &b).unwrap();
    assert_eq!(
        rep.summaries.iter().map(|s| s.0).collect::<Vec<_>>(),
        Axis::ALL
    );
    assert_eq!(rep.per_slice.len(), 4 + 5 + 6);
    assert_eq!(rep.volume_dice, dice_3d(&a, &b).unwrap());
    for (_, s) in &rep.summaries {
        let s = s.unwrap();
        assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
        assert!((0.0..=1.0).contains(&s.min) && s.max <= 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn policy_lattice_holds(seed in any::<u64>()) {
        let mut r = rng(seed);
        let dims = [r.random_range(1..6), r.random_range(1..6), r.random_range(1..6)];
        let (a, s, c) = (random_prob(&mut r, dims), random_prob(&mut r, dims), random_prob(&mut r, dims));
        let get = |k| fuse(&a, &s, &c, &FusionPolicy::new(k)).unwrap();
        let (inter, maj, uni) = (get(FusionKind::Intersection), get(FusionKind::Majority), get(FusionKind::Union));
        for i in 0..inter.data().len() {
            prop_assert!(inter.data()[i] <= maj.data()[i] && maj.data()[i] <= uni.data()[i]);
        }
    }

    #[test]
    fn volume_dice_within_slice_range(seed in any::<u64>(), axis_i in 0usize..3) {
        let mut r = rng(seed);
        let dims = [r.random_range(2..6), r.random_range(2..6), r.random_range(2..6)];
        let axis = Axis::ALL[axis_i];
        let n: usize = dims.iter().product();
        let mut reference: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.4))).collect();
        // Guarantee a non-empty reference on every slice.
        for k in 0..axis.extent(dims) {
            reference[axis.voxel(dims, k, 0, 0)] = 1;
        }
        let reference = LabelVolume::new(dims, [1.0; 3], reference).unwrap();
        let pred = LabelVolume::new(dims, [1.0; 3], (0..n).map(|_| u8::from(r.random_bool(0.5))).collect()).unwrap();
        let (slices, _) = per_slice_dice(&pred, &reference, axis).unwrap();
        let values: Vec<f64> = slices.iter().map(|s| s.dice.unwrap()).collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let d = dice_3d(&pred, &reference).unwrap();
        prop_assert!(lo - 1e-12 <= d && d <= hi + 1e-12);
    }
}
