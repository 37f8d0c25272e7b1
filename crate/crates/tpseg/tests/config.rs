use std::fs;

use tpseg::{Error, RunConfig};
use tpseg_core::{Axis, CropOrigin, FusionKind};

#[test]
fn presets_validate_and_encode_plane_defaults() {
    let full = RunConfig::full_scale();
    full.validate().unwrap();
    let dims: Vec<_> = Axis::ALL
        .iter()
        .map(|&a| {
            let p = full.planes.get(a);
            (p.crop_h, p.crop_w, p.slab)
        })
        .collect();
    assert_eq!(dims, [(512, 512, 3), (400, 400, 7), (400, 400, 9)]);
    assert_eq!(
        (
            full.network.depth,
            full.network.base_channels,
            full.train.epochs
        ),
        (4, 64, 30)
    );
    assert_eq!(full.train.adam.lr, 1e-5);

    let desk = RunConfig::desk_scale();
    desk.validate().unwrap();
    let dims: Vec<_> = Axis::ALL
        .iter()
        .map(|&a| {
            let p = desk.planes.get(a);
            (p.crop_h, p.crop_w, p.slab)
        })
        .collect();
    assert_eq!(dims, [(64, 64, 3), (48, 48, 5), (48, 48, 5)]);
    assert_eq!(
        (
            desk.network.depth,
            desk.network.base_channels,
            desk.train.adam.lr
        ),
        (2, 8, 1e-3)
    );
    assert_eq!(desk.unet(Axis::Coronal).in_slices, 5);
    assert_eq!(desk.fusion.kind, FusionKind::Majority);
}

#[test]
fn partial_file_overrides_preset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(
        &path,
        r#"{"seed": 9, "train": {"epochs": 2}, "planes": {"sagittal": {"crop_origin": {"at": {"row": 4, "col": 8}}}},
            "fusion": {"kind": {"single_plane": "coronal"}}}"#,
    )
    .unwrap();
    let cfg = RunConfig::resolve(true, Some(&path)).unwrap();
    assert_eq!(
        (cfg.seed, cfg.train.epochs, cfg.train.adam.lr),
        (9, 2, 1e-3)
    );
    assert_eq!(
        cfg.planes.sagittal.crop_origin,
        CropOrigin::At { row: 4, col: 8 }
    );
    assert_eq!(cfg.planes.sagittal.crop_h, 48);
    assert_eq!(cfg.fusion.kind, FusionKind::SinglePlane(Axis::Coronal));
    let round = RunConfig::resolve(
        false,
        Some(&{
            let p = dir.path().join("dump.json");
            fs::write(&p, cfg.to_json()).unwrap();
            p
        }),
    )
    .unwrap();
    assert_eq!(round, cfg);
}

#[test]
fn invalid_configs_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = |text: &str| {
        let path = dir.path().join("bad.json");
        fs::write(&path, text).unwrap();
        RunConfig::resolve(true, Some(&path)).and_then(|c| c.validate().map(|_| c))
    };
    for text in [
        "{",
        r#"{"unknown_field": 1}"#,
        r#"{"planes": {"axial": {"slab": 2}}}"#,
        r#"{"planes": {"axial": {"crop_h": 30}}}"#,
        r#"{"planes": {"axial": {"axis": "coronal"}}}"#,
        r#"{"train": {"epochs": 0}}"#,
        r#"{"fusion": {"threshold": 1.5}}"#,
        r#"{"network": {"depth": 0}}"#,
        r#"{"intensity_window": [100.0, 0.0]}"#,
    ] {
        let err = bad(text).expect_err(text);
        assert_eq!(err.exit_code(), 2, "{text}: {err}");
    }
    assert!(matches!(
        RunConfig::resolve(true, Some(&dir.path().join("missing.json"))),
        Err(Error::Config(_))
    ));
}

#[test]
fn derived_seeds_differ_per_plane() {
    let cfg = RunConfig {
        seed: 3,
        ..RunConfig::desk_scale()
    };
    let init: Vec<u64> = Axis::ALL.iter().map(|&a| cfg.init_seed(a)).collect();
    let shuffle: Vec<u64> = Axis::ALL
        .iter()
        .map(|&a| cfg.train_spec(a).shuffle_seed)
        .collect();
    assert!(init[0] != init[1] && init[1] != init[2] && shuffle[0] != shuffle[2]);
    let other = RunConfig {
        seed: 4,
        ..RunConfig::desk_scale()
    };
    assert_ne!(other.init_seed(Axis::Axial), init[0]);
}
