use std::fs;

use tpseg::volume_io::{
    load_labels, load_volume, read_header, save_labels, save_volume, volume_paths, Dtype,
};
use tpseg::Error;
use tpseg_core::{LabelVolume, Volume};

fn lcg(seed: u64) -> impl FnMut() -> u64 {
    let mut s = seed;
    move || {
        s = s
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        s >> 33
    }
}

fn random_i16_volume() -> Volume {
    let mut next = lcg(1);
    let data = (0..512)
        .map(|_| f64::from((next() % 65536) as u16 as i16))
        .collect();
    Volume::new([8, 8, 8], [0.7, 0.7, 1.25], data).unwrap()
}

#[test]
fn i16_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ct");
    let vol = random_i16_volume();
    save_volume(&path, &vol, Dtype::I16).unwrap();
    let back = load_volume(&path).unwrap();
    assert_eq!(back, vol);
    let (header, dtype) = read_header(&dir.path().join("ct.vol.json")).unwrap();
    assert_eq!(
        (header.magic.as_str(), header.version, header.order.as_str()),
        ("TPSEG-VOL", 1, "x-fastest")
    );
    assert_eq!(
        (dtype, header.dims, header.spacing_mm),
        (Dtype::I16, [8, 8, 8], [0.7, 0.7, 1.25])
    );
}

#[test]
fn f32_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut next = lcg(2);
    let data: Vec<f64> = (0..512)
        .map(|_| f64::from(next() as f32 / 2f32.powi(31)))
        .collect();
    let vol = Volume::new([8, 8, 8], [1.0; 3], data).unwrap();
    save_volume(&dir.path().join("p"), &vol, Dtype::F32).unwrap();
    let back = load_volume(&dir.path().join("p.vol.json")).unwrap();
    assert!(back
        .data()
        .iter()
        .zip(vol.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn payload_is_little_endian_x_fastest() {
    let dir = tempfile::tempdir().unwrap();
    let vol = Volume::new([2, 1, 2], [1.0; 3], vec![1.0, 2.0, 258.0, -1.0]).unwrap();
    save_volume(&dir.path().join("v"), &vol, Dtype::I16).unwrap();
    let raw = fs::read(dir.path().join("v.vol.raw")).unwrap();
    assert_eq!(raw, vec![1, 0, 2, 0, 2, 1, 0xff, 0xff]);
}

#[test]
fn labels_round_trip_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg");
    let labels = LabelVolume::new(
        [3, 2, 2],
        [1.0; 3],
        vec![0, 1, 1, 0, 0, 0, 1, 1, 0, 1, 0, 1],
    )
    .unwrap();
    save_labels(&path, &labels).unwrap();
    assert_eq!(load_labels(&path).unwrap(), labels);

    let mut bad = labels.clone();
    bad.data_mut()[4] = 2;
    assert!(matches!(
        save_labels(&dir.path().join("bad"), &bad),
        Err(Error::Invalid { .. })
    ));
    assert!(!volume_paths(&dir.path().join("bad")).0.exists());

    save_volume(
        &dir.path().join("f"),
        &Volume::filled([2, 2, 2], [1.0; 3], 0.5).unwrap(),
        Dtype::F32,
    )
    .unwrap();
    assert!(matches!(
        load_labels(&dir.path().join("f")),
        Err(Error::Invalid { .. })
    ));
}

#[test]
fn unrepresentable_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let vol = Volume::new([2, 1, 1], [1.0; 3], vec![0.5, 1.0]).unwrap();
    assert!(matches!(
        save_volume(&dir.path().join("a"), &vol, Dtype::I16),
        Err(Error::Invalid { .. })
    ));
    let vol = Volume::new([2, 1, 1], [1.0; 3], vec![40000.0, 1.0]).unwrap();
    assert!(matches!(
        save_volume(&dir.path().join("b"), &vol, Dtype::I16),
        Err(Error::Invalid { .. })
    ));
}

#[test]
fn corrupt_files_give_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ct");
    save_volume(&path, &random_i16_volume(), Dtype::I16).unwrap();
    let (header_path, raw_path) = volume_paths(&path);
    let header = fs::read_to_string(&header_path).unwrap();

    let raw = fs::read(&raw_path).unwrap();
    fs::write(&raw_path, &raw[..raw.len() - 2]).unwrap();
    match load_volume(&path) {
        Err(Error::Integrity {
            expected, actual, ..
        }) => assert_eq!((expected, actual), (1024, 1022)),
        other => panic!("expected integrity error, got {other:?}"),
    }
    fs::write(&raw_path, &raw).unwrap();

    fs::write(&header_path, header.replace("TPSEG-VOL", "NOPE")).unwrap();
    assert!(matches!(load_volume(&path), Err(Error::BadMagic { .. })));
    fs::write(&header_path, header.replace("\"i16\"", "\"f64\"")).unwrap();
    assert!(matches!(
        load_volume(&path),
        Err(Error::UnknownDtype { .. })
    ));
    fs::write(
        &header_path,
        header.replace("\"version\": 1", "\"version\": 2"),
    )
    .unwrap();
    assert!(matches!(load_volume(&path), Err(Error::Version { .. })));
    fs::write(&header_path, "{").unwrap();
    assert!(matches!(load_volume(&path), Err(Error::Corrupt { .. })));
}
