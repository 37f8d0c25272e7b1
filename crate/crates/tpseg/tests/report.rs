use tpseg::report::{loss_csv, parse_report_csv, report_csv};
use tpseg_core::fusion::{evaluate, SliceDice, Summary};
use tpseg_core::training::EpochStats;
use tpseg_core::{Axis, LabelVolume};

fn masks() -> (LabelVolume, LabelVolume) {
    let dims = [3, 4, 5];
    let a = (0..60).map(|i| u8::from((i * 7) % 3 == 0)).collect();
    let b = (0..60).map(|i| u8::from((i * 5) % 4 < 2)).collect();
    (
        LabelVolume::new(dims, [1.0; 3], a).unwrap(),
        LabelVolume::new(dims, [1.0; 3], b).unwrap(),
    )
}

fn six(v: f64) -> f64 {
    format!("{v:.6}").parse().unwrap()
}

#[test]
fn report_round_trips_at_six_digits() {
    let (a, b) = masks();
    let rep = evaluate(&a, &b).unwrap();
    let text = report_csv(&rep.per_slice, &rep.summaries);
    let parsed = parse_report_csv(&text).unwrap();
    assert_eq!(parsed.per_slice.len(), rep.per_slice.len());
    for (p, s) in parsed.per_slice.iter().zip(&rep.per_slice) {
        assert_eq!((p.0, p.1, p.2), (s.axis, s.index, s.dice.map(six)));
    }
    for ((axis, parsed), (want_axis, want)) in parsed.summaries.iter().zip(&rep.summaries) {
        assert_eq!(axis, want_axis);
        let w = want.unwrap();
        assert_eq!(
            parsed.unwrap(),
            [w.min, w.q1, w.median, w.q3, w.max, w.mean].map(six)
        );
    }
    for line in text.lines().skip(1) {
        let last = line.rsplit(',').next().unwrap();
        assert!(
            last == "n/a" || last.split('.').nth(1).map(str::len) == Some(6),
            "{line}"
        );
    }
}

#[test]
fn axes_in_fixed_order() {
    let (a, b) = masks();
    let rep = evaluate(&a, &b).unwrap();
    let mut shuffled: Vec<SliceDice> = rep.per_slice.clone();
    shuffled.reverse();
    let text = report_csv(&shuffled, &rep.summaries);
    let axes: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    let first = |name: &str| axes.iter().position(|a| *a == name).unwrap();
    assert!(first("axial") < first("sagittal") && first("sagittal") < first("coronal"));
    let summaries: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("summary,"))
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(summaries, ["axial", "sagittal", "coronal"]);
}

#[test]
fn empty_report_has_header_and_na_summaries() {
    let text = report_csv(&[], &[]);
    let expected = "axis,slice_index,dice\n\
        summary,axial,n/a,n/a,n/a,n/a,n/a,n/a\n\
        summary,sagittal,n/a,n/a,n/a,n/a,n/a,n/a\n\
        summary,coronal,n/a,n/a,n/a,n/a,n/a,n/a\n";
    assert_eq!(text, expected);
    let parsed = parse_report_csv(&text).unwrap();
    assert!(parsed.per_slice.is_empty());
    assert!(parsed.summaries.iter().all(|(_, s)| s.is_none()));
}

#[test]
fn excluded_slices_are_na() {
    let slices = [
        SliceDice {
            axis: Axis::Axial,
            index: 0,
            dice: None,
        },
        SliceDice {
            axis: Axis::Axial,
            index: 1,
            dice: Some(0.25),
        },
    ];
    let summary = Summary {
        min: 0.25,
        q1: 0.25,
        median: 0.25,
        q3: 0.25,
        max: 0.25,
        mean: 0.25,
        count: 1,
    };
    let text = report_csv(&slices, &[(Axis::Axial, Some(summary))]);
    assert!(text.starts_with(
        "axis,slice_index,dice\naxial,0,n/a\naxial,1,0.250000\nsummary,axial,0.250000,"
    ));
}

#[test]
fn loss_log_has_one_row_per_epoch() {
    let log: Vec<EpochStats> = (1..=3)
        .map(|epoch| EpochStats {
            epoch,
            mean_loss: 1.0 / epoch as f64,
            mean_hard_dice: 0.5,
            checkpoint_due: false,
        })
        .collect();
    assert_eq!(
        loss_csv(&log),
        "epoch,mean_loss,mean_hard_dice\n1,1.000000,0.500000\n2,0.500000,0.500000\n3,0.333333,0.500000\n"
    );
}
