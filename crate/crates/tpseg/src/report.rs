//! CSV outputs: the per-slice Dice report and the per-epoch loss log.

use std::fmt::Write;

use tpseg_core::fusion::{SliceDice, Summary};
use tpseg_core::training::EpochStats;
use tpseg_core::Axis;

const NA: &str = "n/a";

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

/// Per-slice rows `axis,slice_index,dice` followed by one
/// `summary,axis,min,q1,median,q3,max,mean` row per axis in the order axial,
/// sagittal, coronal. Missing values are written as `n/a`.
pub fn report_csv(per_slice: &[SliceDice], summaries: &[(Axis, Option<Summary>)]) -> String {
    let mut out = String::from("axis,slice_index,dice\n");
    for axis in Axis::ALL {
        for s in per_slice.iter().filter(|s| s.axis == axis) {
            let dice = s.dice.map_or_else(|| NA.to_string(), fixed);
            writeln!(out, "{},{},{}", axis, s.index, dice).unwrap();
        }
    }
    for axis in Axis::ALL {
        let summary = summaries
            .iter()
            .find(|(a, _)| *a == axis)
            .and_then(|(_, s)| *s);
        let cells = match summary {
            Some(s) => [s.min, s.q1, s.median, s.q3, s.max, s.mean].map(fixed),
            None => [(); 6].map(|_| NA.to_string()),
        };
        writeln!(out, "summary,{},{}", axis, cells.join(",")).unwrap();
    }
    out
}

/// Parsed report: per-slice values and per-axis `[min, q1, median, q3, max,
/// mean]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedReport {
    pub per_slice: Vec<(Axis, usize, Option<f64>)>,
    pub summaries: Vec<(Axis, Option<[f64; 6]>)>,
}

pub fn parse_report_csv(text: &str) -> Result<ParsedReport, String> {
    let mut lines = text.lines();
    if lines.next() != Some("axis,slice_index,dice") {
        return Err("missing header".into());
    }
    let cell = |s: &str| -> Result<Option<f64>, String> {
        if s == NA {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| format!("{s:?}: {e}"))
        }
    };
    let axis = |s: &str| Axis::parse(s).ok_or_else(|| format!("unknown axis {s:?}"));
    let mut report = ParsedReport::default();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        match fields.as_slice() {
            ["summary", a, rest @ ..] if rest.len() == 6 => {
                let values = rest
                    .iter()
                    .map(|s| cell(s))
                    .collect::<Result<Vec<_>, _>>()?;
                let all: Option<Vec<f64>> = values.into_iter().collect();
                report
                    .summaries
                    .push((axis(a)?, all.map(|v| [v[0], v[1], v[2], v[3], v[4], v[5]])));
            }
            [a, index, dice] => {
                let index = index.parse().map_err(|e| format!("{index:?}: {e}"))?;
                report.per_slice.push((axis(a)?, index, cell(dice)?));
            }
            _ => return Err(format!("malformed row {line:?}")),
        }
    }
    Ok(report)
}

pub fn loss_csv(log: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_loss,mean_hard_dice\n");
    for e in log {
        writeln!(
            out,
            "{},{},{}",
            e.epoch,
            fixed(e.mean_loss),
            fixed(e.mean_hard_dice)
        )
        .unwrap();
    }
    out
}
