//! The experiment protocol: dataset generation, per-plane training,
//! per-plane prediction, fusion with evaluation, and the gradient check.
//!
//! Every command validates its configuration and inputs before writing.
//! Progress goes to standard error; results go to files.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use tpseg_core::fusion::evaluate;
use tpseg_core::gradcheck::{self, GradcheckConfig, Primitive, PrimitiveReport};
use tpseg_core::model::build_unet;
use tpseg_core::phantom::PhantomSpec;
use tpseg_core::training::{train_plane, EpochStats, Sample};
use tpseg_core::volume::{
    binarize, extract_slab, extract_target, normalize_intensity, predict_plane,
};
use tpseg_core::{dice_3d, fuse, Axis, FusionPolicy, UNetModel, Volume};

use crate::config::RunConfig;
use crate::dataset::{self, Case, DatasetManifest};
use crate::error::{Error, Result};
use crate::report::{loss_csv, report_csv};
use crate::volume_io::{load_volume, save_labels, save_volume, volume_paths, Dtype};
use crate::weights::{load_weights, require, save_weights};

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, contents).map_err(Error::io(path))
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false)
}

/// Writes `n` phantom cases and the split manifest into `out_dir`.
pub fn phantom_gen(n: usize, seed: u64, out_dir: &Path, force: bool) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Usage(
            "the number of cases must be at least 1".into(),
        ));
    }
    if out_dir.is_file() {
        return Err(Error::Usage(format!("{} is a file", out_dir.display())));
    }
    if is_nonempty_dir(out_dir) && !force {
        return Err(Error::Usage(format!(
            "{} is not empty; pass --force to overwrite",
            out_dir.display()
        )));
    }
    let phantom = PhantomSpec::default();
    phantom.validate()?;
    let manifest = dataset::write_phantom_dataset(out_dir, n, seed, &phantom)?;
    let s = &manifest.split;
    eprintln!(
        "wrote {n} cases to {} (train {}, val {}, test {})",
        out_dir.display(),
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    Ok(manifest)
}

fn normalized_case(cfg: &RunConfig, manifest: &DatasetManifest, name: &str) -> Result<Case> {
    let mut case = dataset::load_case(&cfg.data_dir, manifest, name)?;
    case.volume = normalize_intensity(&case.volume, cfg.intensity_window)?;
    Ok(case)
}

fn samples_for(case: &Case, cfg: &RunConfig, axis: Axis) -> Result<Vec<Sample>> {
    let plane = cfg.planes.get(axis);
    (0..axis.extent(case.volume.dims()))
        .map(|k| {
            Ok(Sample {
                slab: extract_slab(&case.volume, plane, k)?,
                target: extract_target(&case.labels, plane, k)?,
            })
        })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Volume Dice of the plane model alone, averaged over `cases`.
fn plane_dice(
    model: &UNetModel,
    cfg: &RunConfig,
    axis: Axis,
    cases: &[Case],
) -> tpseg_core::Result<f64> {
    let mut dice = Vec::with_capacity(cases.len());
    for case in cases {
        let prob = predict_plane(model, &case.volume, cfg.planes.get(axis))?;
        dice.push(dice_3d(&binarize(&prob, 0.5), &case.labels)?);
    }
    Ok(mean(&dice))
}

/// Trains the model of one plane on the training split and writes its
/// weights and loss log.
pub fn train(cfg: &RunConfig, axis: Axis, force: bool) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let manifest = dataset::read_manifest(&cfg.data_dir)?;
    if manifest.split.train.is_empty() {
        return Err(Error::Config("the dataset has no training cases".into()));
    }
    let weights = cfg.weights_path(axis);
    if weights.exists() && !force {
        return Err(Error::Usage(format!(
            "{} exists; pass --force to overwrite",
            weights.display()
        )));
    }
    let mut samples = Vec::new();
    for name in &manifest.split.train {
        samples.extend(samples_for(
            &normalized_case(cfg, &manifest, name)?,
            cfg,
            axis,
        )?);
    }
    let val: Vec<Case> = manifest
        .split
        .val
        .iter()
        .map(|name| normalized_case(cfg, &manifest, name))
        .collect::<Result<_>>()?;

    let spec = cfg.train_spec(axis);
    let mut model = build_unet(cfg.unet(axis), cfg.init_seed(axis))?;
    eprintln!(
        "training {axis}: {} slabs from {} cases, {} parameters, {} epochs",
        samples.len(),
        manifest.split.train.len(),
        model.param_count(),
        spec.epochs
    );
    let start = Instant::now();
    let mut write_error = None;
    let log = train_plane(&mut model, &samples, &spec, |e, m| {
        let val_dice = if val.is_empty() {
            f64::NAN
        } else {
            plane_dice(m, cfg, axis, &val)?
        };
        eprintln!(
            "{axis} epoch {}/{}: loss {:.6}, train hard dice {:.4}, val dice {:.4} ({:.1} s)",
            e.epoch,
            spec.epochs,
            e.mean_loss,
            e.mean_hard_dice,
            val_dice,
            start.elapsed().as_secs_f64()
        );
        if e.checkpoint_due {
            if let Err(err) = save_weights(m, &cfg.checkpoint_path(axis, e.epoch)) {
                write_error = Some(err);
                return Err(tpseg_core::Error::Data("checkpoint write failed".into()));
            }
        }
        Ok(())
    });
    if let Some(err) = write_error {
        return Err(err);
    }
    let log = log?;
    save_weights(&model, &weights)?;
    write_file(&cfg.loss_log_path(axis), &loss_csv(&log))?;
    eprintln!(
        "wrote {} and {}",
        weights.display(),
        cfg.loss_log_path(axis).display()
    );
    Ok(log)
}

fn load_plane_model(cfg: &RunConfig, axis: Axis) -> Result<UNetModel> {
    let path = cfg.weights_path(axis);
    require(&path)?;
    let model = load_weights(&path)?;
    if model.config().in_slices != cfg.planes.get(axis).slab {
        return Err(Error::Config(format!(
            "{} expects {} slices but planes.{axis}.slab is {}",
            path.display(),
            model.config().in_slices,
            cfg.planes.get(axis).slab
        )));
    }
    Ok(model)
}

/// Writes the probability volume of each requested plane for each case.
pub fn predict(cfg: &RunConfig, cases: &[String], axes: &[Axis]) -> Result<()> {
    cfg.validate()?;
    let manifest = dataset::read_manifest(&cfg.data_dir)?;
    for name in cases {
        manifest.entry(name)?;
    }
    let models = axes
        .iter()
        .map(|&a| Ok((a, load_plane_model(cfg, a)?)))
        .collect::<Result<Vec<_>>>()?;
    for name in cases {
        let case = normalized_case(cfg, &manifest, name)?;
        for (axis, model) in &models {
            let prob = predict_plane(model, &case.volume, cfg.planes.get(*axis))?;
            let path = cfg.prediction_path(name, *axis);
            save_volume(&path, &prob, Dtype::F32)?;
            eprintln!("wrote {}", volume_paths(&path).0.display());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseDice {
    pub name: String,
    pub volume_dice: f64,
}

/// Mean per-slice Dice over every evaluated slice of every case.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledSliceDice {
    pub axis: Axis,
    pub mean: Option<f64>,
    pub slices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub policy: String,
    pub threshold: f64,
    pub cases: Vec<CaseDice>,
    /// Mean of the per-case volume Dice.
    pub mean_case_dice: f64,
    pub pooled_slice_dice: Vec<PooledSliceDice>,
}

fn load_prediction(cfg: &RunConfig, case: &str, axis: Axis) -> Result<Volume> {
    let path = cfg.prediction_path(case, axis);
    let (header, _) = volume_paths(&path);
    if !header.is_file() {
        return Err(Error::Config(format!(
            "{} does not exist; run predict first",
            header.display()
        )));
    }
    load_volume(&path)
}

/// Fuses the three plane predictions of each case, writes the fused mask and
/// the Dice report, and returns the per-case and mean Dice.
pub fn fuse_eval(cfg: &RunConfig, cases: &[String], policy: &FusionPolicy) -> Result<EvalSummary> {
    cfg.validate()?;
    policy.validate()?;
    let manifest = dataset::read_manifest(&cfg.data_dir)?;
    if cases.is_empty() {
        return Err(Error::Usage("no cases to evaluate".into()));
    }
    let mut inputs = Vec::with_capacity(cases.len());
    for name in cases {
        let entry = manifest.entry(name)?;
        let probs = Axis::ALL.map(|a| load_prediction(cfg, name, a));
        let [a, s, c] = probs;
        let reference = crate::volume_io::load_labels(&cfg.data_dir.join(&entry.label))?;
        inputs.push((name, [a?, s?, c?], reference));
    }

    let mut results = Vec::with_capacity(inputs.len());
    for (name, [a, s, c], reference) in &inputs {
        let fused = fuse(a, s, c, policy)?;
        let report = evaluate(&fused, reference)?;
        results.push((*name, fused, report));
    }

    let mut per_case = Vec::new();
    let mut pooled: Vec<(Axis, Vec<f64>)> = Axis::ALL.iter().map(|&a| (a, Vec::new())).collect();
    for (name, fused, report) in &results {
        save_labels(&cfg.fused_path(name, &policy.kind), fused)?;
        write_file(
            &cfg.report_path(name, &policy.kind),
            &report_csv(&report.per_slice, &report.summaries),
        )?;
        for s in &report.per_slice {
            if let (Some(d), Some((_, v))) = (s.dice, pooled.iter_mut().find(|(a, _)| *a == s.axis))
            {
                v.push(d);
            }
        }
        eprintln!(
            "{name}: {} volume dice {:.4}",
            policy.kind.name(),
            report.volume_dice
        );
        per_case.push(CaseDice {
            name: name.to_string(),
            volume_dice: report.volume_dice,
        });
    }
    let summary = EvalSummary {
        policy: policy.kind.name(),
        threshold: policy.threshold,
        mean_case_dice: mean(&per_case.iter().map(|c| c.volume_dice).collect::<Vec<_>>()),
        cases: per_case,
        pooled_slice_dice: pooled
            .into_iter()
            .map(|(axis, v)| PooledSliceDice {
                axis,
                mean: (!v.is_empty()).then(|| mean(&v)),
                slices: v.len(),
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    write_file(&cfg.summary_path(&policy.kind), &json)?;
    eprintln!(
        "mean volume dice over {} case(s): {:.4}",
        summary.cases.len(),
        summary.mean_case_dice
    );
    Ok(summary)
}

/// Runs the finite-difference suite; fails when any primitive exceeds its
/// tolerance.
pub fn gradcheck(
    trials: usize,
    seed: u64,
    fault: Option<Primitive>,
) -> Result<Vec<PrimitiveReport>> {
    if trials == 0 {
        return Err(Error::Usage("trials must be at least 1".into()));
    }
    let reports = gradcheck::run(&GradcheckConfig {
        trials,
        seed,
        fault,
        ..GradcheckConfig::default()
    })?;
    for r in &reports {
        eprintln!(
            "{:<11} trials {:>3}  worst rel error {:.3e}  tolerance {:.0e}  {}",
            r.primitive.name(),
            r.trials,
            r.worst_rel_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.primitive.name())
        .collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

/// Case names of a split in the manifest at `cfg.data_dir`.
pub fn split_cases(cfg: &RunConfig, split: &str) -> Result<Vec<String>> {
    let manifest = dataset::read_manifest(&cfg.data_dir)?;
    let s = &manifest.split;
    match split {
        "train" => Ok(s.train.clone()),
        "val" => Ok(s.val.clone()),
        "test" => Ok(s.test.clone()),
        "all" => Ok(manifest.cases.iter().map(|c| c.name.clone()).collect()),
        other => Err(Error::Usage(format!(
            "unknown split {other:?}; expected train, val, test or all"
        ))),
    }
}
