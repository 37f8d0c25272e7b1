//! Soft-Dice objective, Adam and the single-plane training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::UNetModel;
use crate::tensor::{Graph, Mode, Tensor, Var};
use crate::volume::PlaneConfig;

/// Additive smoothing of the soft Dice used for training.
pub const DICE_SMOOTHING: f64 = 1.0;

fn check_target(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("soft_dice", pred.shape(), target.shape()));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::precondition(
            "soft_dice",
            format!("target value {v} is not binary"),
        ));
    }
    Ok(())
}

/// Soft Dice `(2 * sum(p * t) + eps) / (sum(p) + sum(t) + eps)`.
///
/// With `eps == 0` and both sums zero the value is defined as 1 with zero
/// gradient.
pub fn soft_dice(g: &mut Graph, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
    check_target(g.value(pred), target)?;
    let p = g.value(pred).data();
    let t = target.data();
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let denom = p.iter().sum::<f64>() + t.iter().sum::<f64>() + eps;
    let value = if denom == 0.0 {
        1.0
    } else {
        (2.0 * inter + eps) / denom
    };
    let target = target.data().to_vec();
    Ok(g.custom(&[pred], Tensor::scalar(value), move |_, _, gout| {
        if denom == 0.0 {
            return vec![Some(vec![0.0; target.len()])];
        }
        let numer = 2.0 * inter + eps;
        let d2 = denom * denom;
        let grad = target
            .iter()
            .map(|&ti| gout[0] * (2.0 * ti * denom - numer) / d2)
            .collect();
        vec![Some(grad)]
    }))
}

/// `1 - soft_dice`.
pub fn dice_loss(g: &mut Graph, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
    let d = soft_dice(g, pred, target, eps)?;
    Ok(g.affine(d, -1.0, 1.0))
}

/// Set Dice of `pred >= 0.5` against a binary target; 1 when both are empty.
pub fn hard_dice(pred: &[f64], target: &[f64]) -> f64 {
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let p = p >= 0.5;
        let t = t >= 0.5;
        inter += usize::from(p && t);
        np += usize::from(p);
        nt += usize::from(t);
    }
    if np + nt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nt) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers, allocated on the first step to match the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "adam_step (tensor count)",
            &[params.len()],
            &[grads.len()],
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len()
        || state
            .m
            .iter()
            .zip(params.iter())
            .any(|(m, p)| m.len() != p.len())
    {
        return Err(Error::precondition(
            "adam_step",
            "parameter shapes changed between steps",
        ));
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(beta1, t as f64);
    let c2 = 1.0 - libm::pow(beta2, t as f64);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainSpec {
    pub epochs: usize,
    pub plane: PlaneConfig,
    pub shuffle_seed: u64,
    /// Checkpoint every this many epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl TrainSpec {
    pub fn new(plane: PlaneConfig) -> Self {
        Self {
            epochs: 30,
            plane,
            shuffle_seed: 0,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.adam.lr
            )));
        }
        self.plane.validate()
    }
}

/// A slab with the label of its middle slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub slab: Tensor,
    pub target: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub hard_dice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_hard_dice: f64,
    pub checkpoint_due: bool,
}

/// forward (train mode) -> Dice loss -> backward -> Adam, on one sample.
pub fn train_step(
    model: &mut UNetModel,
    adam: &mut AdamState,
    sample: &Sample,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let x = g.constant(sample.slab.clone());
    let pass = model.forward_graph(&mut g, x, Mode::Train)?;
    let loss = dice_loss(&mut g, pass.output, &sample.target, DICE_SMOOTHING)?;
    let loss_value = g.value(loss).item();
    let hard = hard_dice(g.value(pass.output).data(), sample.target.data());
    if !loss_value.is_finite() {
        return Ok(StepOutcome {
            loss: loss_value,
            hard_dice: hard,
        });
    }
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = pass
        .params
        .iter()
        .map(|&p| {
            g.take_grad(p)
                .unwrap_or_else(|| vec![0.0; g.value(p).len()])
        })
        .collect();
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    adam_step(&mut model.params_mut(), &grad_refs, adam)?;
    model.round_to_storage_precision();
    Ok(StepOutcome {
        loss: loss_value,
        hard_dice: hard,
    })
}

/// Trains one plane's model with batch size 1, reshuffling the samples every
/// epoch. `on_epoch` runs after each epoch (e.g. for logging, validation and
/// checkpointing) and may abort training by returning an error.
pub fn train_plane(
    model: &mut UNetModel,
    samples: &[Sample],
    spec: &TrainSpec,
    mut on_epoch: impl FnMut(&EpochStats, &UNetModel) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(Error::precondition("train_plane", "dataset is empty"));
    }
    let want = [
        model.config().in_slices,
        spec.plane.crop_h,
        spec.plane.crop_w,
    ];
    if want[0] != spec.plane.slab {
        return Err(Error::shape(
            "train_plane (model slices vs plane slab)",
            &[want[0]],
            &[spec.plane.slab],
        ));
    }
    for s in samples {
        if s.slab.shape() != want {
            return Err(Error::shape(
                "train_plane (sample slab)",
                s.slab.shape(),
                &want,
            ));
        }
        check_target(&Tensor::zeros(&[1, want[1], want[2]]), &s.target)?;
    }

    let mut adam = AdamState::new(spec.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.shuffle_seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(spec.epochs);
    for epoch in 1..=spec.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut dice_sum) = (0.0, 0.0);
        for &i in &order {
            let out = train_step(model, &mut adam, &samples[i])?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    sample: i,
                    loss: out.loss,
                });
            }
            loss_sum += out.loss;
            dice_sum += out.hard_dice;
        }
        let n = samples.len() as f64;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / n,
            mean_hard_dice: dice_sum / n,
            checkpoint_due: spec.checkpoint_every > 0 && epoch % spec.checkpoint_every == 0,
        };
        on_epoch(&stats, model)?;
        log.push(stats);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dice_of(p: &[f64], t: &[f64], eps: f64) -> f64 {
        let mut g = Graph::new();
        let pv = g.constant(Tensor::from_vec(&[1, 1, p.len()], p.to_vec()));
        let d = soft_dice(
            &mut g,
            pv,
            &Tensor::from_vec(&[1, 1, t.len()], t.to_vec()),
            eps,
        )
        .unwrap();
        g.value(d).item()
    }

    #[test]
    fn smoothing_closed_form_on_perfect_prediction() {
        let m = [1.0, 0.0, 1.0, 1.0, 0.0];
        let n = 3.0;
        assert_eq!(dice_of(&m, &m, 1.0), (2.0 * n + 1.0) / (2.0 * n + 1.0));
        assert!(dice_of(&m, &m, 1.0) >= 2.0 * n / (2.0 * n + 1.0));
        assert_eq!(dice_of(&[0.0; 4], &[0.0; 4], 1.0), 1.0);
    }

    #[test]
    fn shifted_square_overlap_half() {
        // 4-pixel masks on a 4x4 grid overlapping in 2 pixels.
        let mut a = [0.0; 16];
        let mut b = [0.0; 16];
        for i in [5, 6, 9, 10] {
            a[i] = 1.0;
        }
        for i in [6, 7, 10, 11] {
            b[i] = 1.0;
        }
        assert_eq!(dice_of(&a, &b, 0.0), 0.5);
    }

    #[test]
    fn loss_extremes() {
        let mut g = Graph::new();
        let t = Tensor::from_vec(&[1, 1, 4], vec![1.0, 1.0, 0.0, 0.0]);
        let p = g.constant(t.clone());
        let l = dice_loss(&mut g, p, &t, 0.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let q = g.constant(Tensor::from_vec(&[1, 1, 4], vec![0.0, 0.0, 1.0, 1.0]));
        let l = dice_loss(&mut g, q, &t, 0.0).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn soft_dice_rejects_bad_inputs() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(
            soft_dice(&mut g, p, &Tensor::zeros(&[1, 2, 3]), 1.0),
            Err(Error::Shape { .. })
        ));
        assert!(soft_dice(&mut g, p, &Tensor::full(&[1, 2, 2], 0.5), 1.0).is_err());
    }

    #[test]
    fn adam_single_step() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam_step(&mut [&mut p], &[&[1.0]], &mut st).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.item() - expected).abs() < 1e-15);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]);
        let mut st = AdamState::new(AdamConfig::default());
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[&[0.0, 0.0, 0.0]], &mut st).unwrap();
        }
        assert_eq!(p.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Tensor::from_vec(&[2], vec![0.0, 0.0]);
        let mut st = AdamState::new(AdamConfig::default());
        assert!(adam_step(&mut [&mut p], &[&[1.0]], &mut st).is_err());
    }

    #[test]
    fn hard_dice_conventions() {
        assert_eq!(hard_dice(&[0.1, 0.2], &[0.0, 0.0]), 1.0);
        assert_eq!(hard_dice(&[0.9, 0.2], &[0.0, 1.0]), 0.0);
        assert_eq!(hard_dice(&[0.5, 0.7], &[1.0, 1.0]), 1.0);
    }
}
