//! Finite-difference verification of every differentiable primitive.
//!
//! Each trial draws a small random problem, reduces the primitive's output to
//! a scalar with random weights, and compares the analytic gradient of every
//! input against central differences. Inputs are drawn away from the kinks
//! of ReLU and max pooling so the comparison is meaningful.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{BatchNormState, Graph, Mode, Tensor, Var};
use crate::training::soft_dice;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Primitive {
    Conv2d,
    MaxPool2d,
    Upsample2x,
    BatchNorm,
    Relu,
    Sigmoid,
    Concat,
    SoftDice,
}

impl Primitive {
    pub const ALL: [Primitive; 8] = [
        Primitive::Conv2d,
        Primitive::MaxPool2d,
        Primitive::Upsample2x,
        Primitive::BatchNorm,
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::Concat,
        Primitive::SoftDice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Conv2d => "conv2d",
            Primitive::MaxPool2d => "maxpool2d",
            Primitive::Upsample2x => "upsample2x",
            Primitive::BatchNorm => "batchnorm",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Concat => "concat",
            Primitive::SoftDice => "soft_dice",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// Maximum accepted relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Primitive::Conv2d | Primitive::Relu | Primitive::Sigmoid | Primitive::SoftDice => 1e-4,
            _ => 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    /// Scales the analytic gradient of this primitive by 1.01, emulating a
    /// broken backward pass.
    pub fault: Option<Primitive>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            step: 1e-6,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimitiveReport {
    pub primitive: Primitive,
    pub trials: usize,
    pub worst_rel_error: f64,
    pub tolerance: f64,
}

impl PrimitiveReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < self.tolerance
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Runs the suite over every primitive, one report each in [`Primitive::ALL`]
/// order.
pub fn run(config: &GradcheckConfig) -> Result<Vec<PrimitiveReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut reports = Vec::with_capacity(Primitive::ALL.len());
    for primitive in Primitive::ALL {
        let mut worst: f64 = 0.0;
        for trial in 0..config.trials {
            let (inputs, build) = problem(primitive, trial, &mut rng);
            let scale = if config.fault == Some(primitive) {
                1.01
            } else {
                1.0
            };
            worst = worst.max(max_rel_error(&inputs, config.step, scale, &build)?);
        }
        reports.push(PrimitiveReport {
            primitive,
            trials: config.trials,
            worst_rel_error: worst,
            tolerance: primitive.tolerance(),
        });
    }
    Ok(reports)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values bounded away from zero by `gap`.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = uniform(rng, shape, gap, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// A random permutation of an evenly spaced grid, so every pooling window
/// has a unique maximum separated by at least the grid spacing.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    data.shuffle(rng);
    Tensor::from_vec(shape, data)
}

fn weighted_sum(g: &mut Graph, x: Var, w: Vec<f64>) -> Var {
    let value: f64 = g.value(x).data().iter().zip(&w).map(|(a, b)| a * b).sum();
    g.custom(&[x], Tensor::scalar(value), move |_, _, gout| {
        vec![Some(w.iter().map(|wi| wi * gout[0]).collect())]
    })
}

fn problem(primitive: Primitive, trial: usize, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Builder) {
    let c = rng.random_range(1..=3);
    let h = 2 * rng.random_range(1..=3);
    let w = 2 * rng.random_range(1..=3);
    let (inputs, out_len, op): (Vec<Tensor>, usize, Builder) = match primitive {
        Primitive::Conv2d => {
            let cout = rng.random_range(1..=3);
            let inputs = vec![
                uniform(rng, &[c, h, w], -1.0, 1.0),
                uniform(rng, &[cout, c, 3, 3], -1.0, 1.0),
                uniform(rng, &[cout], -1.0, 1.0),
            ];
            (
                inputs,
                cout * h * w,
                Box::new(|g, v| g.conv2d(v[0], v[1], v[2])),
            )
        }
        Primitive::MaxPool2d => {
            let inputs = vec![distinct(rng, &[c, h, w])];
            (inputs, c * h * w / 4, Box::new(|g, v| g.maxpool2d(v[0])))
        }
        Primitive::Upsample2x => {
            let inputs = vec![uniform(rng, &[c, h, w], -1.0, 1.0)];
            (inputs, 4 * c * h * w, Box::new(|g, v| g.upsample2x(v[0])))
        }
        Primitive::BatchNorm => {
            let inputs = vec![
                uniform(rng, &[c, h, w], -2.0, 2.0),
                uniform(rng, &[c], 0.5, 1.5),
                uniform(rng, &[c], -0.5, 0.5),
            ];
            if trial.is_multiple_of(2) {
                (
                    inputs,
                    c * h * w,
                    Box::new(move |g, v| {
                        let mut state = BatchNormState::new(c);
                        g.batchnorm(v[0], v[1], v[2], &mut state, Mode::Train)
                    }),
                )
            } else {
                let mut state = BatchNormState::new(c);
                state.running_mean = uniform(rng, &[c], -0.5, 0.5).into_data();
                state.running_var = uniform(rng, &[c], 0.5, 2.0).into_data();
                state.initialized = true;
                (
                    inputs,
                    c * h * w,
                    Box::new(move |g, v| g.batchnorm_frozen(v[0], v[1], v[2], &state)),
                )
            }
        }
        Primitive::Relu => {
            let inputs = vec![signed_away_from_zero(rng, &[c, h, w], 0.05)];
            (inputs, c * h * w, Box::new(|g, v| Ok(g.relu(v[0]))))
        }
        Primitive::Sigmoid => {
            let inputs = vec![uniform(rng, &[c, h, w], -6.0, 6.0)];
            (inputs, c * h * w, Box::new(|g, v| Ok(g.sigmoid(v[0]))))
        }
        Primitive::Concat => {
            let c2 = rng.random_range(1..=3);
            let inputs = vec![
                uniform(rng, &[c, h, w], -1.0, 1.0),
                uniform(rng, &[c2, h, w], -1.0, 1.0),
            ];
            (
                inputs,
                (c + c2) * h * w,
                Box::new(|g, v| g.concat_channels(v[0], v[1])),
            )
        }
        Primitive::SoftDice => {
            let mut target = Tensor::zeros(&[1, h, w]);
            for v in target.data_mut() {
                *v = f64::from(u8::from(rng.random_bool(0.5)));
            }
            target.data_mut()[0] = 1.0;
            let eps = if trial.is_multiple_of(2) { 1.0 } else { 0.0 };
            let inputs = vec![uniform(rng, &[1, h, w], 0.05, 0.95)];
            // The loss is already scalar; the reduction weight is a single 1.
            return (
                inputs,
                Box::new(move |g, v| soft_dice(g, v[0], &target, eps)),
            );
        }
    };
    let weights: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let build: Builder = Box::new(move |g, v| {
        let y = op(g, v)?;
        Ok(weighted_sum(g, y, weights.clone()))
    });
    (inputs, build)
}

/// Largest `|a - n| / max(|a|, |n|, 1e-6)` over all input elements.
fn max_rel_error(inputs: &[Tensor], h: f64, scale: f64, build: &Builder) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x * scale).collect(),
            None => vec![0.0; g.value(v).len()],
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for ti in 0..inputs.len() {
        for (i, &a) in analytic[ti].iter().enumerate() {
            let x0 = inputs[ti].data()[i];
            probe[ti].data_mut()[i] = x0 + h;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[i] = x0 - h;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst
                .max(libm::fabs(a - numeric) / libm::fabs(a).max(libm::fabs(numeric)).max(1e-6));
        }
    }
    Ok(worst)
}
