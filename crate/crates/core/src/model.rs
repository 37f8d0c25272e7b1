//! The single-plane encoder-decoder network.
//!
//! Layout for `depth = D` with channel counts `c_l = base * growth^l`:
//!
//! * encoder level `l < D`: two conv-BN-ReLU blocks, then 2x2 max pooling;
//! * bottleneck: two conv-BN-ReLU blocks at `c_D`;
//! * decoder level `l` (from `D-1` down to 0): nearest upsampling, one
//!   channel-preserving conv-BN-ReLU ("up" block), concatenation with the
//!   output of the *first* block of encoder level `l`, two conv-BN-ReLU blocks;
//! * a final 3x3 convolution to one map followed by a sigmoid.
//!
//! The default full-scale configuration (`D = 4`, base 64) has 23
//! convolutional layers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, Graph, Mode, Tensor, Var};
use crate::volume::SlicePredictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UNetConfig {
    /// Slab thickness `s`, i.e. number of input channels.
    pub in_slices: usize,
    /// Number of pooling levels.
    pub depth: usize,
    /// Feature maps at the first level.
    pub base_channels: usize,
    /// Channel multiplier per level.
    pub channel_growth: usize,
}

impl UNetConfig {
    pub fn full_scale(in_slices: usize) -> Self {
        Self {
            in_slices,
            depth: 4,
            base_channels: 64,
            channel_growth: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rule = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        };
        rule(self.in_slices >= 1, "in_slices must be >= 1")?;
        rule(self.depth >= 1, "depth must be >= 1")?;
        rule(self.depth < 16, "depth must be < 16")?;
        rule(self.base_channels >= 1, "base_channels must be >= 1")?;
        rule(self.channel_growth >= 1, "channel_growth must be >= 1")?;
        Ok(())
    }

    /// Feature maps at level `l` (`l == depth` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_growth.pow(level as u32)
    }

    /// Input spatial sizes must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let d = self.size_divisor();
        if !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::shape(
                "unet input (H, W must be divisible by 2^depth)",
                &[h, w],
                &[d, d],
            ));
        }
        Ok(())
    }

    /// Convolutional layers in execution order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut push = |name: String, in_channels, out_channels, normalized| {
            specs.push(LayerSpec {
                name,
                in_channels,
                out_channels,
                normalized,
            })
        };
        for l in 0..self.depth {
            let cin = if l == 0 {
                self.in_slices
            } else {
                self.channels(l - 1)
            };
            push(format!("enc{l}.conv0"), cin, self.channels(l), true);
            push(
                format!("enc{l}.conv1"),
                self.channels(l),
                self.channels(l),
                true,
            );
        }
        let d = self.depth;
        push(
            "bottleneck.conv0".into(),
            self.channels(d - 1),
            self.channels(d),
            true,
        );
        push(
            "bottleneck.conv1".into(),
            self.channels(d),
            self.channels(d),
            true,
        );
        for l in (0..d).rev() {
            let below = self.channels(l + 1);
            push(format!("dec{l}.up"), below, below, true);
            push(
                format!("dec{l}.conv0"),
                below + self.channels(l),
                self.channels(l),
                true,
            );
            push(
                format!("dec{l}.conv1"),
                self.channels(l),
                self.channels(l),
                true,
            );
        }
        push("final".into(), self.channels(0), 1, false);
        specs
    }
}

/// Static description of one convolutional layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// One 3x3 convolution with its optional batch-norm affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub kernel: Tensor,
    pub bias: Tensor,
    pub norm: Option<NormParams>,
}

impl ConvLayer {
    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }
}

/// Named tensor as exchanged with the weights file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Result of a forward pass recorded on a graph. `params` follows the order
/// of [`UNetModel::params`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Var,
    pub params: Vec<Var>,
}

/// Activation tags recorded by [`UNetModel::forward_traced`].
#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Block {
        layer: String,
        output: Var,
    },
    Skip {
        level: usize,
        source: String,
        skip: Var,
        concat: Var,
    },
}

enum Running<'a> {
    Train(&'a mut [Option<BatchNormState>]),
    Infer(&'a [Option<BatchNormState>]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetModel {
    config: UNetConfig,
    layers: Vec<ConvLayer>,
    running: Vec<Option<BatchNormState>>,
}

/// Builds a freshly initialized network. Kernels are He-uniform,
/// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))` with `fan_in = 9 * C_in`, drawn at
/// 32-bit precision; biases and `beta` start at 0, `gamma` at 1.
pub fn build_unet(config: UNetConfig, seed: u64) -> Result<UNetModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut running = Vec::new();
    for spec in config.layer_specs() {
        let fan_in = (spec.in_channels * 9) as f64;
        let bound = libm::sqrt(6.0 / fan_in);
        let n = spec.out_channels * spec.in_channels * 9;
        let kernel: Vec<f64> = (0..n)
            .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * bound) as f32 as f64)
            .collect();
        let c = spec.out_channels;
        layers.push(ConvLayer {
            name: spec.name,
            kernel: Tensor::from_vec(&[c, spec.in_channels, 3, 3], kernel),
            bias: Tensor::zeros(&[c]),
            norm: spec.normalized.then(|| NormParams {
                gamma: Tensor::full(&[c], 1.0),
                beta: Tensor::zeros(&[c]),
            }),
        });
        running.push(spec.normalized.then(|| BatchNormState::new(c)));
    }
    Ok(UNetModel {
        config,
        layers,
        running,
    })
}

impl UNetModel {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Trainable scalars: kernels, biases and batch-norm `gamma`/`beta`.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Trainable tensors in canonical order (per layer: kernel, bias, gamma,
    /// beta).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.kernel);
            out.push(&layer.bias);
            if let Some(n) = &layer.norm {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.kernel);
            out.push(&mut layer.bias);
            if let Some(n) = &mut layer.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    pub fn running_stats(&self) -> &[Option<BatchNormState>] {
        &self.running
    }

    pub fn running_stats_initialized(&self) -> bool {
        self.running.iter().flatten().all(|s| s.initialized)
    }

    /// Rounds every stored parameter and running statistic to the nearest
    /// `f32`. Weights are kept at 32-bit storage precision so that a saved
    /// model reproduces its in-memory outputs exactly.
    pub fn round_to_storage_precision(&mut self) {
        let round = |v: &mut f64| *v = *v as f32 as f64;
        for t in self.params_mut() {
            t.data_mut().iter_mut().for_each(round);
        }
        for s in self.running.iter_mut().flatten() {
            s.running_mean.iter_mut().for_each(round);
            s.running_var.iter_mut().for_each(round);
        }
    }

    /// Every stored tensor, including running statistics, with stable names.
    pub fn export_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &Tensor| {
            out.push(NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
        };
        for (layer, running) in self.layers.iter().zip(&self.running) {
            push(format!("{}.kernel", layer.name), &layer.kernel);
            push(format!("{}.bias", layer.name), &layer.bias);
            if let (Some(n), Some(s)) = (&layer.norm, running) {
                push(format!("{}.gamma", layer.name), &n.gamma);
                push(format!("{}.beta", layer.name), &n.beta);
                let c = s.channels();
                push(
                    format!("{}.running_mean", layer.name),
                    &Tensor::from_vec(&[c], s.running_mean.clone()),
                );
                push(
                    format!("{}.running_var", layer.name),
                    &Tensor::from_vec(&[c], s.running_var.clone()),
                );
            }
        }
        out
    }

    /// Rebuilds a model from tensors in [`export_tensors`](Self::export_tensors)
    /// order, validating every name and shape against `config`.
    pub fn from_tensors(
        config: UNetConfig,
        stats_initialized: bool,
        tensors: Vec<NamedTensor>,
    ) -> Result<Self> {
        let mut model = build_unet(config, 0)?;
        let expected = model.export_tensors();
        if expected.len() != tensors.len() {
            return Err(Error::Data(format!(
                "expected {} tensors for this configuration, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (want, got) in expected.iter().zip(&tensors) {
            if want.name != got.name {
                return Err(Error::Data(format!(
                    "expected tensor '{}', found '{}'",
                    want.name, got.name
                )));
            }
            if want.shape != got.shape || got.data.len() != want.data.len() {
                return Err(Error::Shape {
                    op: "load tensor",
                    lhs: got.shape.clone(),
                    rhs: want.shape.clone(),
                });
            }
        }
        let mut it = tensors.into_iter().map(|t| t.data);
        let mut next = || it.next().expect("length checked");
        for (layer, running) in model.layers.iter_mut().zip(&mut model.running) {
            layer.kernel.data_mut().copy_from_slice(&next());
            layer.bias.data_mut().copy_from_slice(&next());
            if let (Some(n), Some(s)) = (&mut layer.norm, running) {
                n.gamma.data_mut().copy_from_slice(&next());
                n.beta.data_mut().copy_from_slice(&next());
                s.running_mean = next();
                s.running_var = next();
                s.initialized = stats_initialized;
            }
        }
        Ok(model)
    }

    fn check_slab(&self, slab: &Tensor) -> Result<()> {
        let (c, h, w) = slab.dims3("unet forward")?;
        if c != self.config.in_slices {
            return Err(Error::shape(
                "unet forward (slab channels)",
                slab.shape(),
                &[self.config.in_slices, h, w],
            ));
        }
        self.config.check_input_size(h, w)
    }

    /// Runs the network on a `[s, H, W]` slab, returning the `[1, H, W]`
    /// probability map. Train mode updates the running statistics.
    pub fn forward(&mut self, slab: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(slab.clone());
        let pass = self.forward_graph(&mut g, x, mode)?;
        Ok(g.value(pass.output).clone())
    }

    /// Inference-mode forward pass on a shared model.
    pub fn infer(&self, slab: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(slab.clone());
        let pass = self.infer_graph(&mut g, x)?;
        Ok(g.value(pass.output).clone())
    }

    /// Records the forward pass on `g`. In train mode the parameters are
    /// registered as gradient-tracking leaves.
    pub fn forward_graph(&mut self, g: &mut Graph, slab: Var, mode: Mode) -> Result<ForwardPass> {
        match mode {
            Mode::Train => run(
                &self.config,
                &self.layers,
                Running::Train(&mut self.running),
                g,
                slab,
                None,
            ),
            Mode::Infer => self.infer_graph(g, slab),
        }
    }

    pub fn infer_graph(&self, g: &mut Graph, slab: Var) -> Result<ForwardPass> {
        run(
            &self.config,
            &self.layers,
            Running::Infer(&self.running),
            g,
            slab,
            None,
        )
    }

    /// Forward pass that also reports which activation feeds every decoder
    /// skip connection.
    pub fn forward_traced(
        &mut self,
        g: &mut Graph,
        slab: Var,
        mode: Mode,
    ) -> Result<(ForwardPass, Vec<TraceEvent>)> {
        let mut trace = Vec::new();
        let running = match mode {
            Mode::Train => Running::Train(&mut self.running),
            Mode::Infer => Running::Infer(&self.running),
        };
        let pass = run(
            &self.config,
            &self.layers,
            running,
            g,
            slab,
            Some(&mut trace),
        )?;
        Ok((pass, trace))
    }
}

fn run(
    config: &UNetConfig,
    layers: &[ConvLayer],
    mut running: Running<'_>,
    g: &mut Graph,
    slab: Var,
    mut trace: Option<&mut Vec<TraceEvent>>,
) -> Result<ForwardPass> {
    let (c, h, w) = g.value(slab).dims3("unet forward")?;
    if c != config.in_slices {
        return Err(Error::shape(
            "unet forward (slab channels)",
            g.value(slab).shape(),
            &[config.in_slices, h, w],
        ));
    }
    config.check_input_size(h, w)?;

    let track = matches!(running, Running::Train(_));
    let mut params = Vec::new();
    let mut next_layer = 0usize;
    let mut block = |g: &mut Graph, x: Var, running: &mut Running<'_>| -> Result<Var> {
        let i = next_layer;
        next_layer += 1;
        let layer = &layers[i];
        let k = g.leaf(layer.kernel.clone().with_requires_grad(track));
        let b = g.leaf(layer.bias.clone().with_requires_grad(track));
        params.extend([k, b]);
        let mut y = g.conv2d(x, k, b)?;
        if let Some(norm) = &layer.norm {
            let gamma = g.leaf(norm.gamma.clone().with_requires_grad(track));
            let beta = g.leaf(norm.beta.clone().with_requires_grad(track));
            params.extend([gamma, beta]);
            y = match running {
                Running::Train(states) => {
                    let st = states[i]
                        .as_mut()
                        .expect("normalized layer has running stats");
                    g.batchnorm(y, gamma, beta, st, Mode::Train)?
                }
                Running::Infer(states) => {
                    let st = states[i]
                        .as_ref()
                        .expect("normalized layer has running stats");
                    g.batchnorm_frozen(y, gamma, beta, st)?
                }
            };
            y = g.relu(y);
        }
        Ok(y)
    };

    let tag = |trace: &mut Option<&mut Vec<TraceEvent>>, layer: &str, output: Var| {
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceEvent::Block {
                layer: layer.into(),
                output,
            });
        }
    };

    let mut skips = Vec::with_capacity(config.depth);
    let mut x = slab;
    for l in 0..config.depth {
        let first = block(g, x, &mut running)?;
        tag(&mut trace, &format!("enc{l}.conv0"), first);
        let second = block(g, first, &mut running)?;
        tag(&mut trace, &format!("enc{l}.conv1"), second);
        skips.push(first);
        x = g.maxpool2d(second)?;
    }
    x = block(g, x, &mut running)?;
    tag(&mut trace, "bottleneck.conv0", x);
    x = block(g, x, &mut running)?;
    tag(&mut trace, "bottleneck.conv1", x);
    for l in (0..config.depth).rev() {
        x = g.upsample2x(x)?;
        x = block(g, x, &mut running)?;
        tag(&mut trace, &format!("dec{l}.up"), x);
        let skip = skips[l];
        let joined = g.concat_channels(x, skip)?;
        if let Some(t) = trace.as_deref_mut() {
            let source = t
                .iter()
                .find_map(|e| match e {
                    TraceEvent::Block { layer, output } if *output == skip => Some(layer.clone()),
                    _ => None,
                })
                .unwrap_or_default();
            t.push(TraceEvent::Skip {
                level: l,
                source,
                skip,
                concat: joined,
            });
        }
        x = block(g, joined, &mut running)?;
        tag(&mut trace, &format!("dec{l}.conv0"), x);
        x = block(g, x, &mut running)?;
        tag(&mut trace, &format!("dec{l}.conv1"), x);
    }
    let logits = block(g, x, &mut running)?;
    tag(&mut trace, "final", logits);
    let output = g.sigmoid(logits);
    Ok(ForwardPass { output, params })
}

impl SlicePredictor for UNetModel {
    fn in_slices(&self) -> usize {
        self.config.in_slices
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        self.config.check_input_size(h, w)
    }

    fn predict(&self, slab: &Tensor) -> Result<Tensor> {
        self.check_slab(slab)?;
        self.infer(slab)
    }
}
