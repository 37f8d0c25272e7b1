use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined node: receives the input values, the
/// output value and the upstream gradient, and returns one gradient per input
/// (`None` for inputs that receive no gradient).
pub trait BackwardFn: Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>> {}
impl<F> BackwardFn for F where F: Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>> {}

pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Affine {
        input: Var,
        scale: f64,
    },
    Custom {
        inputs: Vec<Var>,
        backward: Box<dyn BackwardFn>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => vec![*input, *kernel, *bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Concat { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::MaxPool { input, .. }
            | Op::Upsample { input }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Sum { input }
            | Op::Affine { input, .. } => vec![*input],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) tensor: Tensor,
    pub(crate) op: Op,
}

/// Append-only record of executed operations. Nodes are stored in execution
/// order, so every node's inputs precede it.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it takes part in differentiation iff the tensor
    /// `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that always requires a gradient.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Leaf that never requires a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].tensor.grad.take()
    }

    /// Records a node whose value was computed by the caller and whose
    /// gradient rule is `backward`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        backward: impl BackwardFn + 'static,
    ) -> Var {
        self.record(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
        )
    }

    pub(crate) fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    /// Pushes a derived node; it requires a gradient iff any input does.
    pub(crate) fn record(&mut self, mut tensor: Tensor, op: Op) -> Var {
        tensor.requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].tensor.requires_grad);
        tensor.grad = None;
        self.push(tensor, op)
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    /// Runs `f` with a mutable gradient buffer for `v`, allocating a zeroed one
    /// on first use, while the rest of the graph stays readable.
    fn with_grad(&mut self, v: Var, f: impl FnOnce(&[Node], &mut [f64])) {
        let n = self.nodes[v.0].tensor.data.len();
        let mut buf = self.nodes[v.0]
            .tensor
            .grad
            .take()
            .unwrap_or_else(|| vec![0.0; n]);
        f(&self.nodes, &mut buf);
        self.nodes[v.0].tensor.grad = Some(buf);
    }

    /// Back-propagates from the scalar `loss`, accumulating `d loss / d t`
    /// into every reachable tensor that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(Error::precondition(
                "backward",
                alloc::format!(
                    "loss must be a scalar, got shape {:?}",
                    self.nodes[loss.0].tensor.shape
                ),
            ));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.with_grad(loss, |_, g| g[0] += 1.0);

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].tensor.grad.take() else {
                continue;
            };
            self.propagate(i, &gout);
            self.nodes[i].tensor.grad = Some(gout);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, gout: &[f64]) {
        // The op is moved out so that inputs can be borrowed mutably.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                if self.requires_grad(bias) {
                    let cout = self.nodes[bias.0].tensor.data.len();
                    self.with_grad(bias, |_, g| ops::conv2d_bias_backward(gout, cout, g));
                }
                if self.requires_grad(kernel) {
                    self.with_grad(kernel, |nodes, g| {
                        ops::conv2d_kernel_backward(&nodes[input.0].tensor, gout, g)
                    });
                }
                if self.requires_grad(input) {
                    self.with_grad(input, |nodes, g| {
                        ops::conv2d_input_backward(
                            &nodes[kernel.0].tensor,
                            nodes[input.0].tensor.shape(),
                            gout,
                            g,
                        )
                    });
                }
            }
            Op::MaxPool { input, argmax } => {
                self.with_grad(*input, |_, g| {
                    for (&src, &go) in argmax.iter().zip(gout) {
                        g[src] += go;
                    }
                });
            }
            Op::Upsample { input } => {
                let input = *input;
                self.with_grad(input, |nodes, g| {
                    ops::upsample_backward(nodes[input.0].tensor.shape(), gout, g)
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (input, gamma, beta) = (*input, *gamma, *beta);
                let c = inv_std.len();
                let plane = xhat.len() / c;
                if self.requires_grad(beta) {
                    self.with_grad(beta, |_, g| {
                        for (ch, gb) in g.iter_mut().enumerate() {
                            *gb += gout[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                        }
                    });
                }
                if self.requires_grad(gamma) {
                    self.with_grad(gamma, |_, g| {
                        for (ch, gg) in g.iter_mut().enumerate() {
                            let r = ch * plane..(ch + 1) * plane;
                            *gg += dot(&gout[r.clone()], &xhat[r]);
                        }
                    });
                }
                if self.requires_grad(input) {
                    self.with_grad(input, |nodes, g| {
                        ops::batchnorm_input_backward(
                            nodes[gamma.0].tensor.data(),
                            xhat,
                            inv_std,
                            *batch_stats,
                            gout,
                            g,
                        )
                    });
                }
            }
            Op::Relu { input } => {
                let input = *input;
                self.with_grad(input, |nodes, g| {
                    for ((gi, &x), &go) in g.iter_mut().zip(nodes[input.0].tensor.data()).zip(gout)
                    {
                        if x > 0.0 {
                            *gi += go;
                        }
                    }
                });
            }
            Op::Sigmoid { input } => {
                let out = &self.nodes[i].tensor.data;
                let local: Vec<f64> = out
                    .iter()
                    .zip(gout)
                    .map(|(&s, &go)| go * s * (1.0 - s))
                    .collect();
                self.with_grad(*input, |_, g| add_into(g, &local));
            }
            Op::Concat { a, b } => {
                let (a, b) = (*a, *b);
                let split = self.nodes[a.0].tensor.data.len();
                if self.requires_grad(a) {
                    self.with_grad(a, |_, g| add_into(g, &gout[..split]));
                }
                if self.requires_grad(b) {
                    self.with_grad(b, |_, g| add_into(g, &gout[split..]));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        self.with_grad(v, |_, g| add_into(g, gout));
                    }
                }
            }
            Op::Sum { input } => {
                let go = gout[0];
                self.with_grad(*input, |_, g| g.iter_mut().for_each(|x| *x += go));
            }
            Op::Affine { input, scale } => {
                let scale = *scale;
                self.with_grad(*input, |_, g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += scale * go;
                    }
                });
            }
            Op::Custom { inputs, backward } => {
                let grads = {
                    let values: Vec<&Tensor> =
                        inputs.iter().map(|v| &self.nodes[v.0].tensor).collect();
                    backward(&values, &self.nodes[i].tensor, gout)
                };
                for (v, grad) in inputs.iter().zip(grads) {
                    if let Some(grad) = grad {
                        if self.requires_grad(*v) {
                            self.with_grad(*v, |_, g| add_into(g, &grad));
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
