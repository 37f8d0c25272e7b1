use alloc::vec;
use alloc::vec::Vec;

use super::graph::{Graph, Op, Var};
use super::{Mode, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Logistic function. Saturates to exactly 0 below -37, mirroring the point
/// above which `1 / (1 + e^-x)` already rounds to exactly 1.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else if x < -37.0 {
        0.0
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub initialized: bool,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn observe(&mut self, mean: &[f64], unbiased_var: &[f64]) {
        for (r, &m) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(unbiased_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
        self.initialized = true;
    }
}

impl Graph {
    /// Same-size 3x3 convolution with zero padding of one pixel and stride 1.
    ///
    /// `input` is `[C_in, H, W]`, `kernel` is `[C_out, C_in, 3, 3]` and `bias`
    /// is `[C_out]`; the output is `[C_out, H, W]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let (cin, h, w) = x.dims3("conv2d")?;
        let [cout, kcin, 3, 3] = k.shape()[..] else {
            return Err(Error::shape("conv2d kernel", k.shape(), &[0, cin, 3, 3]));
        };
        if kcin != cin {
            return Err(Error::shape("conv2d", x.shape(), k.shape()));
        }
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d bias", b.shape(), &[cout]));
        }
        let hw = h * w;
        let cols = im2col(x.data(), cin, h, w);
        let mut out = vec![0.0; cout * hw];
        for (o, row) in out.chunks_exact_mut(hw).enumerate() {
            row.fill(b.data()[o]);
        }
        // out[cout, hw] += kernel[cout, cin*9] * cols[cin*9, hw]
        gemm(
            cout,
            cin * 9,
            hw,
            (k.data(), cin * 9, 1),
            (&cols, hw, 1),
            &mut out,
        );
        let t = Tensor::from_vec(&[cout, h, w], out);
        Ok(self.record(
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
        ))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first position in
    /// row-major order within the window.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.dims3("maxpool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::precondition(
                "maxpool2d",
                alloc::format!("spatial size {h}x{w} must be even"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = x.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let top = base + 2 * oy * w + 2 * ox;
                    let mut best = top;
                    for cand in [top + 1, top + w, top + w + 1] {
                        if data[cand] > data[best] || (data[cand].is_nan() && !data[best].is_nan())
                        {
                            best = cand;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::from_vec(&[c, oh, ow], out);
        Ok(self.record(t, Op::MaxPool { input, argmax }))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.dims3("upsample2x")?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let src = x.channel(ch);
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for y in 0..oh {
                let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
                for (xx, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *d = srow[xx / 2];
                }
            }
        }
        let t = Tensor::from_vec(&[c, oh, ow], out);
        Ok(self.record(t, Op::Upsample { input }))
    }

    /// Per-channel batch normalization over the spatial axes followed by the
    /// affine map `gamma * x_hat + beta`.
    ///
    /// In [`Mode::Train`] the batch statistics are used and folded into
    /// `state` with momentum [`BN_MOMENTUM`]; in [`Mode::Infer`] the stored
    /// running statistics are used and `state` is left untouched.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (c, h, w) = self.value(input).dims3("batchnorm")?;
                let n = (h * w) as f64;
                let x = self.value(input).data();
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let plane = &x[ch * h * w..(ch + 1) * h * w];
                    let m = plane.iter().sum::<f64>() / n;
                    mean[ch] = m;
                    var[ch] = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                }
                let out = self.batchnorm_with(input, gamma, beta, &mean, &var, true)?;
                let unbiased: Vec<f64> = if h * w > 1 {
                    var.iter().map(|v| v * n / (n - 1.0)).collect()
                } else {
                    var.clone()
                };
                state.observe(&mean, &unbiased);
                Ok(out)
            }
            Mode::Infer => self.batchnorm_frozen(input, gamma, beta, state),
        }
    }

    /// Inference-mode batch normalization from stored running statistics.
    pub fn batchnorm_frozen(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
    ) -> Result<Var> {
        if !state.initialized {
            return Err(Error::UninitializedStats);
        }
        self.batchnorm_with(
            input,
            gamma,
            beta,
            &state.running_mean,
            &state.running_var,
            false,
        )
    }

    fn batchnorm_with(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        batch_stats: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.dims3("batchnorm")?;
        for (name, v) in [("batchnorm gamma", gamma), ("batchnorm beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(name, self.value(v).shape(), &[c]));
            }
        }
        if mean.len() != c {
            return Err(Error::shape("batchnorm running stats", &[mean.len()], &[c]));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let plane = h * w;
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / libm::sqrt(v + BN_EPSILON))
            .collect();
        let mut xhat = vec![0.0; c * plane];
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            let r = ch * plane..(ch + 1) * plane;
            for ((xh, o), &xv) in xhat[r.clone()]
                .iter_mut()
                .zip(&mut out[r.clone()])
                .zip(&x.data()[r])
            {
                *xh = (xv - mean[ch]) * inv_std[ch];
                *o = g[ch] * *xh + b[ch];
            }
        }
        let t = Tensor::from_vec(&[c, h, w], out);
        Ok(self.record(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
            .collect();
        let t = Tensor::from_vec(x.shape(), data);
        self.record(t, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let t = Tensor::from_vec(x.shape(), data);
        self.record(t, Op::Sigmoid { input })
    }

    /// Stacks `a` before `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let (ca, ha, wa) = ta.dims3("concat_channels")?;
        let (cb, hb, wb) = tb.dims3("concat_channels")?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape("concat_channels", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let t = Tensor::from_vec(&[ca + cb, ha, wa], data);
        Ok(self.record(t, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(ta.shape(), data);
        Ok(self.record(t, Op::Add { a, b }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum { input })
    }

    /// `scale * x + offset`, elementwise.
    pub fn affine(&mut self, input: Var, scale: f64, offset: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| scale * v + offset).collect();
        let t = Tensor::from_vec(x.shape(), data);
        self.record(t, Op::Affine { input, scale })
    }
}

/// Patch matrix `[C*9, H*W]` of a zero-padded `[C, H, W]` image; row
/// `c*9 + dy*3 + dx` holds the input shifted by `(dy-1, dx-1)`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &mut cols[(ch * 9 + dy * 3 + dx) * hw..][..hw];
                let (x0, x1) = x_range(dx, w);
                for y in 0..h {
                    let Some(sy) = (y + dy).checked_sub(1).filter(|&sy| sy < h) else {
                        continue;
                    };
                    let d = &mut row[y * w + x0..y * w + x1];
                    d.copy_from_slice(&src[sy * w + x0 + dx - 1..sy * w + x1 + dx - 1]);
                }
            }
        }
    }
    cols
}

/// Scatter-add of a patch-matrix gradient back onto the image gradient.
fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, g: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let dst = &mut g[ch * hw..(ch + 1) * hw];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &cols[(ch * 9 + dy * 3 + dx) * hw..][..hw];
                let (x0, x1) = x_range(dx, w);
                for y in 0..h {
                    let Some(sy) = (y + dy).checked_sub(1).filter(|&sy| sy < h) else {
                        continue;
                    };
                    let d = &mut dst[sy * w + x0 + dx - 1..sy * w + x1 + dx - 1];
                    for (a, &b) in d.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Output columns `x0..x1` whose source column `x + dx - 1` is in range.
fn x_range(dx: usize, w: usize) -> (usize, usize) {
    match dx {
        0 => (1, w),
        1 => (0, w),
        _ => (0, w - 1),
    }
}

/// `c[m, n] += a[m, k] * b[k, n]`, each operand given as `(data, row_stride,
/// col_stride)`; `c` is dense row-major.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    assert!(a.0.len() > (m - 1) * a.1 + (k - 1) * a.2);
    assert!(b.0.len() > (k - 1) * b.1 + (n - 1) * b.2);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_bias_backward(gout: &[f64], cout: usize, g: &mut [f64]) {
    let hw = gout.len() / cout;
    for (o, gb) in g.iter_mut().enumerate() {
        *gb += gout[o * hw..(o + 1) * hw].iter().sum::<f64>();
    }
}

pub(crate) fn conv2d_kernel_backward(input: &Tensor, gout: &[f64], g: &mut [f64]) {
    let (cin, h, w) = input.dims3("conv2d").expect("validated in forward");
    let hw = h * w;
    let cout = gout.len() / hw;
    let cols = im2col(input.data(), cin, h, w);
    // g[cout, cin*9] += gout[cout, hw] * cols^T[hw, cin*9]
    gemm(cout, hw, cin * 9, (gout, hw, 1), (&cols, 1, hw), g);
}

pub(crate) fn conv2d_input_backward(
    kernel: &Tensor,
    in_shape: &[usize],
    gout: &[f64],
    g: &mut [f64],
) {
    let (cin, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let hw = h * w;
    let cout = kernel.shape()[0];
    let mut gcols = vec![0.0; cin * 9 * hw];
    // gcols[cin*9, hw] = kernel^T[cin*9, cout] * gout[cout, hw]
    gemm(
        cin * 9,
        cout,
        hw,
        (kernel.data(), 1, cin * 9),
        (gout, hw, 1),
        &mut gcols,
    );
    col2im_add(&gcols, cin, h, w, g);
}

pub(crate) fn upsample_backward(in_shape: &[usize], gout: &[f64], g: &mut [f64]) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        let src = &gout[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut g[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
}

pub(crate) fn batchnorm_input_backward(
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    gout: &[f64],
    g: &mut [f64],
) {
    let c = inv_std.len();
    let plane = xhat.len() / c;
    let n = plane as f64;
    for ch in 0..c {
        let r = ch * plane..(ch + 1) * plane;
        let scale = gamma[ch] * inv_std[ch];
        let (go, xh, gi) = (&gout[r.clone()], &xhat[r.clone()], &mut g[r]);
        if batch_stats {
            let sum_g: f64 = go.iter().sum();
            let sum_gx: f64 = go.iter().zip(xh).map(|(a, b)| a * b).sum();
            for ((d, &gv), &xv) in gi.iter_mut().zip(go).zip(xh) {
                *d += scale * (gv - sum_g / n - xv * sum_gx / n);
            }
        } else {
            for (d, &gv) in gi.iter_mut().zip(go) {
                *d += scale * gv;
            }
        }
    }
}
