#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpseg_core::tensor::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
}

/// `sum(w * x)` with constant weights, so that every element of `x` gets a
/// distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph, x: Var, w: &[f64]) -> Var {
    let value: f64 = g.value(x).data().iter().zip(w).map(|(a, b)| a * b).sum();
    let w = w.to_vec();
    g.custom(&[x], Tensor::scalar(value), move |_, _, gout| {
        vec![Some(w.iter().map(|wi| wi * gout[0]).collect())]
    })
}

/// Largest elementwise relative error between the analytic gradient of the
/// scalar `f(inputs)` and central finite differences with step `h`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn fd_max_rel_error(inputs: &[Tensor], h: f64, f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).len()])
        })
        .collect();

    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        for (i, &a) in analytic[ti].iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
