//! Central finite-difference oracle shared by the integration tests.
//!
//! The oracle only evaluates forward passes in `f64`; it never looks at the
//! graph's backward machinery.
#![allow(dead_code)]

use panseg::{Graph, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1e-3)`: relative error with an absolute floor
/// so that vanishing gradients are compared at 1e-6 absolute.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Numerical gradient of a scalar function of `inputs[which]`.
pub fn numeric_grad(
    f: &dyn Fn(&[Tensor<f64>]) -> f64,
    inputs: &[Tensor<f64>],
    which: usize,
    h: f64,
) -> Vec<f64> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let n = work[which].numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + h;
        let up = f(&work);
        work[which].data_mut()[i] = orig - h;
        let down = f(&work);
        work[which].data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Builds the graph once with tracked inputs, differentiates, and compares
/// every input gradient against central differences. Returns the max
/// relative error.
pub fn check_op(
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
) -> f64 {
    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.data(out)[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut g, &vars).expect("forward");
    g.backward(loss).expect("backward");
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let numeric = numeric_grad(&eval, inputs, k, FD_STEP);
        let zeros = vec![0.0; numeric.len()];
        let analytic = g.grad(*v).unwrap_or(&zeros);
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

/// Deterministic pseudo-random tensor with entries in `[-scale, scale]`,
/// kept at least `gap` away from zero so relu kinks are not straddled.
pub fn rand_tensor(shape: &[usize], seed: u64, scale: f64, gap: f64) -> Tensor<f64> {
    let mut r = panseg::rng::CounterRng::new(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = gap + (scale - gap) * r.uniform();
            if r.bernoulli(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}
