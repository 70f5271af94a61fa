//! Shared helpers for finite-difference gradient checks in unit tests.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::tensor::Mat;

/// Reduce a matrix-valued output to a scalar with fixed mixing weights so
/// every output entry influences the loss.
pub fn mix_to_scalar(tape: &mut Tape, out: Var, weights: &Mat) -> Var {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(out, w);
    tape.sum_all(prod)
}

/// Deterministic non-degenerate mixing weights for an r x c output.
pub fn mix_weights(r: usize, c: usize) -> Mat {
    let mut m = Mat::zeros(r, c);
    for (i, v) in m.data.iter_mut().enumerate() {
        *v = 0.3 + 0.7 * ((i as f64 * 0.7391).sin() * 0.5 + 0.5);
    }
    m
}

/// Central-difference check of every parameter coordinate against the
/// tape gradient. `build` must construct the full forward pass from the
/// given parameter values and return a 1x1 output.
pub fn check_param_grads(
    params: &BTreeMap<String, Mat>,
    build: &dyn Fn(&mut Tape, &BTreeMap<String, Mat>) -> Var,
    eps: f64,
    rel_tol: f64,
) {
    check_param_grads_sampled(params, build, eps, rel_tol, usize::MAX);
}

/// Like [`check_param_grads`] but probing at most `max_per_tensor`
/// evenly-spaced coordinates of each parameter tensor, which keeps the
/// check affordable on full-model configurations.
pub fn check_param_grads_sampled(
    params: &BTreeMap<String, Mat>,
    build: &dyn Fn(&mut Tape, &BTreeMap<String, Mat>) -> Var,
    eps: f64,
    rel_tol: f64,
    max_per_tensor: usize,
) {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    assert_eq!((tape.value(loss).rows, tape.value(loss).cols), (1, 1));
    tape.backward(loss);
    let grads: BTreeMap<String, Mat> = tape.param_grads().into_iter().collect();

    let eval = |p: &BTreeMap<String, Mat>| -> f64 {
        let mut t = Tape::new();
        let out = build(&mut t, p);
        t.value(out).data[0]
    };
    for (name, value) in params {
        let g = grads.get(name).unwrap_or_else(|| panic!("no grad for {}", name));
        let n = value.data.len();
        let probes = n.min(max_per_tensor);
        let stride = n.div_ceil(probes.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data[i] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data[i] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = g.data[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom < rel_tol,
                "{}[{}]: analytic {} vs fd {}",
                name,
                i,
                a,
                fd
            );
        }
    }
}

/// Central-difference check of the gradient with respect to a leaf input.
/// `build` receives the leaf values and must return a 1x1 output.
pub fn check_leaf_grads(
    x0: &Mat,
    build: &dyn Fn(&mut Tape, Var) -> Var,
    eps: f64,
    rel_tol: f64,
) {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let loss = build(&mut tape, x);
    tape.backward(loss);
    let g = tape.grad(x);

    let eval = |m: &Mat| -> f64 {
        let mut t = Tape::new();
        let x = t.leaf(m.clone());
        let out = build(&mut t, x);
        t.value(out).data[0]
    };
    for i in 0..x0.data.len() {
        let mut plus = x0.clone();
        plus.data[i] += eps;
        let mut minus = x0.clone();
        minus.data[i] -= eps;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let a = g.data[i];
        let denom = a.abs().max(fd.abs()).max(1e-6);
        assert!((a - fd).abs() / denom < rel_tol, "leaf[{}]: analytic {} vs fd {}", i, a, fd);
    }
}
