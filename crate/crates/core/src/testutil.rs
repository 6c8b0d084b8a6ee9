//! Finite-difference oracle shared by the unit tests.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;
use crate::Result;

pub fn pseudo_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Central-difference gradient of `f` with respect to every element of every input.
pub fn numeric_grad<F>(inputs: &[Tensor], f: &F, step: f64) -> Vec<Tensor>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::new();
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let up = eval(&work);
            work[t].data_mut()[i] = orig - step;
            let down = eval(&work);
            work[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

pub fn analytic_grad<F>(inputs: &[Tensor], f: &F) -> Vec<Tensor>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

/// Largest `|analytic - numeric|` relative to the largest numeric magnitude.
pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let scale = numeric
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| a.max_abs_diff(n))
        .fold(0.0, f64::max)
        / scale
}

pub fn check_grad<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let a = analytic_grad(inputs, &f);
    let n = numeric_grad(inputs, &f, 1e-5);
    let err = max_rel_error(&a, &n);
    assert!(err < 1e-6, "gradient mismatch: relative error {err:e}");
}
