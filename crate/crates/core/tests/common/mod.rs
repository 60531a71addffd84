#![allow(dead_code)]

use ctqwformer::tensor::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

pub fn random_symmetric(rng: &mut impl Rng, n: usize, scale: f64) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let v = rng.random_range(-scale..scale);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    m
}

/// Random weighted graph Laplacian with edge probability `p`.
pub fn random_laplacian(rng: &mut impl Rng, n: usize, p: f64) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                let w = rng.random_range(0.05..1.0);
                m.set(i, j, -w);
                m.set(j, i, -w);
                m.set(i, i, m.at(i, i) + w);
                m.set(j, j, m.at(j, j) + w);
            }
        }
    }
    m
}

/// Relative error with a small absolute floor so vanishing gradients do
/// not inflate the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares taped gradients of `f` against central differences.
///
/// Returns (number of coordinates checked, number within `tol`, worst error).
pub fn finite_difference_check(
    inputs: &[Tensor],
    f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    eps: f64,
    tol: f64,
) -> (usize, usize, f64) {
    let tape = Tape::new(7);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Tensor]| {
        let tape = Tape::new(7);
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let (mut total, mut ok, mut worst) = (0, 0, 0.0f64);
    for (k, input) in inputs.iter().enumerate() {
        for c in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[c] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[c] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let e = rel_err(analytic[k].data()[c], numeric);
            worst = worst.max(e);
            total += 1;
            if e <= tol {
                ok += 1;
            }
        }
    }
    (total, ok, worst)
}

/// Central differences over every coordinate of every parameter in `store`
/// against the tape's gradients of `objective`.
pub fn param_fd_check(
    store: &ParamStore,
    objective: &dyn for<'t> Fn(&ParamStore, &'t Tape) -> Var<'t>,
    eps: f64,
    tol: f64,
) -> (usize, usize, f64) {
    let tape = Tape::new(7);
    let grads = tape.backward(objective(store, &tape)).unwrap();
    let (mut total, mut ok, mut worst) = (0, 0, 0.0f64);
    let mut shifted = store.clone();
    for id in store.ids() {
        for k in 0..store.get(id).numel() {
            let analytic = grads.param(id).map_or(0.0, |g| g[k]);
            let original = store.get(id).data()[k];
            shifted.get_mut(id).data_mut()[k] = original + eps;
            let plus = objective(&shifted, &Tape::new(7)).item();
            shifted.get_mut(id).data_mut()[k] = original - eps;
            let minus = objective(&shifted, &Tape::new(7)).item();
            shifted.get_mut(id).data_mut()[k] = original;
            let e = rel_err(analytic, (plus - minus) / (2.0 * eps));
            worst = worst.max(e);
            total += 1;
            if e <= tol {
                ok += 1;
            }
        }
    }
    (total, ok, worst)
}
