//! Shared oracles for the integration suites.
#![allow(dead_code)]

use attnlab::autodiff::{ParamStore, Tape, Tensor, Var};
use attnlab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

fn weighted_loss(tape: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    let w = weights[..tape.data(out).len()].to_vec();
    let prod = tape.mul_const(out, w)?;
    tape.sum(prod)
}

/// Compares analytic gradients of `Σ w ⊙ f(inputs)` (fixed random `w`) with
/// central finite differences. Returns the worst norm-wise relative error
/// over all inputs.
pub fn grad_check(inputs: &[Tensor], weight_seed: u64, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut wr = rng(weight_seed);
    let weights: Vec<f64> = (0..100_000).map(|_| wr.gen_range(-1.0..1.0)).collect();
    let store = ParamStore::new();
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        let loss = weighted_loss(&mut tape, out, &weights).unwrap();
        tape.data(loss)[0]
    };
    let mut tape = Tape::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = weighted_loss(&mut tape, out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Finite-difference check of every parameter of a store against a scalar
/// loss built by `loss`. Returns `(parameter name, relative error)` pairs.
pub fn param_grad_check(
    store: &ParamStore,
    loss: &dyn Fn(&mut Tape) -> Result<Var>,
) -> Vec<(String, f64)> {
    let mut s = store.clone();
    s.zero_grad();
    let grads = {
        let mut tape = Tape::new(&s);
        let l = loss(&mut tape).unwrap();
        tape.backward(l).unwrap()
    };
    grads.accumulate_into(&mut s);
    let value = |st: &ParamStore| -> f64 {
        let mut tape = Tape::new(st);
        let l = loss(&mut tape).unwrap();
        tape.data(l)[0]
    };
    let mut out = Vec::new();
    for id in store.ids() {
        let analytic = s
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        let mut numeric = vec![0.0; analytic.len()];
        let mut probe = store.clone();
        for i in 0..analytic.len() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = value(&probe);
            probe.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = value(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * FD_STEP);
        }
        out.push((store.name(id).to_string(), rel_err(&analytic, &numeric)));
    }
    out
}

pub mod ops;
