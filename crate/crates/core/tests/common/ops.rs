//! Randomized gradient-check cases: one per differentiable op and penalty.

use attnlab::attention;
use attnlab::autodiff::{Tape, Tensor, Var};
use attnlab::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::uniform;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    /// Draws inputs and returns the function under test for one trial.
    pub make: Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Build)>,
}

fn case(name: &'static str, make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Build) + 'static) -> OpCase {
    OpCase {
        name,
        make: Box::new(make),
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

fn random_bools(n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(0.4)).collect()
}

/// Distributions over the last dimension, from random logits.
fn softmax_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.softmax(x, None)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r), uniform(vec![a, b], -1., 1., r)], Box::new(|t, x| t.add(x[0], x[1])))
        }),
        case("sub", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r), uniform(vec![a, b], -1., 1., r)], Box::new(|t, x| t.sub(x[0], x[1])))
        }),
        case("mul", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r), uniform(vec![a, b], -1., 1., r)], Box::new(|t, x| t.mul(x[0], x[1])))
        }),
        case("mul_const", |r| {
            let (a, b) = dims(r);
            let c: Vec<f64> = (0..a * b).map(|_| r.gen_range(-1.0..1.0)).collect();
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(move |t, x| t.mul_const(x[0], c.clone())))
        }),
        case("scale", |r| {
            let (a, b) = dims(r);
            let c = r.gen_range(-2.0..2.0);
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(move |t, x| t.scale(x[0], c)))
        }),
        case("add_scalar", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(|t, x| {
                let y = t.add_scalar(x[0], 0.7)?;
                t.mul(y, y)
            }))
        }),
        case("add_bias", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r), uniform(vec![b], -1., 1., r)], Box::new(|t, x| {
                let y = t.add_bias(x[0], x[1])?;
                t.mul(y, y)
            }))
        }),
        case("mul_bias", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r), uniform(vec![b], -1., 1., r)], Box::new(|t, x| t.mul_bias(x[0], x[1])))
        }),
        case("matmul", |r| {
            let (p, q) = dims(r);
            let s = r.gen_range(1..5);
            (vec![uniform(vec![p, q], -1., 1., r), uniform(vec![q, s], -1., 1., r)], Box::new(|t, x| t.matmul(x[0], x[1])))
        }),
        case("tanh", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(|t, x| t.tanh(x[0])))
        }),
        case("sigmoid", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(|t, x| t.sigmoid(x[0])))
        }),
        case("relu", |r| {
            let (a, b) = dims(r);
            // keep inputs away from the kink
            let mut x = uniform(vec![a, b], 0.01, 1., r);
            for v in x.data_mut() {
                if r.gen_bool(0.5) {
                    *v = -*v;
                }
            }
            (vec![x], Box::new(|t, x| t.relu(x[0])))
        }),
        case("exp", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(|t, x| t.exp(x[0])))
        }),
        case("log", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], 0.1, 1.1, r)], Box::new(|t, x| t.log(x[0])))
        }),
        case("concat", |r| {
            let a = r.gen_range(1..4);
            let (w1, w2) = (r.gen_range(1..4), r.gen_range(1..4));
            (vec![uniform(vec![a, w1], -1., 1., r), uniform(vec![a, w2], -1., 1., r)], Box::new(|t, x| t.concat(&[x[0], x[1], x[0]])))
        }),
        case("slice_last", |r| {
            let (a, b) = (r.gen_range(1..4), r.gen_range(3..7));
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(move |t, x| t.slice_last(x[0], 1, b - 1)))
        }),
        case("reshape", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(move |t, x| {
                let y = t.reshape(x[0], vec![a * b])?;
                t.mul(y, y)
            }))
        }),
        case("gather", |r| {
            let (a, b) = dims(r);
            let idx: Vec<usize> = (0..7).map(|_| r.gen_range(0..a * b)).collect();
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(move |t, x| t.gather(x[0], idx.clone(), vec![7])))
        }),
        case("embedding_lookup", |r| {
            let (v, d) = (r.gen_range(2..6), r.gen_range(1..4));
            let ids: Vec<usize> = (0..5).map(|_| r.gen_range(0..v)).collect();
            (vec![uniform(vec![v, d], -1., 1., r)], Box::new(move |t, x| t.embedding(x[0], &ids)))
        }),
        case("sum", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(|t, x| {
                let s = t.sum(x[0])?;
                t.mul(s, s)
            }))
        }),
        case("mean", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(|t, x| {
                let s = t.mean(x[0])?;
                t.mul(s, s)
            }))
        }),
        case("sum_last", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(|t, x| t.sum_last(x[0])))
        }),
        case("softmax", |r| {
            let (a, b) = (r.gen_range(1..4), r.gen_range(2..7));
            let mut valid = random_bools(a * b, r);
            for row in 0..a {
                valid[row * b] = true;
            }
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(move |t, x| t.softmax(x[0], Some(valid.clone()))))
        }),
        case("layer_norm", |r| {
            let (a, b) = (r.gen_range(1..4), r.gen_range(2..7));
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(|t, x| t.layer_norm(x[0], 1e-5)))
        }),
        case("row_max", |r| {
            let (a, b) = dims(r);
            (vec![uniform(vec![a, b], -1., 1., r)], Box::new(|t, x| t.row_max(x[0])))
        }),
        case("cross_entropy", |r| {
            let (a, c) = (r.gen_range(1..4), r.gen_range(2..7));
            let targets: Vec<usize> = (0..a).map(|_| r.gen_range(0..c)).collect();
            (vec![uniform(vec![a, c], -1., 1., r)], Box::new(move |t, x| t.cross_entropy(x[0], &targets)))
        }),
        case("where_rows", |r| {
            let (a, b) = dims(r);
            let take = random_bools(a, r);
            (vec![uniform(vec![a, b], -1., 1., r), uniform(vec![a, b], -1., 1., r)], Box::new(move |t, x| t.where_rows(&take, x[0], x[1])))
        }),
        case("batched_scores", |r| {
            let (b, n, d) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..4));
            (vec![uniform(vec![b, n, d], -1., 1., r), uniform(vec![b, d], -1., 1., r)], Box::new(|t, x| t.batched_scores(x[0], x[1])))
        }),
        case("batched_context", |r| {
            let (b, n, d) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..4));
            (vec![uniform(vec![b, n], -1., 1., r), uniform(vec![b, n, d], -1., 1., r)], Box::new(|t, x| t.batched_context(x[0], x[1])))
        }),
        case("head_scores", |r| {
            let (b, n, h) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..3));
            let d = h * r.gen_range(1..3);
            (vec![uniform(vec![b, n, d], -1., 1., r), uniform(vec![b, n, d], -1., 1., r)], Box::new(move |t, x| t.head_scores(x[0], x[1], h)))
        }),
        case("head_apply", |r| {
            let (b, n, h) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..3));
            let d = h * r.gen_range(1..3);
            (vec![uniform(vec![b, h, n, n], -1., 1., r), uniform(vec![b, n, d], -1., 1., r)], Box::new(|t, x| t.head_apply(x[0], x[1])))
        }),
        case("penalty_single", |r| {
            let (b, n) = (r.gen_range(1..4), r.gen_range(2..7));
            let mut m = random_bools(b * n, r);
            for row in 0..b {
                m[row * n] = false;
            }
            let lambda = r.gen_range(0.1..2.0);
            (vec![uniform(vec![b, n], -1., 1., r)], Box::new(move |t, x| {
                let a = softmax_rows(t, x[0])?;
                attention::penalty_single(t, a, &m, lambda)
            }))
        }),
        case("penalty_multihead_mean", |r| {
            let (b, n, h) = (r.gen_range(1..3), r.gen_range(2..6), r.gen_range(1..5));
            let mut m = random_bools(b * n, r);
            for row in 0..b {
                m[row * n] = false;
            }
            let lambda = r.gen_range(0.1..2.0);
            let inputs = (0..h).map(|_| uniform(vec![b, n], -1., 1., r)).collect();
            (inputs, Box::new(move |t, x| {
                let heads = x.iter().map(|&v| softmax_rows(t, v)).collect::<Result<Vec<_>>>()?;
                attention::penalty_multihead_mean(t, &heads, &m, lambda)
            }))
        }),
        case("penalty_multihead_max", |r| {
            let (b, n, h) = (r.gen_range(1..3), r.gen_range(2..6), r.gen_range(1..5));
            let mut m = random_bools(b * n, r);
            for row in 0..b {
                m[row * n] = false;
            }
            let lambda = r.gen_range(0.1..2.0);
            let inputs = (0..h).map(|_| uniform(vec![b, n], -1., 1., r)).collect();
            (inputs, Box::new(move |t, x| {
                let heads = x.iter().map(|&v| softmax_rows(t, v)).collect::<Result<Vec<_>>>()?;
                attention::penalty_multihead_max(t, &heads, &m, lambda)
            }))
        }),
        case("penalty_kl_adversarial", |r| {
            let (b, n) = (r.gen_range(1..3), r.gen_range(2..6));
            let raw: Vec<f64> = (0..b * n).map(|_| r.gen_range(0.05..1.0)).collect();
            let mut old = Vec::new();
            for row in raw.chunks(n) {
                let s: f64 = row.iter().sum();
                old.extend(row.iter().map(|v| v / s));
            }
            let lambda = r.gen_range(0.1..2.0);
            (vec![uniform(vec![b, n], -1., 1., r)], Box::new(move |t, x| {
                let a = softmax_rows(t, x[0])?;
                attention::penalty_kl_adversarial(t, a, &old, lambda)
            }))
        }),
    ]
}
