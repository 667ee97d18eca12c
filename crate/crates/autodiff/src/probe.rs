//! Randomized gradient probes, one per primitive op.
//!
//! Each probe draws a random shape and inputs from `seed`, reduces the op
//! output with a fixed random weighting and runs [`grad_check`] on it.
//! Inputs to ops with a kink or a restricted domain are drawn away from it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::check::{grad_check, GradCheckReport};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::AutodiffError;

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "mul_scalar",
    "reshape",
    "concat",
    "slice",
    "sum",
    "sum_axis",
    "mean",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "elu",
    "leaky_relu",
    "softplus",
    "clamp_min",
    "segment_softmax",
    "layer_norm",
    "gather_rows",
    "scatter_add_rows",
];

pub const PROBE_STEP: f64 = 1e-5;

fn shape(rng: &mut ChaCha8Rng, min_rank: usize) -> Vec<usize> {
    let rank = rng.gen_range(min_rank.max(1)..=3);
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], draw: impl Fn(&mut ChaCha8Rng) -> f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| draw(rng)).collect()).unwrap()
}

fn uniform(lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> f64 {
    move |r| r.gen_range(lo..hi)
}

/// Magnitude in `[lo, hi)` with a random sign.
fn away_from_zero(lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> f64 {
    move |r| {
        let v = r.gen_range(lo..hi);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    }
}

/// A shape that broadcasts against `s`: some dims set to 1, maybe fewer leading dims.
fn broadcastable(rng: &mut ChaCha8Rng, s: &[usize]) -> Vec<usize> {
    let drop = rng.gen_range(0..s.len());
    s[drop..].iter().map(|&d| if rng.gen_bool(0.3) { 1 } else { d }).collect()
}

struct Case {
    inputs: Vec<Tensor>,
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>>,
}

fn case(name: &str, rng: &mut ChaCha8Rng) -> Option<Case> {
    let unary = |rng: &mut ChaCha8Rng, draw: Box<dyn Fn(&mut ChaCha8Rng) -> f64>| {
        let s = shape(rng, 1);
        tensor(rng, &s, draw)
    };
    let c = match name {
        "matmul" => {
            let (m, k, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            Case {
                inputs: vec![tensor(rng, &[m, k], uniform(-1.0, 1.0)), tensor(rng, &[k, n], uniform(-1.0, 1.0))],
                build: Box::new(|t, x| t.matmul(x[0], x[1])),
            }
        }
        "add" | "sub" | "mul" | "div" => {
            let s = shape(rng, 1);
            let b = broadcastable(rng, &s);
            let (mut x, mut y) = (s, b);
            if rng.gen_bool(0.5) && name != "div" {
                std::mem::swap(&mut x, &mut y);
            }
            let xa = tensor(rng, &x, uniform(-1.0, 1.0));
            let yb = tensor(rng, &y, away_from_zero(0.5, 2.0));
            let op = name.to_string();
            Case {
                inputs: vec![xa, yb],
                build: Box::new(move |t, v| match op.as_str() {
                    "add" => t.add(v[0], v[1]),
                    "sub" => t.sub(v[0], v[1]),
                    "mul" => t.mul(v[0], v[1]),
                    _ => t.div(v[0], v[1]),
                }),
            }
        }
        "add_scalar" => {
            let c = rng.gen_range(-2.0..2.0);
            Case { inputs: vec![unary(rng, Box::new(uniform(-1.0, 1.0)))], build: Box::new(move |t, x| t.add_scalar(x[0], c)) }
        }
        "mul_scalar" => {
            let c = rng.gen_range(-2.0..2.0);
            Case { inputs: vec![unary(rng, Box::new(uniform(-1.0, 1.0)))], build: Box::new(move |t, x| t.mul_scalar(x[0], c)) }
        }
        "reshape" => {
            let x = unary(rng, Box::new(uniform(-1.0, 1.0)));
            let n = x.numel();
            Case { inputs: vec![x], build: Box::new(move |t, v| t.reshape(v[0], &[n])) }
        }
        "concat" => {
            let s = shape(rng, 1);
            let axis = rng.gen_range(0..s.len());
            let parts = rng.gen_range(1..=3);
            let inputs = (0..parts)
                .map(|_| {
                    let mut si = s.clone();
                    si[axis] = rng.gen_range(1..=3);
                    tensor(rng, &si, uniform(-1.0, 1.0))
                })
                .collect();
            Case { inputs, build: Box::new(move |t, v| t.concat(v, axis)) }
        }
        "slice" => {
            let s = shape(rng, 1);
            let axis = rng.gen_range(0..s.len());
            let start = rng.gen_range(0..s[axis]);
            let len = rng.gen_range(1..=s[axis] - start);
            let x = tensor(rng, &s, uniform(-1.0, 1.0));
            Case { inputs: vec![x], build: Box::new(move |t, v| t.slice(v[0], axis, start, len)) }
        }
        "sum" => Case { inputs: vec![unary(rng, Box::new(uniform(-1.0, 1.0)))], build: Box::new(|t, x| t.sum(x[0])) },
        "mean" => Case { inputs: vec![unary(rng, Box::new(uniform(-1.0, 1.0)))], build: Box::new(|t, x| t.mean(x[0])) },
        "sum_axis" => {
            let s = shape(rng, 1);
            let axis = rng.gen_range(0..s.len());
            let x = tensor(rng, &s, uniform(-1.0, 1.0));
            Case { inputs: vec![x], build: Box::new(move |t, v| t.sum_axis(v[0], axis)) }
        }
        "exp" => Case { inputs: vec![unary(rng, Box::new(uniform(-2.0, 2.0)))], build: Box::new(|t, x| t.exp(x[0])) },
        "log" => Case { inputs: vec![unary(rng, Box::new(uniform(0.5, 3.0)))], build: Box::new(|t, x| t.log(x[0])) },
        "sqrt" => Case { inputs: vec![unary(rng, Box::new(uniform(0.5, 3.0)))], build: Box::new(|t, x| t.sqrt(x[0])) },
        "tanh" => Case { inputs: vec![unary(rng, Box::new(uniform(-2.0, 2.0)))], build: Box::new(|t, x| t.tanh(x[0])) },
        "sigmoid" => {
            Case { inputs: vec![unary(rng, Box::new(uniform(-3.0, 3.0)))], build: Box::new(|t, x| t.sigmoid(x[0])) }
        }
        "softplus" => {
            Case { inputs: vec![unary(rng, Box::new(uniform(-3.0, 3.0)))], build: Box::new(|t, x| t.softplus(x[0])) }
        }
        "elu" => Case { inputs: vec![unary(rng, Box::new(away_from_zero(0.01, 2.0)))], build: Box::new(|t, x| t.elu(x[0])) },
        "leaky_relu" => Case {
            inputs: vec![unary(rng, Box::new(away_from_zero(0.01, 2.0)))],
            build: Box::new(|t, x| t.leaky_relu(x[0], 0.2)),
        },
        "clamp_min" => Case {
            inputs: vec![unary(rng, Box::new(|r: &mut ChaCha8Rng| 0.3 + away_from_zero(0.01, 1.0)(r)))],
            build: Box::new(|t, x| t.clamp_min(x[0], 0.3)),
        },
        "segment_softmax" => {
            let e = rng.gen_range(1..=6);
            let nseg = rng.gen_range(1..=e);
            let mut seg: Vec<usize> = (0..e).map(|i| i % nseg).collect();
            seg.shuffle(rng);
            let s = if rng.gen_bool(0.5) { vec![e] } else { vec![e, rng.gen_range(1..=3)] };
            let x = tensor(rng, &s, uniform(-2.0, 2.0));
            Case { inputs: vec![x], build: Box::new(move |t, v| t.segment_softmax(v[0], &seg)) }
        }
        "layer_norm" => {
            let mut s = shape(rng, 1);
            *s.last_mut().unwrap() = rng.gen_range(2..=5);
            let x = tensor(rng, &s, uniform(-2.0, 2.0));
            Case { inputs: vec![x], build: Box::new(|t, v| t.layer_norm(v[0], 1e-5)) }
        }
        "gather_rows" => {
            let s = shape(rng, 1);
            let idx: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..s[0])).collect();
            let x = tensor(rng, &s, uniform(-1.0, 1.0));
            Case { inputs: vec![x], build: Box::new(move |t, v| t.gather_rows(v[0], &idx)) }
        }
        "scatter_add_rows" => {
            let mut s = shape(rng, 1);
            let n = rng.gen_range(1..=4);
            let idx: Vec<usize> = (0..s[0]).map(|_| rng.gen_range(0..n)).collect();
            s[0] = idx.len();
            let x = tensor(rng, &s, uniform(-1.0, 1.0));
            Case { inputs: vec![x], build: Box::new(move |t, v| t.scatter_add_rows(v[0], &idx, n)) }
        }
        _ => return None,
    };
    Some(c)
}

/// Gradient check of primitive `name` on inputs drawn from `seed`.
/// `None` for an unknown name.
pub fn probe(name: &str, seed: u64) -> Option<Result<GradCheckReport, AutodiffError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = case(name, &mut rng)?;
    let mut params = ParamStore::new();
    for (i, t) in c.inputs.iter().enumerate() {
        params.insert(format!("x{i}"), t.clone());
    }
    // Output shape, to draw the reduction weights.
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = c.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        match (c.build)(&mut tape, &vars) {
            Ok(v) => tape.shape(v).to_vec(),
            Err(e) => return Some(Err(e)),
        }
    };
    let w = tensor(&mut rng, &out_shape, uniform(-1.0, 1.0));
    let n = c.inputs.len();
    let f = move |tape: &mut Tape, vars: &std::collections::BTreeMap<String, Var>| {
        let xs: Vec<Var> = (0..n).map(|i| vars[&format!("x{i}")]).collect();
        let y = (c.build)(tape, &xs)?;
        let wv = tape.constant(w.clone());
        let yw = tape.mul(y, wv)?;
        tape.sum(yw)
    };
    Some(grad_check(f, &params, PROBE_STEP))
}
