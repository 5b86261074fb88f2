//! Central finite-difference checks for every differentiable tape op.
//!
//! Each op output is projected onto fixed random weights, `L = Σ w·y`. The
//! analytic gradient comes from the tape; the numeric one evaluates `L` in
//! f64 from the f32 forward values at `x ± h`, dividing by the step that was
//! actually representable in f32.

use rand::Rng;
use vqvae::tensor::{Tape, Tensor, Var};

use super::{away_from_zero, rng, uniform};

pub const H: f32 = 1e-3;
pub const ABS_TOL: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-2;
pub const SEEDS: u64 = 10;
pub const SHAPES: usize = 5;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    /// Which inputs are differentiated.
    pub wrt: Vec<bool>,
    pub build: Build,
}

#[derive(Debug, Default)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub elements: usize,
    pub worst_abs: f64,
    pub failures: Vec<String>,
}

fn projected(tape: &Tape, out: Var, w: &Tensor) -> f64 {
    tape.value(out).dot(w)
}

fn forward(case: &Case, inputs: &[Tensor]) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.wrt)
        .map(|(t, &g)| tape.leaf(t.clone(), g))
        .collect();
    let out = (case.build)(&mut tape, &vars);
    (tape, vars, out)
}

/// Compares analytic and numeric gradients for one case; returns
/// `(elements checked, worst absolute error, failure descriptions)`.
pub fn check_case(case: &Case, seed: u64) -> (usize, f64, Vec<String>) {
    let (mut tape, vars, out) = forward(case, &case.inputs);
    let mut r = rng(seed ^ 0x5eed);
    let w = uniform(tape.value(out).shape(), -1.0, 1.0, &mut r);
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut count = 0;
    for (i, input) in case.inputs.iter().enumerate() {
        if !case.wrt[i] {
            continue;
        }
        let analytic = grads.get(vars[i]).unwrap().to_vec();
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let (xp, xm) = (x0 + H, x0 - H);
            let eval = |v: f32| {
                let mut ins = case.inputs.to_vec();
                ins[i].data_mut()[j] = v;
                let (t, _, o) = forward(case, &ins);
                projected(&t, o, &w)
            };
            let numeric = (eval(xp) - eval(xm)) / (xp as f64 - xm as f64);
            let a = analytic[j] as f64;
            let err = (a - numeric).abs();
            worst = worst.max(err);
            count += 1;
            if err > ABS_TOL + REL_TOL * numeric.abs() {
                failures.push(format!(
                    "input {i} element {j}: analytic {a:.6e} numeric {numeric:.6e}"
                ));
            }
        }
    }
    (count, worst, failures)
}

fn conv_shapes() -> [(usize, usize, usize, usize, usize, usize, usize, usize); SHAPES] {
    // (n, c, h, w, o, k, stride, pad)
    [
        (1, 1, 4, 4, 1, 2, 2, 0),
        (2, 3, 5, 5, 2, 3, 1, 1),
        (1, 2, 6, 6, 3, 4, 2, 1),
        (2, 1, 7, 5, 2, 3, 2, 0),
        (1, 3, 3, 3, 2, 1, 1, 0),
    ]
}

const FLAT: [&[usize]; SHAPES] = [&[3], &[2, 3], &[2, 2, 3], &[1, 2, 3, 2], &[4, 1, 2, 2]];
const NCHW: [[usize; 4]; SHAPES] = [[1, 1, 2, 2], [2, 3, 2, 1], [1, 4, 3, 3], [3, 2, 1, 2], [2, 2, 2, 3]];

fn unary(
    seed: u64,
    s: usize,
    positive_gap: bool,
    f: impl Fn(&mut Tape, Var) -> Var + 'static,
) -> Case {
    let mut r = rng(seed);
    let x = if positive_gap {
        away_from_zero(FLAT[s], &mut r)
    } else {
        uniform(FLAT[s], -1.0, 1.0, &mut r)
    };
    Case {
        inputs: vec![x],
        wrt: vec![true],
        build: Box::new(move |t, v| f(t, v[0])),
    }
}

fn binary(seed: u64, s: usize, f: impl Fn(&mut Tape, Var, Var) -> Var + 'static) -> Case {
    let mut r = rng(seed);
    Case {
        inputs: vec![
            uniform(FLAT[s], -1.0, 1.0, &mut r),
            uniform(FLAT[s], -1.0, 1.0, &mut r),
        ],
        wrt: vec![true, true],
        build: Box::new(move |t, v| f(t, v[0], v[1])),
    }
}

/// Builds case `s` of `op` for `seed`.
pub fn case(op: &str, seed: u64, s: usize) -> Case {
    let mut r = rng(seed.wrapping_mul(7919).wrapping_add(s as u64));
    match op {
        "conv2d" => {
            let (n, c, h, w, o, k, stride, pad) = conv_shapes()[s];
            Case {
                inputs: vec![
                    uniform(&[n, c, h, w], -1.0, 1.0, &mut r),
                    uniform(&[o, c, k, k], -1.0, 1.0, &mut r),
                ],
                wrt: vec![true, true],
                build: Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad).unwrap()),
            }
        }
        "conv_transpose2d" => {
            // Feature side is (n, o, oh, ow); produces the image side.
            let (n, c, h, w, o, k, stride, pad) = conv_shapes()[s];
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            Case {
                inputs: vec![
                    uniform(&[n, o, oh, ow], -1.0, 1.0, &mut r),
                    uniform(&[o, c, k, k], -1.0, 1.0, &mut r),
                ],
                wrt: vec![true, true],
                build: Box::new(move |t, v| t.conv_transpose2d(v[0], v[1], stride, pad).unwrap()),
            }
        }
        "add_bias" => {
            let shape = NCHW[s];
            Case {
                inputs: vec![
                    uniform(&shape, -1.0, 1.0, &mut r),
                    uniform(&[shape[1]], -1.0, 1.0, &mut r),
                ],
                wrt: vec![true, true],
                build: Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap()),
            }
        }
        "add" => binary(seed, s, |t, a, b| t.add(a, b).unwrap()),
        "sub" => binary(seed, s, |t, a, b| t.sub(a, b).unwrap()),
        "mul" => binary(seed, s, |t, a, b| t.mul(a, b).unwrap()),
        "mul_scalar" => {
            let c = r.gen_range(-2.0..2.0f32);
            unary(seed, s, false, move |t, a| t.mul_scalar(a, c).unwrap())
        }
        "add_scalar" => {
            let c = r.gen_range(-2.0..2.0f32);
            unary(seed, s, false, move |t, a| t.add_scalar(a, c).unwrap())
        }
        "relu" => unary(seed, s, true, |t, a| t.relu(a).unwrap()),
        "square" => unary(seed, s, false, |t, a| t.square(a).unwrap()),
        "sum" => unary(seed, s, false, |t, a| t.sum(a).unwrap()),
        "mean" => unary(seed, s, false, |t, a| t.mean(a).unwrap()),
        "gather_rows" => {
            let (k, d, b, h, w) = [(3, 2, 1, 2, 2), (5, 1, 2, 1, 3), (2, 4, 1, 3, 3), (4, 3, 2, 2, 1), (6, 2, 3, 1, 1)][s];
            let idx: Vec<usize> = (0..b * h * w).map(|_| r.gen_range(0..k)).collect();
            Case {
                inputs: vec![uniform(&[k, d], -1.0, 1.0, &mut r)],
                wrt: vec![true],
                build: Box::new(move |t, v| t.gather_rows(v[0], &idx, (b, h, w)).unwrap()),
            }
        }
        "cross_entropy" => {
            let shape = [[1, 2, 1, 1], [2, 3, 2, 2], [1, 5, 3, 1], [3, 4, 1, 2], [2, 2, 2, 3]][s];
            let targets: Vec<usize> = (0..shape[0] * shape[2] * shape[3])
                .map(|_| r.gen_range(0..shape[1]))
                .collect();
            Case {
                inputs: vec![uniform(&shape, -2.0, 2.0, &mut r)],
                wrt: vec![true],
                build: Box::new(move |t, v| t.cross_entropy(v[0], &targets).unwrap()),
            }
        }
        "discretized_logistic_nll" => {
            let [n, c, h, w] = [[1, 1, 2, 2], [2, 1, 3, 1], [1, 3, 2, 2], [2, 2, 1, 2], [1, 1, 4, 3]][s];
            let hw = h * w;
            let mut params = vec![0.0f32; n * 2 * c * hw];
            for ni in 0..n {
                for ci in 0..2 * c {
                    for q in 0..hw {
                        params[(ni * 2 * c + ci) * hw + q] = if ci < c {
                            r.gen_range(-0.6..0.6)
                        } else {
                            r.gen_range(-3.5..-0.5)
                        };
                    }
                }
            }
            let target = Tensor::from_fn([n, c, h, w], |_| {
                vqvae::io::byte_to_unit(r.gen_range(0..=255u8))
            });
            Case {
                inputs: vec![Tensor::new([n, 2 * c, h, w], params).unwrap()],
                wrt: vec![true],
                build: Box::new(move |t, v| t.discretized_logistic_nll(v[0], &target).unwrap()),
            }
        }
        other => panic!("no gradient check for `{other}`"),
    }
}

pub const OPS: &[&str] = &[
    "conv2d",
    "conv_transpose2d",
    "add_bias",
    "add",
    "sub",
    "mul",
    "mul_scalar",
    "add_scalar",
    "relu",
    "square",
    "sum",
    "mean",
    "gather_rows",
    "cross_entropy",
    "discretized_logistic_nll",
];

pub fn check_op(op: &'static str) -> OpReport {
    let mut rep = OpReport {
        op,
        ..OpReport::default()
    };
    for seed in 0..SEEDS {
        for s in 0..SHAPES {
            let c = case(op, seed, s);
            let (n, worst, fails) = check_case(&c, seed);
            rep.cases += 1;
            rep.elements += n;
            rep.worst_abs = rep.worst_abs.max(worst);
            rep.failures
                .extend(fails.into_iter().map(|f| format!("seed {seed} shape {s}: {f}")));
        }
    }
    rep
}
