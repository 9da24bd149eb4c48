//! Central finite-difference checks of reverse-mode gradients, run in f64.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst relative error across inputs.
    pub max_rel_error: f64,
    /// Relative error per input, `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub per_input: Vec<f64>,
}

/// Compares the tape gradient of the scalar built by `build` against
/// central differences with step `h` over every element of every input.
pub fn check<G>(inputs: &[Tensor<f64>], h: f64, build: G) -> Result<GradCheck>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (idx, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[idx].numel()]);
        let mut diff = 0.0;
        let mut norm_a = 0.0;
        let mut norm_n = 0.0;
        for e in 0..inputs[idx].numel() {
            let orig = work[idx].data()[e];
            work[idx].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[idx].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[idx].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            diff += (analytic[e] - numeric).powi(2);
            norm_a += analytic[e].powi(2);
            norm_n += numeric.powi(2);
        }
        let denom = norm_a.sqrt().max(norm_n.sqrt());
        per_input.push(if denom < 1e-12 { diff.sqrt() } else { diff.sqrt() / denom });
    }
    Ok(GradCheck {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    })
}

/// Worst relative error of one operation over a batch of random cases.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub worst: f64,
}

pub const SUITE_OPS: [&str; 21] = [
    "add", "sub", "mul", "scale", "add_row", "matmul", "transpose", "reshape", "relu", "softmax", "log", "normalize",
    "mean_rows", "sum", "layer_norm", "conv2d", "gather", "concat_rows", "nll", "cross_entropy", "log_mel",
];

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Values bounded away from zero so a relu kink is never straddled.
fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.05, 1.5);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Row-stochastic matrix with entries bounded away from zero.
fn probs(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut t = uniform(rng, &[rows, cols], 0.2, 1.0);
    for r in t.data_mut().chunks_mut(cols) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// `sum(y ⊙ w)` for a fixed random `w`, so every output element carries a
/// distinct upstream gradient.
fn project(t: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = t.constant(w.clone());
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn one_case(op: &str, rng: &mut impl Rng, h: f64) -> Result<f64> {
    let d = |rng: &mut dyn rand::RngCore, lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (m, n, k) = (d(rng, 1, 4), d(rng, 1, 5), d(rng, 1, 4));
    let res = match op {
        "add" | "sub" | "mul" => {
            let a = uniform(rng, &[m, n], -1.5, 1.5);
            let b = uniform(rng, &[m, n], -1.5, 1.5);
            let w = uniform(rng, &[m, n], -1.0, 1.0);
            check(&[a, b], h, |t, v| {
                let y = match op {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                project(t, y, &w)
            })?
        }
        "scale" => {
            let a = uniform(rng, &[m, n], -1.5, 1.5);
            let w = uniform(rng, &[m, n], -1.0, 1.0);
            let c = rng.gen_range(-2.0..2.0);
            check(&[a], h, |t, v| {
                let y = t.scale(v[0], c);
                project(t, y, &w)
            })?
        }
        "add_row" => {
            let a = uniform(rng, &[m, n], -1.5, 1.5);
            let b = uniform(rng, &[n], -1.5, 1.5);
            let w = uniform(rng, &[m, n], -1.0, 1.0);
            check(&[a, b], h, |t, v| {
                let y = t.add_row(v[0], v[1])?;
                project(t, y, &w)
            })?
        }
        "matmul" => {
            let a = uniform(rng, &[m, k], -1.5, 1.5);
            let b = uniform(rng, &[k, n], -1.5, 1.5);
            let w = uniform(rng, &[m, n], -1.0, 1.0);
            check(&[a, b], h, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, &w)
            })?
        }
        "transpose" => {
            let a = uniform(rng, &[m, n], -1.5, 1.5);
            let w = uniform(rng, &[n, m], -1.0, 1.0);
            check(&[a], h, |t, v| {
                let y = t.transpose(v[0])?;
                project(t, y, &w)
            })?
        }
        "reshape" => {
            let a = uniform(rng, &[m, n, k], -1.5, 1.5);
            let w = uniform(rng, &[m * n, k], -1.0, 1.0);
            check(&[a], h, |t, v| {
                let y = t.reshape(v[0], &[m * n, k])?;
                project(t, y, &w)
            })?
        }
        "relu" => {
            let a = off_zero(rng, &[m, n]);
            let w = uniform(rng, &[m, n], -1.0, 1.0);
            check(&[a], h, |t, v| {
                let y = t.relu(v[0]);
                project(t, y, &w)
            })?
        }
        "softmax" => {
            let a = uniform(rng, &[m, n + 1], -3.0, 3.0);
            let w = uniform(rng, &[m, n + 1], -1.0, 1.0);
            check(&[a], h, |t, v| {
                let y = t.softmax(v[0])?;
                project(t, y, &w)
            })?
        }
        "log" => {
            let a = uniform(rng, &[m, n], 0.3, 2.0);
            let w = uniform(rng, &[m, n], -1.0, 1.0);
            check(&[a], h, |t, v| {
                let y = t.log(v[0]);
                project(t, y, &w)
            })?
        }
        "normalize" => {
            let a = uniform(rng, &[m, n], 0.2, 2.0);
            let w = uniform(rng, &[m, n], -1.0, 1.0);
            check(&[a], h, |t, v| {
                let y = t.normalize(v[0])?;
                project(t, y, &w)
            })?
        }
        "mean_rows" => {
            let a = uniform(rng, &[m, n], -1.5, 1.5);
            let w = uniform(rng, &[1, n], -1.0, 1.0);
            check(&[a], h, |t, v| {
                let y = t.mean_rows(v[0])?;
                project(t, y, &w)
            })?
        }
        "sum" => {
            let a = uniform(rng, &[m, n], -1.5, 1.5);
            check(&[a], h, |t, v| Ok(t.sum(v[0])))?
        }
        "layer_norm" => {
            // Two features saturate the normalization and leave a gradient
            // too small for central differences to resolve.
            let n = n + 2;
            let a = uniform(rng, &[m, n], -2.0, 2.0);
            let g = uniform(rng, &[n], 0.5, 1.5);
            let b = uniform(rng, &[n], -0.5, 0.5);
            let w = uniform(rng, &[m, n], -1.0, 1.0);
            check(&[a, g, b], h, |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                project(t, y, &w)
            })?
        }
        "conv2d" => {
            let (cin, cout) = (d(rng, 1, 3), d(rng, 1, 3));
            let kk = [1, 3][d(rng, 0, 1)];
            let (stride, pad) = (d(rng, 1, 2), d(rng, 0, kk / 2));
            let (hh, ww) = (d(rng, kk, 6), d(rng, kk, 6));
            let x = uniform(rng, &[1, cin, hh, ww], -1.0, 1.0);
            let wt = uniform(rng, &[cout, cin, kk, kk], -1.0, 1.0);
            let b = uniform(rng, &[cout], -0.5, 0.5);
            let (oh, ow) = ((hh + 2 * pad - kk) / stride + 1, (ww + 2 * pad - kk) / stride + 1);
            let w = uniform(rng, &[1, cout, oh, ow], -1.0, 1.0);
            check(&[x, wt, b], h, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                project(t, y, &w)
            })?
        }
        "gather" => {
            let a = uniform(rng, &[m, n], -1.5, 1.5);
            let len = d(rng, 1, 8);
            let index: Vec<usize> = (0..len)
                .map(|_| if rng.gen_bool(0.2) { super::PAD_INDEX } else { rng.gen_range(0..m * n) })
                .collect();
            let w = uniform(rng, &[len], -1.0, 1.0);
            check(&[a], h, |t, v| {
                let y = t.gather(v[0], index.clone(), &[len])?;
                project(t, y, &w)
            })?
        }
        "concat_rows" => {
            let a = uniform(rng, &[m, n], -1.5, 1.5);
            let b = uniform(rng, &[k, n], -1.5, 1.5);
            let w = uniform(rng, &[m + k, n], -1.0, 1.0);
            check(&[a, b], h, |t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                project(t, y, &w)
            })?
        }
        "nll" => {
            let p = probs(rng, m, n + 1);
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..=n)).collect();
            check(&[p], h, |t, v| t.nll(v[0], &targets))?
        }
        "cross_entropy" => {
            let a = uniform(rng, &[m, n + 1], -3.0, 3.0);
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..=n)).collect();
            check(&[a], h, |t, v| t.cross_entropy(v[0], &targets))?
        }
        "log_mel" => {
            let cfg = crate::dsp::MelConfig {
                window: 32,
                hop: 16,
                fft: 64,
                mel_bins: 8,
                floor: 1e-6,
            };
            let len = 32 + 16 * d(rng, 0, 3);
            let x = uniform(rng, &[len], -1.0, 1.0);
            let frames = cfg.frames(len).expect("long enough");
            let w = uniform(rng, &[8, frames], -1.0, 1.0);
            check(&[x], h, |t, v| {
                let y = crate::dsp::log_mel_var(t, v[0], &cfg)?;
                project(t, y, &w)
            })?
        }
        other => return Err(crate::error::Error::Usage(format!("unknown op `{other}`"))),
    };
    Ok(res.max_rel_error)
}

/// Runs `cases` random finite-difference checks for every differentiable
/// operation, including the log-mel front end.
pub fn op_suite(cases: usize, h: f64, seed: u64) -> Result<Vec<OpCheck>> {
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut rng = crate::rng::stream_rng(seed, &format!("gradcheck/{op}"));
            let mut worst = 0.0f64;
            for _ in 0..cases {
                worst = worst.max(one_case(op, &mut rng, h)?);
            }
            Ok(OpCheck { op, cases, worst })
        })
        .collect()
}
