//! Reverse-mode tape. Every forward pass records its operations in a fresh
//! [`Tape`]; [`Tape::backward`] replays them in reverse. Nodes are appended
//! in evaluation order, so index order is already a topological order.

use super::linalg::{mm, mm_acc, mm_nt_acc, mm_tn_acc, transpose};
use super::param::{ParamStore, Parameter};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp<F: Real> {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, in input order.
    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, grad: &[F]) -> Vec<Vec<F>>;
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<F: Real> {
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Softmax(Var),
    Log(Var),
    Normalize(Var),
    MeanRows(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Nll {
        probs: Var,
        targets: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        softmax: Vec<F>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<F>>,
    },
}

impl<F: Real> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Normalize(a)
            | Op::MeanRows(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Gather { x, .. } => vec![*x],
            Op::ConcatRows(parts) => parts.clone(),
            Op::Nll { probs, .. } => vec![*probs],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Sentinel index for [`Tape::gather`] meaning "emit zero".
pub const PAD_INDEX: usize = usize::MAX;

const LN_EPS: f64 = 1e-5;
const NLL_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.nodes.push(Node {
            value: p.value.cast(),
            op: Op::Param(p.name.clone()),
            requires_grad: !p.frozen,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        Ok(self.param(store.require(name)?))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("lhs {:?} vs rhs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, format!("expected a 2-d tensor, got shape {s:?}"))),
        }
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.map(a, |v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    /// `x[m, n] + row[n]`, broadcasting the row over the leading axes.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(row).numel() != n {
            return Err(Error::dim(
                "add_row",
                format!("last axis {} of {:?} vs row of {} elements", n, self.shape(x), self.value(row).numel()),
            ));
        }
        let r = self.value(row).data().to_vec();
        let x_val = self.value(x);
        let data = x_val
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % n])
            .collect();
        let out = Tensor::new(x_val.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner axes differ: lhs axis 1 = {k}, rhs axis 0 = {k2}"),
            ));
        }
        let data = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let out = Tensor::new(vec![c, r], transpose(self.value(a).data(), r, c))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |v| if v > F::zero() { v } else { F::zero() });
        self.push(out, Op::Relu(a))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let n = x.last_dim();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.map(a, |v| v.ln());
        self.push(out, Op::Log(a))
    }

    /// Divides each last-axis row by its sum.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.last_dim();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            let s: F = row.iter().copied().sum();
            if !(s > F::zero()) {
                return Err(Error::Numeric("normalize: row sum is not positive".into()));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Normalize(a)))
    }

    /// Mean over axis 0 of a 2-d tensor, giving `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("mean_rows", a)?;
        let x = self.value(a).data();
        let inv = F::one() / F::of(r as f64);
        let mut data = vec![F::zero(); c];
        for row in x.chunks(c) {
            for (d, &v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(vec![1, c], data)?;
        Ok(self.push(out, Op::MeanRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.value(v).numel() != n {
                return Err(Error::dim(
                    "layer_norm",
                    format!("{name} has {} elements, normalized axis has {n}", self.value(v).numel()),
                ));
            }
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::new();
        let mut out = Vec::with_capacity(xv.numel());
        let nf = F::of(n as f64);
        for row in xv.data().chunks(n) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let r = F::one() / (var + F::of(LN_EPS)).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Cross-correlation of `x[N,C,H,W]` with `w[K,C,kh,kw]` plus `b[K]`,
    /// computed as im2col followed by a matrix product.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, b, stride, pad)?;
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut cols = vec![F::zero(); geom.n * rows * cols_n];
        let mut out = vec![F::zero(); geom.n * geom.k * cols_n];
        let in_stride = geom.c * geom.h * geom.w;
        for s in 0..geom.n {
            let col = &mut cols[s * rows * cols_n..(s + 1) * rows * cols_n];
            im2col(&xv[s * in_stride..(s + 1) * in_stride], &geom, col);
            let o = &mut out[s * geom.k * cols_n..(s + 1) * geom.k * cols_n];
            for (kk, chunk) in o.chunks_mut(cols_n).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[kk]);
            }
            mm_acc(wv, col, o, geom.k, rows, cols_n);
        }
        let out = Tensor::new(vec![geom.n, geom.k, geom.ho, geom.wo], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }))
    }

    fn conv_geom(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let [n, c, h, wd] = *self.shape(x) else {
            return Err(Error::dim("conv2d", format!("input must be [N,C,H,W], got {:?}", self.shape(x))));
        };
        let [k, c2, kh, kw] = *self.shape(w) else {
            return Err(Error::dim("conv2d", format!("weight must be [K,C,kh,kw], got {:?}", self.shape(w))));
        };
        if c != c2 {
            return Err(Error::dim(
                "conv2d",
                format!("channel axis: input axis 1 = {c}, weight axis 1 = {c2}"),
            ));
        }
        if self.value(b).numel() != k {
            return Err(Error::dim(
                "conv2d",
                format!("bias has {} elements, weight axis 0 = {k}", self.value(b).numel()),
            ));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d: stride must be at least 1".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{} (axes 2,3)", h + 2 * pad, wd + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w: wd,
            k,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == PAD_INDEX`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        let bound = src.len();
        let mut data = Vec::with_capacity(index.len());
        for &i in &index {
            if i == PAD_INDEX {
                data.push(F::zero());
            } else if i < bound {
                data.push(src[i]);
            } else {
                return Err(Error::Index {
                    op: "gather",
                    index: i,
                    bound,
                });
            }
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather { x, index }))
    }

    /// Stacks 2-d tensors with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::EmptyInput("concat_rows"));
        };
        let (_, c) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c2) = self.dims2("concat_rows", p)?;
            if c2 != c {
                return Err(Error::dim("concat_rows", format!("axis 1: {c} vs {c2}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    fn check_targets(&self, op: &'static str, v: Var, targets: &[usize]) -> Result<(usize, usize)> {
        let (n, k) = self.dims2(op, v)?;
        if targets.len() != n {
            return Err(Error::dim(op, format!("{n} rows but {} targets", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index { op, index: t, bound: k });
        }
        Ok((n, k))
    }

    /// Mean negative log-likelihood of probability rows `[N, K]`.
    pub fn nll(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.check_targets("nll", probs, targets)?;
        let p = self.value(probs).data();
        let floor = F::of(NLL_FLOOR);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -p[i * k + t].max(floor).ln())
            .sum::<F>()
            / F::of(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of logit rows `[N, K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.check_targets("cross_entropy", logits, targets)?;
        let mut sm = self.value(logits).data().to_vec();
        let mut loss = F::zero();
        for (i, row) in sm.chunks_mut(k).enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            loss += lse - row[targets[i]];
            softmax_in_place(row);
        }
        loss /= F::of(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                softmax: sm,
            },
        ))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<F>, op: Box<dyn CustomOp<F>>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Nodes that do not require grad
    /// are never visited.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = 0;
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => grads[i].as_ref().map(|g| (name.clone(), g.clone())),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            params,
            visited,
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.acc(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.iter().map(|&v| v * *c).collect()),
            Op::AddRow(x, row) => {
                self.acc(grads, *x, g.to_vec());
                if self.wants(*row) {
                    let n = self.value(*row).numel();
                    let mut gr = vec![F::zero(); n];
                    for (j, &v) in g.iter().enumerate() {
                        gr[j % n] += v;
                    }
                    self.acc(grads, *row, gr);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    mm_nt_acc(g, self.value(*b).data(), &mut ga, m, n, k);
                    self.acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![F::zero(); k * n];
                    mm_tn_acc(self.value(*a).data(), g, &mut gb, m, k, n);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                self.acc(grads, *a, transpose(g, r, c));
            }
            Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let n = out.last_dim();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(out.data().chunks(n)) {
                    let dot: F = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    ga.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                self.acc(grads, *a, ga);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect());
            }
            Op::Normalize(a) => {
                let n = out.last_dim();
                let x = self.value(*a).data();
                let mut ga = Vec::with_capacity(g.len());
                for ((gr, yr), xr) in g.chunks(n).zip(out.data().chunks(n)).zip(x.chunks(n)) {
                    let s: F = xr.iter().copied().sum();
                    let dot: F = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    ga.extend(gr.iter().map(|&gv| (gv - dot) / s));
                }
                self.acc(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let inv = F::one() / F::of(r as f64);
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend(g.iter().map(|&v| v * inv));
                }
                self.acc(grads, *a, ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![g[0]; n]);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = out.last_dim();
                let gv = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut gg = vec![F::zero(); n];
                    let mut gb = vec![F::zero(); n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                        }
                    }
                    self.acc(grads, *gain, gg);
                    self.acc(grads, *bias, gb);
                }
                if self.wants(*x) {
                    let nf = F::of(n as f64);
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, hr), &r) in g.chunks(n).zip(xhat.chunks(n)).zip(rstd) {
                        let dh: Vec<F> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let sum_dh: F = dh.iter().copied().sum();
                        let sum_dh_h: F = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        gx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(&d, &h)| r / nf * (nf * d - sum_dh - h * sum_dh_h)),
                        );
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (rows, cn) = (geom.col_rows(), geom.col_cols());
                let per_out = geom.k * cn;
                if self.wants(*b) {
                    let mut gb = vec![F::zero(); geom.k];
                    for s in 0..geom.n {
                        for (kk, chunk) in g[s * per_out..(s + 1) * per_out].chunks(cn).enumerate() {
                            gb[kk] += chunk.iter().copied().sum::<F>();
                        }
                    }
                    self.acc(grads, *b, gb);
                }
                if self.wants(*w) {
                    let mut gw = vec![F::zero(); geom.k * rows];
                    for s in 0..geom.n {
                        mm_nt_acc(
                            &g[s * per_out..(s + 1) * per_out],
                            &cols[s * rows * cn..(s + 1) * rows * cn],
                            &mut gw,
                            geom.k,
                            cn,
                            rows,
                        );
                    }
                    self.acc(grads, *w, gw);
                }
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let in_stride = geom.c * geom.h * geom.w;
                    let mut gx = vec![F::zero(); geom.n * in_stride];
                    let mut gcol = vec![F::zero(); rows * cn];
                    for s in 0..geom.n {
                        gcol.iter_mut().for_each(|v| *v = F::zero());
                        mm_tn_acc(wv, &g[s * per_out..(s + 1) * per_out], &mut gcol, geom.k, rows, cn);
                        col2im(&gcol, geom, &mut gx[s * in_stride..(s + 1) * in_stride]);
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Gather { x, index } => {
                let mut gx = vec![F::zero(); self.value(*x).numel()];
                for (&i, &gv) in index.iter().zip(g) {
                    if i != PAD_INDEX {
                        gx[i] += gv;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc(grads, p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Nll { probs, targets } => {
                let k = self.shape(*probs)[1];
                let p = self.value(*probs).data();
                let scale = g[0] / F::of(targets.len() as f64);
                let floor = F::of(NLL_FLOOR);
                let mut gp = vec![F::zero(); p.len()];
                for (i, &t) in targets.iter().enumerate() {
                    let v = p[i * k + t];
                    if v > floor {
                        gp[i * k + t] = -scale / v;
                    }
                }
                self.acc(grads, *probs, gp);
            }
            Op::CrossEntropy {
                logits,
                targets,
                softmax,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / F::of(targets.len() as f64);
                let mut gl: Vec<F> = softmax.iter().map(|&v| v * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * k + t] -= scale;
                }
                self.acc(grads, *logits, gl);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<F>> = inputs.iter().map(|v| self.value(*v)).collect();
                for (v, gi) in inputs.iter().zip(op.backward(&vals, out, g)) {
                    self.acc(grads, *v, gi);
                }
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients<F: Real> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(String, Vec<F>)>,
    visited: usize,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of graph nodes the reverse pass traversed.
    pub fn visited_nodes(&self) -> usize {
        self.visited
    }

    /// Adds parameter gradients into matching entries of `store`.
    /// Frozen parameters never accumulate.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (name, g) in &self.params {
            let Some(p) = store.get_mut(name) else { continue };
            if p.frozen {
                continue;
            }
            let g32 = g.iter().map(|v| v.to_f32().unwrap_or(f32::NAN));
            match &mut p.grad {
                Some(existing) => existing.iter_mut().zip(g32).for_each(|(e, v)| *e += v),
                slot @ None => *slot = Some(g32.collect()),
            }
        }
    }
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn im2col<F: Real>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    let cn = g.col_cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[r * cn..(r + 1) * cn];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        row.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(col: &[F], g: &ConvGeom, x: &mut [F]) {
    let cn = g.col_cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[r * cn..(r + 1) * cn];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            x[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
