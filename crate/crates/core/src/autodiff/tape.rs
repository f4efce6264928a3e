//! The computation record and its differentiable operations.
//!
//! Every operation appends one node whose inputs already exist on the tape,
//! so the node order is a topological order and [`Tape::backward`] is a single
//! reverse sweep. Nodes that cannot reach a trainable leaf are marked as not
//! requiring gradients and are skipped by the sweep.

use super::conv::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        batch: usize,
    },
    BiasAdd {
        x: Var,
        bias: Var,
    },
    Laplacian {
        x: Var,
        spacing: f64,
    },
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Dense {
        x: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    Scalar,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients (inputs, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())
            .expect("elementwise map keeps the shape");
        let rg = self.any_grad(&[x]);
        self.push(out, op, rg)
    }

    fn broadcast(&self, a: Var, b: Var, what: &str) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.is_scalar() {
            Ok(Broadcast::Scalar)
        } else {
            Err(Error::Shape(format!(
                "{what}: operands {:?} and {:?} do not broadcast",
                ta.shape(),
                tb.shape()
            )))
        }
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let mode = self.broadcast(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = match mode {
            Broadcast::Same => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => {
                let y = tb.item();
                ta.data().iter().map(|&x| f(x, y)).collect()
            }
        };
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[F,C,kH,kW]` kernel, zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let mismatch = || {
            Error::Shape(format!(
                "conv2d: input {:?} incompatible with kernel {:?} (stride {stride}, padding {padding})",
                ti.shape(),
                tk.shape()
            ))
        };
        let [n, c, h, w] = ti.dims::<4>("conv2d input").map_err(|_| mismatch())?;
        let [f, kc, kh, kw] = tk.dims::<4>("conv2d kernel").map_err(|_| mismatch())?;
        if stride == 0 || kc != c || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(mismatch());
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let data = conv::forward(&geom, n, ti.data(), tk.data());
        let out = Tensor::new(vec![n, f, geom.out_h, geom.out_w], data)?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch: n,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias `[C]` to `[N,C,...]`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() < 2 || tb.shape() != [tx.shape()[1]] {
            return Err(Error::Shape(format!(
                "bias_add: bias {:?} does not match channels of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let c = tx.shape()[1];
        let inner: usize = tx.shape()[2..].iter().product();
        let mut data = tx.data().to_vec();
        for (idx, v) in data.iter_mut().enumerate() {
            *v += tb.data()[(idx / inner) % c];
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::BiasAdd { x, bias }, rg))
    }

    /// Five-point Laplacian of every `[H,W]` plane, replicate-padded edges.
    pub fn stencil_laplacian(&mut self, x: Var, spacing: f64) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = tx.dims::<4>("stencil_laplacian")?;
        if h < 3 || w < 3 {
            return Err(Error::Shape(format!("stencil_laplacian needs H, W >= 3, got {h}x{w}")));
        }
        if !(spacing > 0.0) {
            return Err(Error::InvalidParameter(format!("spacing must be > 0, got {spacing}")));
        }
        let inv_dx2 = 1.0 / (spacing * spacing);
        let mut out = vec![0.0; tx.numel()];
        for (plane, dst) in tx.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
            for i in 0..h {
                let up = if i == 0 { 0 } else { i - 1 };
                let down = if i + 1 == h { h - 1 } else { i + 1 };
                for j in 0..w {
                    let left = if j == 0 { 0 } else { j - 1 };
                    let right = if j + 1 == w { w - 1 } else { j + 1 };
                    let center = plane[i * w + j];
                    dst[i * w + j] =
                        (plane[down * w + j] + plane[up * w + j] + plane[i * w + right] + plane[i * w + left]
                            - 4.0 * center)
                            * inv_dx2;
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Laplacian { x, spacing }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = tx.dims::<4>("global_avg_pool")?;
        let hw = (h * w) as f64;
        let data = tx.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// `x W^T + b` for `x: [N,Cin]`, `W: [Cout,Cin]`, `b: [Cout]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        let [n, cin] = tx.dims::<2>("dense input")?;
        let [cout, wcin] = tw.dims::<2>("dense weight")?;
        if wcin != cin || tb.shape() != [cout] {
            return Err(Error::Shape(format!(
                "dense: input {:?}, weight {:?}, bias {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let mut data = vec![0.0; n * cout];
        for r in 0..n {
            let xr = &tx.data()[r * cin..(r + 1) * cin];
            for o in 0..cout {
                let wr = &tw.data()[o * cin..(o + 1) * cin];
                let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                data[r * cout + o] = dot + tb.data()[o];
            }
        }
        let out = Tensor::new(vec![n, cout], data)?;
        let rg = self.any_grad(&[x, weight, bias]);
        Ok(self.push(out, Op::Dense { x, weight, bias }, rg))
    }

    /// Batch mean of `-log softmax(logits)[label]`, via log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let [n, m] = tl.dims::<2>("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::Label { label, classes: m });
        }
        let mut probs = vec![0.0; n * m];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &tl.data()[r * m..(r + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[label];
            for (p, &z) in probs[r * m..(r + 1) * m].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let out = Tensor::scalar(total / n as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise product with a constant of the same shape (no gradient to the constant).
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(Error::Shape(format!("mul_const: {:?} vs {:?}", tx.shape(), c.shape())));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MulConst(x, c.data().to_vec()), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("a tensor broadcasts with itself")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.value(loss);
        if !seed.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contribution: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            contribution(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
            } => {
                let (dx, dk) = conv::backward(
                    geom,
                    *batch,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    wants(*input),
                    wants(*kernel),
                );
                if let Some(dx) = dx {
                    acc(*input, &mut |s| add_into(s, &dx));
                }
                if let Some(dk) = dk {
                    acc(*kernel, &mut |s| add_into(s, &dk));
                }
            }
            Op::BiasAdd { x, bias } => {
                acc(*x, &mut |s| add_into(s, g));
                let shape = node.value.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                acc(*bias, &mut |s| {
                    for (idx, &gv) in g.iter().enumerate() {
                        s[(idx / inner) % c] += gv;
                    }
                });
            }
            Op::Laplacian { x, spacing } => {
                let shape = node.value.shape();
                let (h, w) = (shape[2], shape[3]);
                let inv_dx2 = 1.0 / (spacing * spacing);
                acc(*x, &mut |s| {
                    for (gp, sp) in g.chunks(h * w).zip(s.chunks_mut(h * w)) {
                        for i in 0..h {
                            let up = if i == 0 { 0 } else { i - 1 };
                            let down = if i + 1 == h { h - 1 } else { i + 1 };
                            for j in 0..w {
                                let left = if j == 0 { 0 } else { j - 1 };
                                let right = if j + 1 == w { w - 1 } else { j + 1 };
                                let gi = gp[i * w + j] * inv_dx2;
                                sp[down * w + j] += gi;
                                sp[up * w + j] += gi;
                                sp[i * w + right] += gi;
                                sp[i * w + left] += gi;
                                sp[i * w + j] -= 4.0 * gi;
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for ((si, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *si += gi;
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for ((si, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *si += gi * sigmoid(xi);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                acc(*x, &mut |s| {
                    for ((si, &gi), &yi) in s.iter_mut().zip(g).zip(yv) {
                        *si += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let hw = shape[2] * shape[3];
                let inv = 1.0 / hw as f64;
                acc(*x, &mut |s| {
                    for (plane, &gi) in s.chunks_mut(hw).zip(g) {
                        for v in plane {
                            *v += gi * inv;
                        }
                    }
                });
            }
            Op::Dense { x, weight, bias } => {
                let (tx, tw) = (self.value(*x), self.value(*weight));
                let (n, cin) = (tx.shape()[0], tx.shape()[1]);
                let cout = tw.shape()[0];
                acc(*x, &mut |s| {
                    for r in 0..n {
                        for o in 0..cout {
                            let gv = g[r * cout + o];
                            for i in 0..cin {
                                s[r * cin + i] += gv * tw.data()[o * cin + i];
                            }
                        }
                    }
                });
                acc(*weight, &mut |s| {
                    for r in 0..n {
                        for o in 0..cout {
                            let gv = g[r * cout + o];
                            for i in 0..cin {
                                s[o * cin + i] += gv * tx.data()[r * cin + i];
                            }
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for r in 0..n {
                        for o in 0..cout {
                            s[o] += g[r * cout + o];
                        }
                    }
                });
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let n = labels.len();
                let m = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &mut |s| {
                    for (r, &label) in labels.iter().enumerate() {
                        for k in 0..m {
                            let onehot = if k == label { 1.0 } else { 0.0 };
                            s[r * m + k] += scale * (probs[r * m + k] - onehot);
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |s| add_into(s, g));
                let scalar_b = self.value(*b).is_scalar() && !self.value(*a).is_scalar();
                acc(*b, &mut |s| {
                    if scalar_b {
                        s[0] += sign * g.iter().sum::<f64>();
                    } else {
                        for (si, &gi) in s.iter_mut().zip(g) {
                            *si += sign * gi;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scalar_b = tb.is_scalar() && !ta.is_scalar();
                acc(*a, &mut |s| {
                    if scalar_b {
                        let y = tb.item();
                        for (si, &gi) in s.iter_mut().zip(g) {
                            *si += gi * y;
                        }
                    } else {
                        for ((si, &gi), &y) in s.iter_mut().zip(g).zip(tb.data()) {
                            *si += gi * y;
                        }
                    }
                });
                acc(*b, &mut |s| {
                    if scalar_b {
                        s[0] += g.iter().zip(ta.data()).map(|(gi, x)| gi * x).sum::<f64>();
                    } else {
                        for ((si, &gi), &x) in s.iter_mut().zip(g).zip(ta.data()) {
                            *si += gi * x;
                        }
                    }
                });
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scalar_b = tb.is_scalar() && !ta.is_scalar();
                let y_at = |i: usize| if scalar_b { tb.data()[0] } else { tb.data()[i] };
                acc(*a, &mut |s| {
                    for (i, (si, &gi)) in s.iter_mut().zip(g).enumerate() {
                        *si += gi / y_at(i);
                    }
                });
                acc(*b, &mut |s| {
                    for (i, (&gi, &x)) in g.iter().zip(ta.data()).enumerate() {
                        let y = y_at(i);
                        let d = -gi * x / (y * y);
                        if scalar_b {
                            s[0] += d;
                        } else {
                            s[i] += d;
                        }
                    }
                });
            }
            Op::MulConst(x, c) => {
                acc(*x, &mut |s| {
                    for ((si, &gi), &ci) in s.iter_mut().zip(g).zip(c) {
                        *si += gi * ci;
                    }
                });
            }
            Op::Scale(x, factor) => {
                acc(*x, &mut |s| {
                    for (si, &gi) in s.iter_mut().zip(g) {
                        *si += gi * factor;
                    }
                });
            }
            Op::AddScalar(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let inv = 1.0 / self.value(*x).numel() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0] * inv));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `log(1 + e^x)` as `max(x, 0) + log(1 + e^-|x|)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, evaluated without overflow in either tail.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
