//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an arena of nodes. Every operation appends one node whose
//! inputs are already on the tape, so node order is a topological order and
//! [`Tape::backward`] only has to walk the arena from the loss downwards.
//! A tape supports exactly one backward pass; call [`Tape::reset`] (or build
//! a fresh tape) for the next forward pass.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Precision, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    SumAbs(Var),
    SumSquares(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    ConstMul {
        x: Var,
        factor: Vec<f64>,
    },
    StraightThrough {
        w: Var,
        s: Var,
        mask: Vec<f64>,
        s_factor: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::SumAbs(..) => "sum_abs",
            Op::SumSquares(..) => "sum_squares",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ConstMul { .. } => "const_mul",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    precision: Precision,
    backward_done: bool,
    visited: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Precision::F64)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            precision,
            backward_done: false,
            visited: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the tape can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.visited.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Node indices whose backward rule ran, in the order they ran.
    pub fn backward_trace(&self) -> &[usize] {
        &self.visited
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let mut value = value;
        self.precision.round_slice(value.data_mut());
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, mut value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        if !matches!(op, Op::Leaf) {
            self.precision.round_slice(value.data_mut());
        }
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                index,
            });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}",
                sa, sb
            )));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), r, k, c);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![r, c], out)?, rg, Op::MatMul(a, b))
    }

    fn broadcast_check(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || self.data(b).len() == 1 {
            Ok(sa.to_vec())
        } else if self.data(a).len() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::Dimension(format!("{what} of {:?} and {:?}", sa, sb)))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (da, db) = (self.data(a), self.data(b));
        if da.len() == db.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 {
            da.iter().map(|&x| f(x, db[0])).collect()
        } else {
            db.iter().map(|&y| f(da[0], y)).collect()
        }
    }

    /// Element-wise sum; equal shapes, or one operand holding a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_check(a, b, "add")?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, rg, Op::Add(a, b))
    }

    /// Element-wise product; same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_check(a, b, "mul")?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, rg, Op::Scale(a, c))
    }

    /// Adds `bias[c]` along axis 1 of `x` (`[n, c, ...]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias);
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Dimension(format!(
                "bias {:?} does not match channels of {:?}",
                sb, sx
            )));
        }
        let inner: usize = sx[2..].iter().product();
        let c = sx[1];
        let b = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % c])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        self.push(Tensor::new(sx, out)?, rg, Op::AddBias(x, bias))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(sigmoid);
        let rg = self.rg(a);
        self.push(out, rg, Op::Sigmoid(a))
    }

    /// Cross-correlation of `[n, cin, h, w]` with `[cout, cin, kh, kw]` under zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::Dimension(format!(
                "conv2d of input {:?} with kernel {:?}",
                si, sk
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (h, w) = (si[2] + 2 * padding, si[3] + 2 * padding);
        if sk[2] > h || sk[3] > w {
            return Err(Error::Dimension(format!(
                "kernel {}x{} larger than padded input {}x{}",
                sk[2], sk[3], h, w
            )));
        }
        let geom = ConvGeom::new(&si, &sk, stride, padding);
        let out = conv_forward(self.data(input), self.data(kernel), &geom);
        let rg = self.rg(input) || self.rg(kernel);
        self.push(
            Tensor::new(vec![geom.n, geom.cout, geom.oh, geom.ow], out)?,
            rg,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        )
    }

    /// 2x2 max pooling with stride 2; within a window the first maximum in
    /// row-major order wins.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Dimension(format!("max_pool2 of {:?}", s)));
        }
        let (oh, ow) = (s[2] / 2, s[3] / 2);
        let x = self.data(input);
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..s[0] * s[1] {
            let base = plane * s[2] * s[3];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * s[3] + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * s[3] + 2 * xx + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(input);
        self.push(
            Tensor::new(vec![s[0], s[1], oh, ow], out)?,
            rg,
            Op::MaxPool2 { input, argmax },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.reshape(shape)?;
        let rg = self.rg(a);
        self.push(out, rg, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn sum_abs(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().map(|x| x.abs()).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::SumAbs(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::SumSquares(a))
    }

    /// Multiplies by a constant same-shape factor (e.g. a binary mask).
    pub fn const_mul(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.data(x).len() {
            return Err(Error::Dimension(format!(
                "factor of length {} for tensor {:?}",
                factor.len(),
                self.shape(x)
            )));
        }
        let out: Vec<f64> = self.data(x).iter().zip(&factor).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, rg, Op::ConstMul { x, factor })
    }

    /// `mask ⊙ w` where `mask` was sampled outside the tape. Backward passes
    /// `mask ⊙ u` to `w` and `s_factor ⊙ w ⊙ u` to `s`.
    pub fn straight_through(
        &mut self,
        w: Var,
        s: Var,
        mask: Vec<f64>,
        s_factor: Vec<f64>,
    ) -> Result<Var> {
        let n = self.data(w).len();
        if self.shape(w) != self.shape(s) || mask.len() != n || s_factor.len() != n {
            return Err(Error::Dimension(format!(
                "straight-through gate over {:?} and {:?}",
                self.shape(w),
                self.shape(s)
            )));
        }
        let out: Vec<f64> = self.data(w).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(w).to_vec();
        let rg = self.rg(w) || self.rg(s);
        self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::StraightThrough {
                w,
                s,
                mask,
                s_factor,
            },
        )
    }

    /// Mean softmax cross-entropy of `logits[n, c]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::Dimension(format!(
                "cross-entropy over logits {:?} with {} labels",
                s,
                labels.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let x = self.data(logits);
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / n as f64),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.visited.clear();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.visited.push(i);
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Gradient for a possibly-broadcast operand of `add`/`mul`.
    fn reduce_to(&self, v: Var, full: Vec<f64>) -> Vec<f64> {
        if self.data(v).len() == full.len() {
            full
        } else {
            vec![full.iter().sum()]
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Inputs always precede node `i`, so reading them while writing
        // their gradient slots never aliases the node being processed.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let bd = self.data(*b);
                    let mut ga = vec![0.0; r * k];
                    for ii in 0..r {
                        let grow = &g[ii * c..(ii + 1) * c];
                        for p in 0..k {
                            let brow = &bd[p * c..(p + 1) * c];
                            ga[ii * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let ad = self.data(*a);
                    let mut gb = vec![0.0; k * c];
                    for ii in 0..r {
                        let grow = &g[ii * c..(ii + 1) * c];
                        for p in 0..k {
                            let av = ad[ii * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (dst, gv) in gb[p * c..(p + 1) * c].iter_mut().zip(grow) {
                                *dst += av * gv;
                            }
                        }
                    }
                    self.accumulate(*b, gb);
                }
            }
            Op::Add(a, b) => {
                let ga = self.reduce_to(*a, g.to_vec());
                let gb = self.reduce_to(*b, g.to_vec());
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Mul(a, b) => {
                let n = g.len();
                let da = self.data(*a);
                let db = self.data(*b);
                let at = |d: &[f64], j: usize| if d.len() == 1 { d[0] } else { d[j] };
                let ga_full: Vec<f64> = (0..n).map(|j| g[j] * at(db, j)).collect();
                let gb_full: Vec<f64> = (0..n).map(|j| g[j] * at(da, j)).collect();
                let ga = self.reduce_to(*a, ga_full);
                let gb = self.reduce_to(*b, gb_full);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Scale(a, c) => {
                let ga = g.iter().map(|x| x * c).collect();
                self.accumulate(*a, ga);
            }
            Op::AddBias(x, bias) => {
                self.accumulate(*x, g.to_vec());
                if self.rg(*bias) {
                    let sx = self.shape(*x);
                    let c = sx[1];
                    let inner: usize = sx[2..].iter().product();
                    let mut gb = vec![0.0; c];
                    for (j, gv) in g.iter().enumerate() {
                        gb[(j / inner) % c] += gv;
                    }
                    self.accumulate(*bias, gb);
                }
            }
            Op::Relu(a) => {
                let ga = self
                    .data(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(*a, ga);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let ga = y.iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                self.accumulate(*a, ga);
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let geom = ConvGeom::new(self.shape(*input), self.shape(*kernel), *stride, *padding);
                let (gi, gk) = conv_backward(
                    self.data(*input),
                    self.data(*kernel),
                    g,
                    &geom,
                    self.rg(*input),
                    self.rg(*kernel),
                );
                if let Some(gi) = gi {
                    self.accumulate(*input, gi);
                }
                if let Some(gk) = gk {
                    self.accumulate(*kernel, gk);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gi = vec![0.0; self.data(*input).len()];
                for (&src, gv) in argmax.iter().zip(g) {
                    gi[src] += gv;
                }
                self.accumulate(*input, gi);
            }
            Op::Reshape(a) => self.accumulate(*a, g.to_vec()),
            Op::Sum(a) => {
                let n = self.data(*a).len();
                self.accumulate(*a, vec![g[0]; n]);
            }
            Op::SumAbs(a) => {
                let ga = self.data(*a).iter().map(|x| g[0] * sign(*x)).collect();
                self.accumulate(*a, ga);
            }
            Op::SumSquares(a) => {
                let ga = self.data(*a).iter().map(|x| 2.0 * g[0] * x).collect();
                self.accumulate(*a, ga);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    gl[row * c + l] -= scale;
                }
                self.accumulate(*logits, gl);
            }
            Op::ConstMul { x, factor } => {
                let gx = g.iter().zip(factor).map(|(a, b)| a * b).collect();
                self.accumulate(*x, gx);
            }
            Op::StraightThrough {
                w,
                s,
                mask,
                s_factor,
            } => {
                if self.rg(*w) {
                    let gw = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                    self.accumulate(*w, gw);
                }
                if self.rg(*s) {
                    let wd = self.data(*w);
                    let gs = g
                        .iter()
                        .zip(wd)
                        .zip(s_factor)
                        .map(|((u, wv), f)| u * wv * f)
                        .collect();
                    self.accumulate(*s, gs);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * c..(p + 1) * c]) {
                *o += av * bv;
            }
        }
    }
    out
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(si: &[usize], sk: &[usize], stride: usize, padding: usize) -> Self {
        let oh = (si[2] + 2 * padding - sk[2]) / stride + 1;
        let ow = (si[3] + 2 * padding - sk[3]) / stride + 1;
        ConvGeom {
            n: si[0],
            cin: si[1],
            h: si[2],
            w: si[3],
            cout: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            padding,
            oh,
            ow,
        }
    }

    /// Input coordinate for output position `o` and kernel offset `k`, if inside the unpadded input.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn conv_forward(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
    for b in 0..g.n {
        for o in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for c in 0..g.cin {
                        let xbase = (b * g.cin + c) * g.h * g.w;
                        let kbase = (o * g.cin + c) * g.kh * g.kw;
                        for ky in 0..g.kh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                acc += x[xbase + iy * g.w + ix] * k[kbase + ky * g.kw + kx];
                            }
                        }
                    }
                    out[((b * g.cout + o) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    k: &[f64],
    grad: &[f64],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gi = want_input.then(|| vec![0.0; x.len()]);
    let mut gk = want_kernel.then(|| vec![0.0; k.len()]);
    for b in 0..g.n {
        for o in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gv = grad[((b * g.cout + o) * g.oh + oy) * g.ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..g.cin {
                        let xbase = (b * g.cin + c) * g.h * g.w;
                        let kbase = (o * g.cin + c) * g.kh * g.kw;
                        for ky in 0..g.kh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                let xi = xbase + iy * g.w + ix;
                                let ki = kbase + ky * g.kw + kx;
                                if let Some(gi) = gi.as_mut() {
                                    gi[xi] += gv * k[ki];
                                }
                                if let Some(gk) = gk.as_mut() {
                                    gk[ki] += gv * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gi, gk)
}
