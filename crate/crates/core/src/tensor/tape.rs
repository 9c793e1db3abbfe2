use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which p-norm [`Tape::norm_p`] computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
    LInf,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddBias { x: usize, b: usize, inner: usize },
    Relu(usize),
    Prelu { x: usize, slope: usize, inner: usize },
    Tanh(usize),
    Exp(usize),
    Log(usize),
    MaxPool { x: usize, arg: Vec<usize> },
    Gap { x: usize, inner: usize },
    Softmax { x: usize, outer: usize, axis: usize, inner: usize },
    LogSoftmax { x: usize, outer: usize, axis: usize, inner: usize },
    NormP { x: usize, p: Norm },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    PairwiseDist { a: usize, b: usize, dim: usize },
    Pick { x: usize, idx: Vec<usize> },
    MaxExcluding { x: usize, arg: Vec<usize> },
    ClampMin { x: usize, lo: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Smoothing added under the square root when differentiating a Euclidean distance.
pub const DIST_SMOOTHING: f64 = 1e-12;

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation
/// order, so the node list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`; zeros if nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    /// Clears every gradient buffer so `backward` may run again.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x.0]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; r * c];
        kernels::gemm(r, k, c, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::MatMul(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x.0, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x.0))
    }

    /// Adds a per-channel bias `b: [C]` to `x: [N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_bias", &sx, &sb));
        }
        let inner: usize = sx[2..].iter().product();
        let ch = sx[1];
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bias[(i / inner) % ch];
        }
        let rg = self.rg(&[x.0, b.0]);
        Ok(self.push(Tensor::new(sx, data)?, Op::AddBias { x: x.0, b: b.0, inner }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x.0))
    }

    /// Parametric ReLU with one learned slope per channel (axis 1).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(slope).to_vec());
        if sx.len() < 2 || ss.len() != 1 || ss[0] != sx[1] {
            return Err(Error::shape("prelu", &sx, &ss));
        }
        let inner: usize = sx[2..].iter().product();
        let ch = sx[1];
        let a = self.value(slope).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { a[(i / inner) % ch] * v })
            .collect();
        let rg = self.rg(&[x.0, slope.0]);
        Ok(self.push(Tensor::new(sx, data)?, Op::Prelu { x: x.0, slope: slope.0, inner }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x.0))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x.0)))
    }

    /// Elementwise sign with `sign(0) = 0`. The result is detached: no gradient flows back.
    pub fn sign(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sign);
        self.push(value, Op::Leaf, false)
    }

    /// 2×2 stride-2 max pooling over `[N, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("max_pool2d", &s, &[2, 2]));
        }
        let (v, arg) = kernels::max_pool2x2(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let rg = self.rg(&[x.0]);
        let value = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], v)?;
        Ok(self.push(value, Op::MaxPool { x: x.0, arg }, rg))
    }

    /// Global average pooling `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", &s, &[]));
        }
        let inner = s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks_exact(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![s[0], s[1]], data)?, Op::Gap { x: x.0, inner }, rg))
    }

    fn axis_split(&self, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape("softmax axis", s, &[axis]));
        }
        Ok((s[..axis].iter().product(), s[axis], s[axis + 1..].iter().product()))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.axis_split(x, axis)?;
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (data[at(j)] - m).exp();
                    data[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    data[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(&[x.0]);
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { x: x.0, outer, axis: n, inner }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.axis_split(x, axis)?;
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|j| (data[at(j)] - m).exp()).sum::<f64>().ln();
                for j in 0..n {
                    data[at(j)] -= lse;
                }
            }
        }
        let rg = self.rg(&[x.0]);
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax { x: x.0, outer, axis: n, inner }, rg))
    }

    /// p-norm of the whole tensor, as a one-element tensor.
    pub fn norm_p(&mut self, x: Var, p: Norm) -> Var {
        let d = self.value(x).data();
        let v = match p {
            Norm::L1 => d.iter().map(|v| v.abs()).sum(),
            Norm::L2 => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Norm::LInf => d.iter().fold(0.0, |m, v| f64::max(m, v.abs())),
        };
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(v), Op::NormP { x: x.0, p }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(v), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(v), Op::Mean(x.0), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::Reshape(x.0), rg))
    }

    /// Flattens `[N, ...]` to `[N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.rows(), t.row_len()];
        self.reshape(x, &shape)
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `kernels: [F,C,kh,kw]`, zero padded.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let geom = conv_geometry(&sx, &sw, stride, padding)?;
        let (n, f) = (sx[0], sw[0]);
        let (p, o) = (geom.patch(), geom.out_pixels());
        let img = geom.c * geom.h * geom.w;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; n * f * o];
        let mut cols = vec![0.0; p * o];
        for s in 0..n {
            kernels::im2col(&xd[s * img..(s + 1) * img], &geom, &mut cols);
            kernels::gemm(f, p, o, wd, false, &cols, false, &mut out[s * f * o..(s + 1) * f * o], false);
        }
        let rg = self.rg(&[x.0, w.0]);
        let value = Tensor::new(vec![n, f, geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::Conv2d { x: x.0, w: w.0, geom }, rg))
    }

    /// Exact Euclidean distances between the rows of `a: [N,d]` and `b: [M,d]`.
    ///
    /// The backward pass divides by `sqrt(|a-b|² + DIST_SMOOTHING)`, so the
    /// gradient at zero distance is zero instead of undefined.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("pairwise_dist", &sa, &sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(sa[0] * sb[0]);
        for i in 0..sa[0] {
            let ra = va.row(i);
            for j in 0..sb[0] {
                out.push(sq_dist(ra, vb.row(j)).sqrt());
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        let value = Tensor::new(vec![sa[0], sb[0]], out)?;
        Ok(self.push(value, Op::PairwiseDist { a: a.0, b: b.0, dim: sa[1] }, rg))
    }

    /// `out[i] = x[i, idx[i]]` for `x: [N, K]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::shape("pick", &s, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= s[1]) {
            return Err(Error::Domain(format!("index {bad} out of range for {} columns", s[1])));
        }
        let t = self.value(x);
        let data = idx.iter().enumerate().map(|(i, &j)| t.row(i)[j]).collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![s[0]], data)?, Op::Pick { x: x.0, idx: idx.to_vec() }, rg))
    }

    /// `out[i] = max_{j != idx[i]} x[i, j]`; ties pick the lowest column.
    pub fn max_excluding(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() || s[1] < 2 {
            return Err(Error::shape("max_excluding", &s, &[idx.len()]));
        }
        let t = self.value(x);
        let mut arg = Vec::with_capacity(s[0]);
        let mut data = Vec::with_capacity(s[0]);
        for (i, &excl) in idx.iter().enumerate() {
            let row = t.row(i);
            let mut best = usize::MAX;
            for (j, &v) in row.iter().enumerate() {
                if j != excl && (best == usize::MAX || v > row[best]) {
                    best = j;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![s[0]], data)?, Op::MaxExcluding { x: x.0, arg }, rg))
    }

    /// `max(x, lo)` elementwise; the gradient passes only where `x > lo`.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, |v| v.max(lo), Op::ClampMin { x: x.0, lo })
    }

    /// Reverse sweep from the scalar `loss`, accumulating into every
    /// `requires_grad` node it reaches.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward called twice on the same tape without zero_grads".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, contrib: Vec<f64>) {
        let node = &mut self.nodes[target];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let mut pending: Vec<(usize, Vec<f64>)> = Vec::with_capacity(2);
        {
            let out = &self.nodes[i].value;
            let val = |j: usize| &self.nodes[j].value;
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (sa, sb) = (val(*a).shape(), val(*b).shape());
                    let (r, k, c) = (sa[0], sa[1], sb[1]);
                    if self.wants(*a) {
                        let mut da = vec![0.0; r * k];
                        kernels::gemm(r, c, k, g, false, val(*b).data(), true, &mut da, false);
                        pending.push((*a, da));
                    }
                    if self.wants(*b) {
                        let mut db = vec![0.0; k * c];
                        kernels::gemm(k, r, c, val(*a).data(), true, g, false, &mut db, false);
                        pending.push((*b, db));
                    }
                }
                Op::Add(a, b) => {
                    pending.push((*a, g.to_vec()));
                    pending.push((*b, g.to_vec()));
                }
                Op::Sub(a, b) => {
                    pending.push((*a, g.to_vec()));
                    pending.push((*b, g.iter().map(|v| -v).collect()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    if self.wants(*a) {
                        pending.push((*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()));
                    }
                    if self.wants(*b) {
                        pending.push((*b, g.iter().zip(va).map(|(g, x)| g * x).collect()));
                    }
                }
                Op::Scale(x, f) => pending.push((*x, g.iter().map(|v| v * f).collect())),
                Op::AddScalar(x) | Op::Reshape(x) => pending.push((*x, g.to_vec())),
                Op::AddBias { x, b, inner } => {
                    if self.wants(*x) {
                        pending.push((*x, g.to_vec()));
                    }
                    if self.wants(*b) {
                        let ch = val(*b).len();
                        let mut db = vec![0.0; ch];
                        for (k, v) in g.iter().enumerate() {
                            db[(k / inner) % ch] += v;
                        }
                        pending.push((*b, db));
                    }
                }
                Op::Relu(x) => {
                    let xs = val(*x).data();
                    pending.push((*x, g.iter().zip(xs).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect()));
                }
                Op::Prelu { x, slope, inner } => {
                    let xs = val(*x).data();
                    let a = val(*slope).data();
                    let ch = a.len();
                    if self.wants(*x) {
                        let dx = g
                            .iter()
                            .zip(xs)
                            .enumerate()
                            .map(|(k, (g, &v))| {
                                if v > 0.0 {
                                    *g
                                } else if v < 0.0 {
                                    a[(k / inner) % ch] * g
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        pending.push((*x, dx));
                    }
                    if self.wants(*slope) {
                        let mut da = vec![0.0; ch];
                        for (k, (g, &v)) in g.iter().zip(xs).enumerate() {
                            if v < 0.0 {
                                da[(k / inner) % ch] += g * v;
                            }
                        }
                        pending.push((*slope, da));
                    }
                }
                Op::Tanh(x) => {
                    pending.push((*x, g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect()));
                }
                Op::Exp(x) => {
                    pending.push((*x, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()));
                }
                Op::Log(x) => {
                    pending.push((*x, g.iter().zip(val(*x).data()).map(|(g, v)| g / v).collect()));
                }
                Op::MaxPool { x, arg } => {
                    let mut dx = vec![0.0; val(*x).len()];
                    for (gv, &src) in g.iter().zip(arg) {
                        dx[src] += gv;
                    }
                    pending.push((*x, dx));
                }
                Op::Gap { x, inner } => {
                    let scale = 1.0 / *inner as f64;
                    let dx = g.iter().flat_map(|v| std::iter::repeat_n(v * scale, *inner)).collect();
                    pending.push((*x, dx));
                }
                Op::Softmax { x, outer, axis, inner } => {
                    let y = out.data();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * axis + j) * inner + i;
                            let dot: f64 = (0..*axis).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*axis {
                                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    pending.push((*x, dx));
                }
                Op::LogSoftmax { x, outer, axis, inner } => {
                    let y = out.data();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * axis + j) * inner + i;
                            let gs: f64 = (0..*axis).map(|j| g[at(j)]).sum();
                            for j in 0..*axis {
                                dx[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                            }
                        }
                    }
                    pending.push((*x, dx));
                }
                Op::NormP { x, p } => {
                    let xs = val(*x).data();
                    let n = out.item();
                    let dx = match p {
                        Norm::L1 => xs.iter().map(|&v| g[0] * sign(v)).collect(),
                        Norm::L2 => {
                            if n == 0.0 {
                                vec![0.0; xs.len()]
                            } else {
                                xs.iter().map(|&v| g[0] * v / n).collect()
                            }
                        }
                        Norm::LInf => {
                            let mut dx = vec![0.0; xs.len()];
                            if n > 0.0 {
                                let k = xs.iter().position(|v| v.abs() == n).expect("max present");
                                dx[k] = g[0] * sign(xs[k]);
                            }
                            dx
                        }
                    };
                    pending.push((*x, dx));
                }
                Op::Sum(x) => pending.push((*x, vec![g[0]; val(*x).len()])),
                Op::Mean(x) => {
                    let n = val(*x).len();
                    pending.push((*x, vec![g[0] / n as f64; n]));
                }
                Op::Conv2d { x, w, geom } => {
                    let n = val(*x).shape()[0];
                    let f = val(*w).shape()[0];
                    let (p, o) = (geom.patch(), geom.out_pixels());
                    let img = geom.c * geom.h * geom.w;
                    let (xd, wd) = (val(*x).data(), val(*w).data());
                    let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                    let mut dx = if want_x { vec![0.0; n * img] } else { Vec::new() };
                    let mut dw = if want_w { vec![0.0; f * p] } else { Vec::new() };
                    let mut cols = vec![0.0; p * o];
                    for s in 0..n {
                        let gs = &g[s * f * o..(s + 1) * f * o];
                        if want_w {
                            kernels::im2col(&xd[s * img..(s + 1) * img], geom, &mut cols);
                            kernels::gemm(f, o, p, gs, false, &cols, true, &mut dw, true);
                        }
                        if want_x {
                            kernels::gemm(p, f, o, wd, true, gs, false, &mut cols, false);
                            kernels::col2im_add(&cols, geom, &mut dx[s * img..(s + 1) * img]);
                        }
                    }
                    if want_x {
                        pending.push((*x, dx));
                    }
                    if want_w {
                        pending.push((*w, dw));
                    }
                }
                Op::PairwiseDist { a, b, dim } => {
                    let (va, vb) = (val(*a), val(*b));
                    let (na, nb) = (va.rows(), vb.rows());
                    let mut da = vec![0.0; na * dim];
                    let mut db = vec![0.0; nb * dim];
                    for i in 0..na {
                        let ra = va.row(i);
                        for j in 0..nb {
                            let gij = g[i * nb + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let rb = vb.row(j);
                            let denom = (sq_dist(ra, rb) + DIST_SMOOTHING).sqrt();
                            for t in 0..*dim {
                                let c = gij * (ra[t] - rb[t]) / denom;
                                da[i * dim + t] += c;
                                db[j * dim + t] -= c;
                            }
                        }
                    }
                    // `a` and `b` may be the same node (prototype-to-prototype distances).
                    pending.push((*a, da));
                    pending.push((*b, db));
                }
                Op::Pick { x, idx } => {
                    let k = val(*x).shape()[1];
                    let mut dx = vec![0.0; val(*x).len()];
                    for (i, &j) in idx.iter().enumerate() {
                        dx[i * k + j] = g[i];
                    }
                    pending.push((*x, dx));
                }
                Op::MaxExcluding { x, arg } => {
                    let k = val(*x).shape()[1];
                    let mut dx = vec![0.0; val(*x).len()];
                    for (i, &j) in arg.iter().enumerate() {
                        dx[i * k + j] = g[i];
                    }
                    pending.push((*x, dx));
                }
                Op::ClampMin { x, lo } => {
                    let xs = val(*x).data();
                    pending.push((*x, g.iter().zip(xs).map(|(g, &v)| if v > *lo { *g } else { 0.0 }).collect()));
                }
            }
        }
        for (target, contrib) in pending {
            self.accumulate(target, contrib);
        }
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn conv_geometry(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let (h, w, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
    if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::Config(format!(
            "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {pad}, stride {stride}"
        )));
    }
    let (sh, sw_) = (h + 2 * pad - kh, w + 2 * pad - kw);
    if sh % stride != 0 || sw_ % stride != 0 {
        return Err(Error::Config(format!(
            "conv2d output size is not integral: ({h}+2*{pad}-{kh})/{stride}"
        )));
    }
    Ok(ConvGeom {
        c: sx[1],
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho: sh / stride + 1,
        wo: sw_ / stride + 1,
    })
}
