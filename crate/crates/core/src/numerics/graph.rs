//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Values are kept,
//! so [`Graph::backward`] can be called from several roots on the same tape
//! (the adaptive adversarial weight needs two gradients of one forward pass).

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, col2im, gemm, im2col, ConvGeom};
use super::tensor::Tensor;
use crate::error::{LmdError, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    /// Add a constant whose shape equals the trailing dims of the input.
    AddConst(usize),
    MulConst(usize, Rc<Tensor>),
    AddBias(usize, usize),
    AddChannelBias(usize, usize),
    MatMul {
        a: usize,
        b: usize,
        tb: bool,
    },
    Bmm {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Gelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Ln(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    MeanTokens(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Softmax(usize),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    Permute(usize, Vec<usize>),
    Reshape(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    ConcatRows(Vec<usize>),
    CrossEntropy(usize, Rc<Vec<usize>>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. One graph per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Gradients of the scalar `root` with respect to every node on the tape.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(LmdError::shape("backward", nodes[root.id].value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape().to_vec(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn backprop(nodes: &[Node], id: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| nodes[i].value.as_ref();
    let need = |i: usize| nodes[i].needs_grad;
    let out = val(id);
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, dy.clone());
            accumulate(grads, nodes, *b, dy.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, dy.clone());
            if need(*b) {
                accumulate(grads, nodes, *b, dy.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if need(*a) {
                accumulate(grads, nodes, *a, zip_map(dy, val(*b), |g, y| g * y));
            }
            if need(*b) {
                accumulate(grads, nodes, *b, zip_map(dy, val(*a), |g, x| g * x));
            }
        }
        Op::Affine(a, mul) => accumulate(grads, nodes, *a, dy.map(|g| g * mul)),
        Op::AddConst(a) => accumulate(grads, nodes, *a, dy.clone()),
        Op::MulConst(a, c) => {
            let n = c.numel();
            let data = dy.data().iter().enumerate().map(|(i, g)| g * c.data()[i % n]).collect();
            accumulate(grads, nodes, *a, Tensor::new(dy.shape().to_vec(), data).unwrap());
        }
        Op::AddBias(a, bias) => {
            accumulate(grads, nodes, *a, dy.clone());
            if need(*bias) {
                let n = val(*bias).numel();
                let mut g = vec![0.0; n];
                for row in dy.data().chunks(n) {
                    for (acc, v) in g.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, nodes, *bias, Tensor::new(vec![n], g).unwrap());
            }
        }
        Op::AddChannelBias(a, bias) => {
            accumulate(grads, nodes, *a, dy.clone());
            if need(*bias) {
                let s = dy.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let mut g = vec![0.0; c];
                for (i, chunk) in dy.data().chunks(plane).enumerate() {
                    g[i % c] += chunk.iter().sum::<f64>();
                }
                accumulate(grads, nodes, *bias, Tensor::new(vec![c], g).unwrap());
            }
        }
        Op::MatMul { a, b, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let k = *av.shape().last().unwrap();
            let m = av.numel() / k;
            let n = out.numel() / m;
            if need(*a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, dy.data(), false, bv.data(), !tb, 0.0, &mut da);
                accumulate(grads, nodes, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
            }
            if need(*b) {
                let mut db = vec![0.0; k * n];
                if *tb {
                    gemm(n, m, k, dy.data(), true, av.data(), false, 0.0, &mut db);
                } else {
                    gemm(k, m, n, av.data(), true, dy.data(), false, 0.0, &mut db);
                }
                accumulate(grads, nodes, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
        }
        Op::Bmm { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, m, n) = (out.shape()[0], out.shape()[1], out.shape()[2]);
            let k = if *ta { av.shape()[1] } else { av.shape()[2] };
            let (sa, sb, sc) = (m * k, k * n, m * n);
            if need(*a) {
                let mut da = vec![0.0; av.numel()];
                for i in 0..batch {
                    let dc = &dy.data()[i * sc..(i + 1) * sc];
                    let bb = &bv.data()[i * sb..(i + 1) * sb];
                    let dst = &mut da[i * sa..(i + 1) * sa];
                    if *ta {
                        gemm(k, n, m, bb, *tb, dc, true, 0.0, dst);
                    } else {
                        gemm(m, n, k, dc, false, bb, !tb, 0.0, dst);
                    }
                }
                accumulate(grads, nodes, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
            }
            if need(*b) {
                let mut db = vec![0.0; bv.numel()];
                for i in 0..batch {
                    let dc = &dy.data()[i * sc..(i + 1) * sc];
                    let aa = &av.data()[i * sa..(i + 1) * sa];
                    let dst = &mut db[i * sb..(i + 1) * sb];
                    if *tb {
                        gemm(n, m, k, dc, true, aa, *ta, 0.0, dst);
                    } else {
                        gemm(k, m, n, aa, !ta, dc, false, 0.0, dst);
                    }
                }
                accumulate(grads, nodes, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
        }
        Op::Gelu(a) => {
            let g = zip_map(dy, val(*a), |g, x| g * kernels::gelu_grad(x));
            accumulate(grads, nodes, *a, g);
        }
        Op::Tanh(a) => accumulate(grads, nodes, *a, zip_map(dy, out, |g, y| g * (1.0 - y * y))),
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, zip_map(dy, out, |g, y| g * y * (1.0 - y))),
        Op::Ln(a) => accumulate(grads, nodes, *a, zip_map(dy, val(*a), |g, x| g / x)),
        Op::Clamp(a, lo, hi) => {
            let g = zip_map(dy, val(*a), |g, x| if x > *lo && x < *hi { g } else { 0.0 });
            accumulate(grads, nodes, *a, g);
        }
        Op::Sum(a) => {
            let g = dy.item();
            accumulate(grads, nodes, *a, Tensor::full(val(*a).shape().to_vec(), g));
        }
        Op::Mean(a) => {
            let av = val(*a);
            let g = dy.item() / av.numel() as f64;
            accumulate(grads, nodes, *a, Tensor::full(av.shape().to_vec(), g));
        }
        Op::MeanTokens(a) => {
            let s = val(*a).shape().to_vec();
            let (b, n, d) = (s[0], s[1], s[2]);
            let scale = 1.0 / n as f64;
            let mut g = vec![0.0; b * n * d];
            for bi in 0..b {
                for t in 0..n {
                    for j in 0..d {
                        g[(bi * n + t) * d + j] = dy.data()[bi * d + j] * scale;
                    }
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(s, g).unwrap());
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xv = val(*x);
            let gv = val(*gain);
            let d = gv.numel();
            let rows = xv.numel() / d;
            let mut dx = vec![0.0; xv.numel()];
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            let mut xhat = vec![0.0; d];
            let mut dxh = vec![0.0; d];
            for r in 0..rows {
                let xr = &xv.data()[r * d..(r + 1) * d];
                let dyr = &dy.data()[r * d..(r + 1) * d];
                let (mean, rstd) = row_stats(xr, *eps);
                for j in 0..d {
                    xhat[j] = (xr[j] - mean) * rstd;
                    dxh[j] = dyr[j] * gv.data()[j];
                    dg[j] += dyr[j] * xhat[j];
                    db[j] += dyr[j];
                }
                let m1 = dxh.iter().sum::<f64>() / d as f64;
                let m2 = dxh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    dx[r * d + j] = rstd * (dxh[j] - m1 - xhat[j] * m2);
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            accumulate(grads, nodes, *gain, Tensor::new(vec![d], dg).unwrap());
            accumulate(grads, nodes, *bias, Tensor::new(vec![d], db).unwrap());
        }
        Op::Softmax(a) => {
            let d = *out.shape().last().unwrap();
            let mut g = vec![0.0; out.numel()];
            for ((gr, yr), dyr) in g.chunks_mut(d).zip(out.data().chunks(d)).zip(dy.data().chunks(d)) {
                let dot: f64 = yr.iter().zip(dyr).map(|(y, g)| y * g).sum();
                for j in 0..d {
                    gr[j] = yr[j] * (dyr[j] - dot);
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(out.shape().to_vec(), g).unwrap());
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (xv, wv) = (val(*x), val(*w));
            let s = xv.shape();
            let geom = ConvGeom {
                channels: s[1],
                height: s[2],
                width: s[3],
                kernel: wv.shape()[2],
                stride: *stride,
                pad: *pad,
            };
            let (o, r, p) = (wv.shape()[0], geom.col_rows(), geom.col_cols());
            let plane_in = s[1] * s[2] * s[3];
            let mut cols = vec![0.0; r * p];
            let mut dcols = vec![0.0; r * p];
            let mut dw = vec![0.0; wv.numel()];
            let mut dx = vec![0.0; xv.numel()];
            for b in 0..s[0] {
                let dyb = &dy.data()[b * o * p..(b + 1) * o * p];
                if need(*w) {
                    im2col(&xv.data()[b * plane_in..(b + 1) * plane_in], &geom, &mut cols);
                    gemm(o, p, r, dyb, false, &cols, true, 1.0, &mut dw);
                }
                if need(*x) {
                    gemm(r, o, p, wv.data(), true, dyb, false, 0.0, &mut dcols);
                    col2im(&dcols, &geom, &mut dx[b * plane_in..(b + 1) * plane_in]);
                }
            }
            if need(*x) {
                accumulate(grads, nodes, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            if need(*w) {
                accumulate(grads, nodes, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
            }
        }
        Op::ConvTranspose2d { x, w, stride, pad } => {
            let (xv, wv) = (val(*x), val(*w));
            let s = xv.shape();
            let os = out.shape();
            let geom = ConvGeom {
                channels: os[1],
                height: os[2],
                width: os[3],
                kernel: wv.shape()[2],
                stride: *stride,
                pad: *pad,
            };
            let (ci, r, p) = (s[1], geom.col_rows(), geom.col_cols());
            let plane_out = os[1] * os[2] * os[3];
            let mut dcols = vec![0.0; r * p];
            let mut dw = vec![0.0; wv.numel()];
            let mut dx = vec![0.0; xv.numel()];
            for b in 0..s[0] {
                im2col(&dy.data()[b * plane_out..(b + 1) * plane_out], &geom, &mut dcols);
                let xb = &xv.data()[b * ci * p..(b + 1) * ci * p];
                if need(*x) {
                    gemm(
                        ci,
                        r,
                        p,
                        wv.data(),
                        false,
                        &dcols,
                        false,
                        0.0,
                        &mut dx[b * ci * p..(b + 1) * ci * p],
                    );
                }
                if need(*w) {
                    gemm(ci, p, r, xb, false, &dcols, true, 1.0, &mut dw);
                }
            }
            if need(*x) {
                accumulate(grads, nodes, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            if need(*w) {
                accumulate(grads, nodes, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
            }
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accumulate(grads, nodes, *a, dy.permute(&inv).unwrap());
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, dy.reshape(val(*a).shape().to_vec()).unwrap()),
        Op::GatherRows(a, idx) => {
            let av = val(*a);
            let row = av.numel() / av.shape()[0];
            let mut g = vec![0.0; av.numel()];
            for (o, &i) in idx.iter().enumerate() {
                for j in 0..row {
                    g[i * row + j] += dy.data()[o * row + j];
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(av.shape().to_vec(), g).unwrap());
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let n = pv.numel();
                if need(p) {
                    let g = dy.data()[offset..offset + n].to_vec();
                    accumulate(grads, nodes, p, Tensor::new(pv.shape().to_vec(), g).unwrap());
                }
                offset += n;
            }
        }
        Op::CrossEntropy(a, labels) => {
            let av = val(*a);
            let c = av.shape()[1];
            let n = labels.len();
            let scale = dy.item() / n as f64;
            let mut g = vec![0.0; av.numel()];
            for (i, &label) in labels.iter().enumerate() {
                let row = &av.data()[i * c..(i + 1) * c];
                let probs = softmax_row(row);
                for j in 0..c {
                    let onehot = if j == label { 1.0 } else { 0.0 };
                    g[i * c + j] = (probs[j] - onehot) * scale;
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(av.shape().to_vec(), g).unwrap());
        }
    }
}

fn row_stats(x: &[f64], eps: f64) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LmdError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.graph.needs(self.id);
        self.graph.push(value, op, needs)
    }

    fn binary(&self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.graph.needs(self.id) || self.graph.needs(other.id);
        self.graph.push(value, op, needs)
    }

    /// Same value, cut off from the gradient flow (stop-gradient).
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value().as_ref().clone())
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        Ok(self.binary(other, zip_map(&a, &b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        Ok(self.binary(other, zip_map(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        Ok(self.binary(other, zip_map(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn square(&self) -> Var<'g> {
        self.mul(*self).expect("same shape")
    }

    /// `mul · x + add`.
    pub fn affine(&self, mul: f64, add: f64) -> Var<'g> {
        let v = self.value().map(|x| mul * x + add);
        self.unary(v, Op::Affine(self.id, mul))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.affine(s, 0.0)
    }

    /// Adds a constant broadcast over the leading dims.
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'g>> {
        let a = self.value();
        if !a.shape().ends_with(c.shape()) {
            return Err(LmdError::shape("add_const", a.shape(), c.shape()));
        }
        let n = c.numel();
        let data = a.data().iter().enumerate().map(|(i, v)| v + c.data()[i % n]).collect();
        Ok(self.unary(Tensor::new(a.shape().to_vec(), data)?, Op::AddConst(self.id)))
    }

    /// Multiplies by a constant broadcast over the leading dims.
    pub fn mul_const(&self, c: Rc<Tensor>) -> Result<Var<'g>> {
        let a = self.value();
        if !a.shape().ends_with(c.shape()) {
            return Err(LmdError::shape("mul_const", a.shape(), c.shape()));
        }
        let n = c.numel();
        let data = a.data().iter().enumerate().map(|(i, v)| v * c.data()[i % n]).collect();
        Ok(self.unary(Tensor::new(a.shape().to_vec(), data)?, Op::MulConst(self.id, c)))
    }

    /// Adds a `[n]` bias over the last axis.
    pub fn add_bias(&self, bias: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), bias.value());
        if b.rank() != 1 || a.shape().last() != Some(&b.numel()) {
            return Err(LmdError::shape("add_bias", a.shape(), b.shape()));
        }
        let n = b.numel();
        let data = a.data().iter().enumerate().map(|(i, v)| v + b.data()[i % n]).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(bias, v, Op::AddBias(self.id, bias.id)))
    }

    /// Adds a `[C]` bias to an `[B, C, H, W]` map.
    pub fn add_channel_bias(&self, bias: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), bias.value());
        if a.rank() != 4 || b.rank() != 1 || a.shape()[1] != b.numel() {
            return Err(LmdError::shape("add_channel_bias", a.shape(), b.shape()));
        }
        let (c, plane) = (a.shape()[1], a.shape()[2] * a.shape()[3]);
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[(i / plane) % c])
            .collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(bias, v, Op::AddChannelBias(self.id, bias.id)))
    }

    /// `[.., k] × [k, n]` (or `[n, k]` transposed when `tb`), leading dims flattened.
    pub fn matmul(&self, other: Var<'g>, tb: bool) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let k = a.shape().last().copied().unwrap_or(0);
        let ok = b.rank() == 2 && a.rank() >= 1 && if tb { b.shape()[1] == k } else { b.shape()[0] == k };
        if !ok {
            return Err(LmdError::shape("matmul", a.shape(), b.shape()));
        }
        let n = if tb { b.shape()[0] } else { b.shape()[1] };
        let m = a.numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), tb, 0.0, &mut out);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(shape, out)?;
        Ok(self.binary(
            other,
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                tb,
            },
        ))
    }

    /// Batched `[B, m, k] × [B, k, n]` with optional per-side transposes.
    pub fn bmm(&self, other: Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(LmdError::shape("bmm", a.shape(), b.shape()));
        }
        let (m, k) = if ta {
            (a.shape()[2], a.shape()[1])
        } else {
            (a.shape()[1], a.shape()[2])
        };
        let (kb, n) = if tb {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        if k != kb {
            return Err(LmdError::shape("bmm", a.shape(), b.shape()));
        }
        let batch = a.shape()[0];
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                ta,
                &b.data()[i * k * n..(i + 1) * k * n],
                tb,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let v = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.binary(
            other,
            v,
            Op::Bmm {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        ))
    }

    pub fn gelu(&self) -> Var<'g> {
        let v = self.value().map(kernels::gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn tanh(&self) -> Var<'g> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let v = self.value().map(kernels::sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn ln(&self) -> Var<'g> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Ln(self.id))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let a = self.value();
        let v = Tensor::scalar(a.sum() / a.numel() as f64);
        self.unary(v, Op::Mean(self.id))
    }

    /// `[B, n, d] → [B, d]` mean over the token axis.
    pub fn mean_tokens(&self) -> Result<Var<'g>> {
        let a = self.value();
        if a.rank() != 3 {
            return Err(LmdError::shape("mean_tokens", a.shape(), &[0, 0, 0]));
        }
        let (b, n, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for t in 0..n {
                for j in 0..d {
                    out[bi * d + j] += a.data()[(bi * n + t) * d + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        Ok(self.unary(Tensor::new(vec![b, d], out)?, Op::MeanTokens(self.id)))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let d = x.shape().last().copied().unwrap_or(0);
        if g.shape() != [d] || b.shape() != [d] {
            return Err(LmdError::shape("layer_norm", x.shape(), g.shape()));
        }
        let mut out = vec![0.0; x.numel()];
        for (orow, xr) in out.chunks_mut(d).zip(x.data().chunks(d)) {
            let (mean, rstd) = row_stats(xr, eps);
            for j in 0..d {
                orow[j] = (xr[j] - mean) * rstd * g.data()[j] + b.data()[j];
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        let needs = [self.id, gain.id, bias.id].iter().any(|&i| self.graph.needs(i));
        Ok(self.graph.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
            needs,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'g> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let data: Vec<f64> = x.data().chunks(d).flat_map(softmax_row).collect();
        self.unary(Tensor::new(x.shape().to_vec(), data).unwrap(), Op::Softmax(self.id))
    }

    /// `[B, C, H, W]` ⋆ `[O, C, k, k]`.
    pub fn conv2d(&self, w: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (x, wv) = (self.value(), w.value());
        let s = x.shape();
        if x.rank() != 4 || wv.rank() != 4 || wv.shape()[1] != s[1] || wv.shape()[2] != wv.shape()[3] {
            return Err(LmdError::shape("conv2d", s, wv.shape()));
        }
        let geom = ConvGeom {
            channels: s[1],
            height: s[2],
            width: s[3],
            kernel: wv.shape()[2],
            stride,
            pad,
        };
        if s[2] + 2 * pad < geom.kernel || s[3] + 2 * pad < geom.kernel || stride == 0 {
            return Err(LmdError::shape("conv2d", s, wv.shape()));
        }
        let (o, r, p) = (wv.shape()[0], geom.col_rows(), geom.col_cols());
        let plane_in = s[1] * s[2] * s[3];
        let mut cols = vec![0.0; r * p];
        let mut out = vec![0.0; s[0] * o * p];
        for b in 0..s[0] {
            im2col(&x.data()[b * plane_in..(b + 1) * plane_in], &geom, &mut cols);
            gemm(
                o,
                r,
                p,
                wv.data(),
                false,
                &cols,
                false,
                0.0,
                &mut out[b * o * p..(b + 1) * o * p],
            );
        }
        let v = Tensor::new(vec![s[0], o, geom.out_h(), geom.out_w()], out)?;
        Ok(self.binary(
            w,
            v,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                stride,
                pad,
            },
        ))
    }

    /// Transposed convolution, `[B, Ci, H, W]` with weights `[Ci, Co, k, k]`.
    pub fn conv_transpose2d(&self, w: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (x, wv) = (self.value(), w.value());
        let s = x.shape();
        if x.rank() != 4 || wv.rank() != 4 || wv.shape()[0] != s[1] || wv.shape()[2] != wv.shape()[3] {
            return Err(LmdError::shape("conv_transpose2d", s, wv.shape()));
        }
        let k = wv.shape()[2];
        let oh = (s[2] - 1) * stride + k;
        let ow = (s[3] - 1) * stride + k;
        if oh <= 2 * pad || ow <= 2 * pad {
            return Err(LmdError::shape("conv_transpose2d", s, wv.shape()));
        }
        let geom = ConvGeom {
            channels: wv.shape()[1],
            height: oh - 2 * pad,
            width: ow - 2 * pad,
            kernel: k,
            stride,
            pad,
        };
        let (ci, r, p) = (s[1], geom.col_rows(), geom.col_cols());
        debug_assert_eq!(p, s[2] * s[3]);
        let plane_out = geom.channels * geom.height * geom.width;
        let mut cols = vec![0.0; r * p];
        let mut out = vec![0.0; s[0] * plane_out];
        for b in 0..s[0] {
            gemm(
                r,
                ci,
                p,
                wv.data(),
                true,
                &x.data()[b * ci * p..(b + 1) * ci * p],
                false,
                0.0,
                &mut cols,
            );
            col2im(&cols, &geom, &mut out[b * plane_out..(b + 1) * plane_out]);
        }
        let v = Tensor::new(vec![s[0], geom.channels, geom.height, geom.width], out)?;
        Ok(self.binary(
            w,
            v,
            Op::ConvTranspose2d {
                x: self.id,
                w: w.id,
                stride,
                pad,
            },
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g>> {
        let v = self.value().permute(perm)?;
        Ok(self.unary(v, Op::Permute(self.id, perm.to_vec())))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Selects rows along the first axis; repeated indices are allowed.
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Result<Var<'g>> {
        let a = self.value();
        let rows = a.shape().first().copied().unwrap_or(0);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(LmdError::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {} rows",
                rows
            )));
        }
        let row = a.numel().checked_div(rows).unwrap_or(0);
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx.iter() {
            data.extend_from_slice(&a.data()[i * row..(i + 1) * row]);
        }
        let mut shape = a.shape().to_vec();
        shape[0] = idx.len();
        Ok(self.unary(Tensor::new(shape, data)?, Op::GatherRows(self.id, idx)))
    }

    /// Cross-entropy of `[N, C]` logits against class labels, averaged over N.
    pub fn cross_entropy(&self, labels: Rc<Vec<usize>>) -> Result<Var<'g>> {
        let a = self.value();
        if a.rank() != 2 || a.shape()[0] != labels.len() {
            return Err(LmdError::shape("cross_entropy", a.shape(), &[labels.len()]));
        }
        let c = a.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(LmdError::InvalidArgument(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        for (row, &l) in a.data().chunks(c).zip(labels.iter()) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        Ok(self.unary(v, Op::CrossEntropy(self.id, labels)))
    }
}

/// Concatenates along the first axis.
pub fn concat_rows<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| LmdError::InvalidArgument("concat_rows: no inputs".into()))?;
    let graph = first.graph;
    let tail = first.shape()[1..].to_vec();
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let v = p.value();
        if v.rank() == 0 || v.shape()[1..] != tail[..] {
            return Err(LmdError::shape("concat_rows", &first.shape(), v.shape()));
        }
        rows += v.shape()[0];
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![rows];
    shape.extend(tail);
    let needs = parts.iter().any(|p| graph.needs(p.id));
    Ok(graph.push(
        Tensor::new(shape, data)?,
        Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        needs,
    ))
}
