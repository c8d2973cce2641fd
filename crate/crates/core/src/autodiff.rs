//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order. [`Graph::backward`] walks the tape once in
//! reverse and accumulates gradients into the leaves that require them.

use crate::error::{Error, Result};
use crate::tensor::{col2im, conv_out_len, gemm_nn, gemm_nt, gemm_tn, im2col, transpose2, ConvGeom, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Norm2(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Computation graph. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros if backward never reached it.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::contract(op, format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dims("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let out = transpose2(self.value(x).data(), r, c);
        self.push(Tensor::new([c, r], out)?, Op::Transpose(x), &[x], "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `x[..×n] + bias[n]`, broadcasting the bias over every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(bias).numel() != n {
            return Err(Error::dims("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::AddRow(x, bias), &[x, bias], "add_row")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * s).collect())?;
        self.push(value, Op::Scale(x, s), &[x], "scale")
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v + c).collect())?;
        self.push(value, Op::AddConst(x), &[x], "add_const")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v.max(T::zero())).collect())?;
        self.push(value, Op::Relu(x), &[x], "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh())).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::Gelu(x), &[x], "gelu")
    }

    /// Row-wise softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::SoftmaxRows(x), &[x], "softmax_rows")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dims("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d;
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let s = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let op = Op::LayerNorm { x, gamma, beta, xhat, rstd };
        self.push(value, op, &[x, gamma, beta], "layer_norm")
    }

    /// 2-D convolution of `x[c_in×H×W]` with `w[c_out×c_in×k×k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::contract("conv2d", format!("input must be c×H×W, got {s:?}"))),
        };
        let (c_out, k) = match *self.shape(w) {
            [co, ci, k1, k2] if ci == c_in && k1 == k2 => (co, k1),
            _ => return Err(Error::dims("conv2d", self.shape(x), self.shape(w))),
        };
        if self.value(b).numel() != c_out {
            return Err(Error::dims("conv2d", self.shape(w), self.shape(b)));
        }
        let (oh, ow) = match (conv_out_len(h, k, stride, pad), conv_out_len(wd, k, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::Dimension {
                    op: "conv2d: kernel larger than padded input",
                    lhs: vec![h + 2 * pad, wd + 2 * pad],
                    rhs: vec![k, k],
                })
            }
        };
        let geom = ConvGeom { c_in, h, w: wd, k, stride, pad, oh, ow };
        let cols = im2col(self.value(x).data(), &geom);
        let npos = geom.positions();
        let bias = self.value(b).data();
        let mut out = vec![T::zero(); c_out * npos];
        for (o, chunk) in out.chunks_mut(npos).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm_nn(self.value(w).data(), &cols, &mut out, c_out, geom.patch_len(), npos);
        let value = Tensor::new([c_out, oh, ow], out)?;
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b], "conv2d")
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::contract("slice_cols", format!("columns {start}..{} out of {c}", start + len)));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::new([r, len], out)?, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::dims("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        self.push(Tensor::new([rows, total], out)?, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::dims("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new([rows, cols], out)?, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    /// Gathers the given rows (in the given order) of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::contract("select_rows", format!("row {bad} out of {r}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let op = Op::SelectRows { x, rows: rows.to_vec() };
        self.push(Tensor::new([rows.len(), c], out)?, op, &[x], "select_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// Euclidean norm of all entries.
    pub fn norm2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v * v).sum::<T>().sqrt();
        self.push(Tensor::scalar(s), Op::Norm2(x), &[x], "norm2")
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(gout);
                continue;
            }
            self.propagate(id, &gout, &mut grads);
        }

        for (id, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[id];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let acc = node.grad.get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            if let Some(g) = g {
                for (a, v) in acc.data_mut().iter_mut().zip(g) {
                    *a = *a + v;
                }
            }
        }
        // Trainable leaves created after the loss are unreachable; give them zeros.
        for node in &mut self.nodes[loss.0 + 1..] {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                acc(*a, &mut |ga| gemm_nt(gout, val(*b), ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn(val(*a), gout, gb, m, k, n));
            }
            Op::Transpose(x) => {
                let (r, c) = (shp(*x)[0], shp(*x)[1]);
                let t = transpose2(gout, c, r);
                acc(*x, &mut |gx| add_into(gx, &t));
            }
            Op::Reshape(x) | Op::AddConst(x) => acc(*x, &mut |gx| add_into(gx, gout)),
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gout));
                acc(*b, &mut |gb| add_into(gb, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gout));
                acc(*b, &mut |gb| {
                    for (g, &o) in gb.iter_mut().zip(gout) {
                        *g = *g - o;
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((g, &o), &y) in ga.iter_mut().zip(gout).zip(val(*b)) {
                        *g = *g + o * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((g, &o), &x) in gb.iter_mut().zip(gout).zip(val(*a)) {
                        *g = *g + o * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, gout));
                let n = nodes[bias.0].value.numel();
                acc(*bias, &mut |gb| {
                    for (i, &o) in gout.iter().enumerate() {
                        gb[i % n] = gb[i % n] + o;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| {
                for (g, &o) in gx.iter_mut().zip(gout) {
                    *g = *g + o * *s;
                }
            }),
            Op::Relu(x) => acc(*x, &mut |gx| {
                for ((g, &o), &v) in gx.iter_mut().zip(gout).zip(val(*x)) {
                    if v > T::zero() {
                        *g = *g + o;
                    }
                }
            }),
            Op::Gelu(x) => {
                let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                let three = T::of(3.0);
                acc(*x, &mut |gx| {
                    for ((g, &o), &v) in gx.iter_mut().zip(gout).zip(val(*x)) {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        *g = *g + o * (half * (T::one() + t) + half * v * dt);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.last_dim();
                acc(*x, &mut |gx| {
                    for ((gr, yr), dyr) in gx.chunks_mut(c).zip(out.chunks(c)).zip(gout.chunks(c)) {
                        let dot: T = yr.iter().zip(dyr).map(|(&y, &dy)| y * dy).sum();
                        for ((g, &y), &dy) in gr.iter_mut().zip(yr).zip(dyr) {
                            *g = *g + y * (dy - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.value.last_dim();
                let gam = val(*gamma);
                acc(*x, &mut |gx| {
                    let dn = T::of(d as f64);
                    for (r, &s) in rstd.iter().enumerate() {
                        let dy = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = dy[j] * gam[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xh[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dxh = dy[j] * gam[j];
                            gx[r * d + j] = gx[r * d + j] + s * (dxh - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (i, (&dy, &xh)) in gout.iter().zip(xhat).enumerate() {
                        gg[i % d] = gg[i % d] + dy * xh;
                    }
                });
                acc(*beta, &mut |gb| {
                    for (i, &dy) in gout.iter().enumerate() {
                        gb[i % d] = gb[i % d] + dy;
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let npos = geom.positions();
                let c_out = nodes[b.0].value.numel();
                let plen = geom.patch_len();
                acc(*w, &mut |gw| gemm_nt(gout, cols, gw, c_out, npos, plen));
                acc(*b, &mut |gb| {
                    for (o, chunk) in gout.chunks(npos).enumerate() {
                        gb[o] = gb[o] + chunk.iter().copied().sum::<T>();
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dcols = vec![T::zero(); plen * npos];
                    gemm_tn(val(*w), gout, &mut dcols, c_out, plen, npos);
                    col2im(&dcols, geom, gx);
                });
            }
            Op::SliceCols { x, start } => {
                let c = shp(*x)[1];
                let len = node.value.last_dim();
                acc(*x, &mut |gx| {
                    for (i, row) in gout.chunks(len).enumerate() {
                        add_into(&mut gx[i * c + start..i * c + start + len], row);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let c = shp(p)[1];
                    acc(p, &mut |gp| {
                        for (i, row) in gp.chunks_mut(c).enumerate() {
                            add_into(row, &gout[i * total + offset..i * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(p, &mut |gp| add_into(gp, &gout[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SelectRows { x, rows } => {
                let c = node.value.last_dim();
                acc(*x, &mut |gx| {
                    for (k, &i) in rows.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &gout[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for g in gx.iter_mut() {
                    *g = *g + gout[0];
                }
            }),
            Op::Mean(x) => {
                let n = T::of(nodes[x.0].value.numel() as f64);
                acc(*x, &mut |gx| {
                    for g in gx.iter_mut() {
                        *g = *g + gout[0] / n;
                    }
                });
            }
            Op::Norm2(x) => {
                let norm = out[0];
                if norm > T::zero() {
                    acc(*x, &mut |gx| {
                        for (g, &v) in gx.iter_mut().zip(val(*x)) {
                            *g = *g + gout[0] * v / norm;
                        }
                    });
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
