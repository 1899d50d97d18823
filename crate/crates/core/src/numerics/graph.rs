//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value, so node order is a
//! topological order and the backward sweep is a single reverse pass.

use std::collections::HashMap;

use super::tensor::{
    axis_split, gemm_nn, gemm_nt, gemm_tn, invert_perm, permute_data, softmax_strided, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix { a: Var, b: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var, usize),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
    MeanAxis(Var, usize),
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Gather1 { x: Var, indices: Vec<Vec<usize>> },
    Concat { parts: Vec<Var>, axis: usize },
    L2Normalize { x: Var, norms: Vec<f64> },
    RepeatLeading(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape. One per forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by tape node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Gradients of every parameter bound through [`Graph::param`] that
    /// received one, in binding-name order.
    pub fn param_grads(&self) -> Vec<(&str, &Tensor)> {
        let mut out: Vec<(&str, &Tensor)> = self
            .params
            .iter()
            .filter_map(|(n, v)| self.get(*v).map(|g| (n.as_str(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.get(*v))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Bind a named parameter. Repeated binds of the same name return the
    /// same node, so gradients from every use accumulate into one leaf.
    pub fn param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_param(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Register an existing node under a parameter name, so later
    /// [`Graph::param`] calls with that name return it.
    pub fn bind_as(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `x[..., in] · w[in, out] + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(self.mismatch("linear", x, w));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(self.mismatch("linear bias", w, b));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bias);
            }
        }
        gemm_nn(rows, din, dout, self.value(x).data(), self.value(w).data(), &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// Batched product of rank-3 tensors: `a[B,m,k] · b[B,k,n]`, or
    /// `a · bᵀ` with `b[B,n,k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.mismatch("bmm", a, b));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(self.mismatch("bmm", a, b));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let bi = &bd[i * k * n..(i + 1) * k * n];
                let oi = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt(m, k, n, ai, bi, oi);
                } else {
                    gemm_nn(m, k, n, ai, bi, oi);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[batch, m, n], out)?, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.mismatch("add_suffix", a, b));
        }
        let inner = self.value(b).numel();
        let mut value = self.value(a).clone();
        let bd = self.value(b).data().to_vec();
        for chunk in value.data_mut().chunks_mut(inner) {
            for (x, y) in chunk.iter_mut().zip(&bd) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::AddSuffix { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).softmax(axis)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("cross_entropy expects [n x c] logits with n = {} targets", targets.len()),
            });
        }
        if s[0] == 0 {
            return Err(Error::invalid("cross_entropy over zero rows"));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::IndexOutOfRange { index: bad, bound: c });
        }
        let x = self.value(logits).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        let xv = self.value(x);
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanAll(a), rg)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::MeanAxis(a, axis), rg))
    }

    /// Select `indices` along `axis` (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::IndexOutOfRange { index: bad, bound: len });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&src[(o * len + i) * inner..(o * len + i + 1) * inner]);
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = indices.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&new_shape, out)?,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Per-sample selection along axis 1: `x[n, p, ...]`, `indices[n][k]`
    /// gives `[n, k, ...]`.
    pub fn gather_rows(&mut self, x: Var, indices: &[Vec<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || indices.len() != shape[0] {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("gather_rows with {} index rows", indices.len()),
            });
        }
        let k = indices.first().map_or(0, |r| r.len());
        if indices.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("gather_rows index rows differ in length"));
        }
        let (n, p) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * k * inner);
        for (s, row) in indices.iter().enumerate() {
            for &i in row {
                if i >= p {
                    return Err(Error::IndexOutOfRange { index: i, bound: p });
                }
                out.extend_from_slice(&src[(s * p + i) * inner..(s * p + i + 1) * inner]);
            }
        }
        let mut new_shape = shape;
        new_shape[1] = k;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&new_shape, out)?,
            Op::Gather1 {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(self.mismatch("concat", first, p));
            }
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Normalize the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&1);
        let rows = xv.numel() / d.max(1);
        let mut norms = vec![0.0; rows];
        let mut out = xv.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            norms[r] = n;
            row.iter_mut().for_each(|v| *v /= n);
        }
        let value = Tensor::new(xv.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::L2Normalize { x, norms }, rg)
    }

    /// Tile `a` along a new leading axis of length `n`.
    pub fn repeat_leading(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        let mut data = Vec::with_capacity(av.numel() * n);
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(av.shape());
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::RepeatLeading(a, n), rg))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape(loss).to_vec(),
                reason: "backward requires a scalar loss".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        let params = self.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        Ok(Grads { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / din;
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; rows * din];
                    gemm_nt(rows, dout, din, gd, wv.data(), &mut dx);
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm_tn(din, rows, dout, xv.data(), gd, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), dw)?);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; dout];
                        for r in 0..rows {
                            for (acc, v) in db.iter_mut().zip(&gd[r * dout..(r + 1) * dout]) {
                                *acc += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(&[dout], db)?);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, gd, bv.data(), &mut da);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, av.data(), gd, &mut db);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = if *trans_b { bv.shape()[1] } else { bv.shape()[2] };
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                        let di = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            gemm_nn(m, n, k, gi, bi, di);
                        } else {
                            gemm_nt(m, n, k, gi, bi, di);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let di = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm_tn(n, m, k, gi, ai, di);
                        } else {
                            gemm_tn(k, m, n, ai, gi, di);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::AddSuffix { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let bs = self.shape(*b).to_vec();
                    let inner = bs.iter().product::<usize>();
                    let mut db = vec![0.0; inner];
                    for chunk in gd.chunks(inner) {
                        for (acc, v) in db.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&bs, db)?);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.reshape(&shape)?);
            }
            Op::Permute(a, axes) => {
                let (shape, data) = permute_data(g.shape(), gd, &invert_perm(axes))?;
                self.accumulate(grads, *a, Tensor::new(&shape, data)?);
            }
            Op::Softmax(a, axis) => {
                let s = &node.value;
                let (outer, len, inner) = axis_split(s.shape(), *axis);
                let sd = s.data();
                let mut dx = vec![0.0; sd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|k| gd[base + k * inner] * sd[base + k * inner])
                            .sum();
                        for k in 0..len {
                            let idx = base + k * inner;
                            dx[idx] = sd[idx] * (gd[idx] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(s.shape(), dx)?);
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let (n, c) = (lv.shape()[0], lv.shape()[1]);
                let mut probs = lv.data().to_vec();
                softmax_strided(&mut probs, n, c, 1);
                let scale = g.item() / n as f64;
                for (i, &t) in targets.iter().enumerate() {
                    probs[i * c + t] -= 1.0;
                }
                probs.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, Tensor::new(lv.shape(), probs)?);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let dx: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| gv * gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(av.shape(), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = xhat.len() / d;
                let gam = self.value(*gamma).data();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gam[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(&[d], dg)?);
                    self.accumulate(grads, *beta, Tensor::new(&[d], db)?);
                }
            }
            Op::SumAll(a) => {
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g.item()));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel().max(1) as f64;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::MeanAxis(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            dx[(o * len + k) * inner + i] = gd[o * inner + i] / len as f64;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(&shape, dx)?);
            }
            Op::IndexSelect { x, axis, indices } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let k = indices.len();
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = &gd[(o * k + j) * inner..(o * k + j + 1) * inner];
                        let dst = &mut dx[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&shape, dx)?);
            }
            Op::Gather1 { x, indices } => {
                let shape = self.shape(*x).to_vec();
                let p = shape[1];
                let inner: usize = shape[2..].iter().product();
                let k = indices.first().map_or(0, |r| r.len());
                let mut dx = vec![0.0; shape.iter().product()];
                for (s, row) in indices.iter().enumerate() {
                    for (j, &i) in row.iter().enumerate() {
                        let src = &gd[(s * k + j) * inner..(s * k + j + 1) * inner];
                        let dst = &mut dx[(s * p + i) * inner..(s * p + i + 1) * inner];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&shape, dx)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let len = shape[*axis];
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dp.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(&shape, dp)?);
                    }
                    offset += len;
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = y.len() / norms.len().max(1);
                let mut dx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?);
            }
            Op::RepeatLeading(a, n) => {
                let shape = self.shape(*a).to_vec();
                let inner = self.value(*a).numel();
                let mut da = vec![0.0; inner];
                for r in 0..*n {
                    for (acc, v) in da.iter_mut().zip(&gd[r * inner..(r + 1) * inner]) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(&shape, da)?);
            }
        }
        Ok(())
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}
