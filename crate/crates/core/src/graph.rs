//! Dynamic tape for reverse-mode differentiation.
//!
//! Every forward pass builds a fresh [`Graph`]. Operations append nodes in
//! execution order, so the node list is already topologically sorted and
//! [`Graph::backward`] walks it once in reverse. Only nodes that transitively
//! depend on a gradient-requiring leaf take part in the backward sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRows(usize, usize),
    Silu(usize),
    LayerNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    SumAll(usize),
    SqErrSum(usize, Option<usize>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        base: usize,
        src: usize,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    GatherElems {
        x: usize,
        idx: Vec<usize>,
    },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf that was created
/// with `requires_grad`.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn check_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, format!("expected rank 2, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        // Constant subgraphs keep no saved state for backward.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_rank2("matmul", self.value(a))?;
        let (k2, n) = check_rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}x{k}] x [{k2}x{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            0.0,
            &mut out,
            n as isize,
            1,
        );
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a.0, b.0),
            &[a.0, b.0],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(name, t, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        self.push("scale", t, Op::Scale(a.0, c), &[a.0])
    }

    /// `x[m×n] + r[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let vx = self.value(x);
        let vr = self.value(r);
        let n = vx.cols();
        if vr.numel() != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", vx.shape(), vr.shape()),
            ));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push("add_row", t, Op::AddRow(x.0, r.0), &[x.0, r.0])
    }

    /// Scales row `i` of `x[m×n]` by `s[i]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let vx = self.value(x);
        let vs = self.value(s);
        let n = vx.cols();
        if vs.numel() != vx.rows() {
            return Err(Error::shape(
                "mul_rows",
                format!("{:?} * {:?}", vx.shape(), vs.shape()),
            ));
        }
        let mut data = vx.data().to_vec();
        for (row, &c) in data.chunks_mut(n).zip(vs.data()) {
            row.iter_mut().for_each(|o| *o *= c);
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push("mul_rows", t, Op::MulRows(x.0, s.0), &[x.0, s.0])
    }

    /// SiLU activation `x·σ(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push("silu", t, Op::Silu(x.0), &[x.0])
    }

    /// Normalizes every row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        if n == 0 {
            return Err(Error::shape("layer_norm", "empty last axis"));
        }
        let (data, inv_std) = layer_norm_rows(vx.data(), n, eps);
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push("layer_norm", t, Op::LayerNorm { x: x.0, inv_std }, &[x.0])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::Invalid(format!(
                "softmax axis {axis} for rank {}",
                vx.rank()
            )));
        }
        let (outer, n, inner) = axis_split(vx.shape(), axis);
        if n == 0 {
            return Err(Error::shape("softmax", "empty axis"));
        }
        let mut data = vx.data().to_vec();
        softmax_strided(&mut data, outer, n, inner);
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push("softmax", t, Op::Softmax { x: x.0, axis }, &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `Σ (a − b)²` as a scalar.
    pub fn sq_err_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_err_sum", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push("sq_err_sum", Tensor::scalar(s), Op::SqErrSum(a.0, Some(b.0)), &[a.0, b.0])
    }

    /// `Σ x²` as a scalar.
    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push("sum_sq", Tensor::scalar(s), Op::SqErrSum(a.0, None), &[a.0])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sq_err_sum(a, b)?;
        self.scale(s, 1.0 / n)
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences. `q` is `[batch·lq, d]`, `k` and `v` are `[batch·lk, d]`;
    /// heads split the `d` columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (qr, d) = check_rank2("attention", self.value(q))?;
        let (kr, dk) = check_rank2("attention", self.value(k))?;
        let (vr, dv) = check_rank2("attention", self.value(v))?;
        if batch == 0 || heads == 0 || d % heads != 0 || dk != d || dv != d || kr != vr {
            return Err(Error::shape(
                "attention",
                format!("q [{qr}x{d}] k [{kr}x{dk}] v [{vr}x{dv}] batch {batch} heads {heads}"),
            ));
        }
        if qr % batch != 0 || kr % batch != 0 {
            return Err(Error::shape("attention", "rows not divisible by batch"));
        }
        let lq = qr / batch;
        let lk = kr / batch;
        if lk == 0 {
            return Err(Error::shape("attention", "empty key set"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; batch * heads * lq * lk];
        let mut out = vec![0.0; qr * d];
        for b in 0..batch {
            for h in 0..heads {
                let qo = b * lq * d + h * dh;
                let ko = b * lk * d + h * dh;
                let po = (b * heads + h) * lq * lk;
                let p = &mut probs[po..po + lq * lk];
                gemm(lq, dh, lk, &qd[qo..], d as isize, 1, &kd[ko..], 1, d as isize, 0.0, p, lk as isize, 1);
                p.iter_mut().for_each(|s| *s *= scale);
                softmax_strided(p, lq, lk, 1);
                gemm(lq, lk, dh, p, lk as isize, 1, &vd[ko..], d as isize, 1, 0.0, &mut out[qo..], d as isize, 1);
            }
        }
        let t = Tensor::from_parts(vec![qr, d], out);
        self.push(
            "attention",
            t,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                batch,
                heads,
                probs,
            },
            &[q.0, k.0, v.0],
        )
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = check_rank2("slice_cols", self.value(x))?;
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {n}", start + len)));
        }
        let vx = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&vx[r * n + start..r * n + start + len]);
        }
        let t = Tensor::from_parts(vec![m, len], data);
        self.push("slice_cols", t, Op::SliceCols { x: x.0, start }, &[x.0])
    }

    /// Row `r` of the output is row `idx[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        let m = vx.rows();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::OutOfRange {
                    what: "gather_rows",
                    index: i,
                    limit: m,
                });
            }
            data.extend_from_slice(vx.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), n], data);
        self.push("gather_rows", t, Op::GatherRows { x: x.0, idx: idx.to_vec() }, &[x.0])
    }

    /// Copy of `base` with row `src[j]` added onto row `idx[j]`.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let vb = self.value(base);
        let vs = self.value(src);
        let n = vb.cols();
        if vs.cols() != n || vs.rows() != idx.len() {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{:?} into {:?} at {} rows", vs.shape(), vb.shape(), idx.len()),
            ));
        }
        let m = vb.rows();
        let mut data = vb.data().to_vec();
        for (j, &i) in idx.iter().enumerate() {
            if i >= m {
                return Err(Error::OutOfRange {
                    what: "scatter_add_rows",
                    index: i,
                    limit: m,
                });
            }
            for (o, s) in data[i * n..(i + 1) * n].iter_mut().zip(vs.row(j)) {
                *o += s;
            }
        }
        let t = Tensor::from_parts(vb.shape().to_vec(), data);
        self.push(
            "scatter_add_rows",
            t,
            Op::ScatterAddRows {
                base: base.0,
                src: src.0,
                idx: idx.to_vec(),
            },
            &[base.0, src.0],
        )
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != n {
                return Err(Error::shape("concat_rows", format!("{} vs {n} columns", vp.cols())));
            }
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let t = Tensor::from_parts(vec![rows, n], data);
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push("concat_rows", t, Op::ConcatRows(ids.clone()), &ids)
    }

    /// Vector of the flat elements `x[idx[j]]`.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= vx.numel() {
                return Err(Error::OutOfRange {
                    what: "gather_elems",
                    index: i,
                    limit: vx.numel(),
                });
            }
            data.push(vx.data()[i]);
        }
        let t = Tensor::from_parts(vec![idx.len()], data);
        self.push("gather_elems", t, Op::GatherElems { x: x.0, idx: idx.to_vec() }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x.0), &[x.0])
    }

    /// Reverse sweep from a scalar loss. Consumes the graph and returns the
    /// gradient of every `requires_grad` leaf; leaves the loss does not
    /// depend on get an all-zero gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    out.grads.insert(Var(i), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            backprop_node(nodes, i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                out.grads
                    .insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        // Leaves created after the loss cannot influence it.
        for (i, node) in nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                out.grads.insert(Var(i), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// In-place max-subtracted softmax along the middle extent of an
/// `[outer, n, inner]` view.
pub(crate) fn softmax_strided(data: &mut [f64], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for c in 0..inner {
            let base = o * n * inner + c;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(data[base + j * inner]);
            }
            let mut s = 0.0;
            for j in 0..n {
                let e = (data[base + j * inner] - mx).exp();
                data[base + j * inner] = e;
                s += e;
            }
            let inv = 1.0 / s;
            for j in 0..n {
                data[base + j * inner] *= inv;
            }
        }
    }
}

pub(crate) fn layer_norm_rows(x: &[f64], n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / n;
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for (xr, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (o, v) in orow.iter_mut().zip(xr) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (out, inv_std)
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[i].needs_grad {
        return None;
    }
    let n = nodes[i].value.numel();
    Some(grads[i].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            if let Some(da) = acc(grads, nodes, *a) {
                gemm(m, n, k, g, n as isize, 1, vb.data(), 1, n as isize, 1.0, da, k as isize, 1);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                gemm(k, m, n, va.data(), 1, k as isize, g, n as isize, 1, 1.0, db, n as isize, 1);
            }
        }
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if let Some(d) = acc(grads, nodes, p) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = acc(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = acc(grads, nodes, *b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(d) = acc(grads, nodes, *a) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(vb.data()) {
                    *d += g * y;
                }
            }
            if let Some(d) = acc(grads, nodes, *b) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(va.data()) {
                    *d += g * x;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = acc(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
            }
        }
        Op::AddRow(x, r) => {
            let n = nodes[*r].value.numel();
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = acc(grads, nodes, *r) {
                for row in g.chunks(n) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::MulRows(x, s) => {
            let vx = &nodes[*x].value;
            let vs = &nodes[*s].value;
            let n = vx.cols();
            if let Some(d) = acc(grads, nodes, *x) {
                for ((drow, grow), c) in d.chunks_mut(n).zip(g.chunks(n)).zip(vs.data()) {
                    drow.iter_mut().zip(grow).for_each(|(d, g)| *d += g * c);
                }
            }
            if let Some(d) = acc(grads, nodes, *s) {
                for ((dc, grow), xrow) in d.iter_mut().zip(g.chunks(n)).zip(vx.data().chunks(n)) {
                    *dc += grow.iter().zip(xrow).map(|(g, x)| g * x).sum::<f64>();
                }
            }
        }
        Op::Silu(x) => {
            let vx = &nodes[*x].value;
            if let Some(d) = acc(grads, nodes, *x) {
                for ((d, g), &v) in d.iter_mut().zip(g).zip(vx.data()) {
                    let s = sigmoid(v);
                    *d += g * s * (1.0 + v * (1.0 - s));
                }
            }
        }
        Op::LayerNorm { x, inv_std } => {
            let y = node.value.data();
            let n = node.value.cols();
            if let Some(d) = acc(grads, nodes, *x) {
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        d[r * n + j] += is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = axis_split(node.value.shape(), *axis);
            if let Some(d) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for c in 0..inner {
                        let base = o * n * inner + c;
                        let dot: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..n {
                            let t = base + j * inner;
                            d[t] += y[t] * (g[t] - dot);
                        }
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SqErrSum(a, b) => {
            let va = nodes[*a].value.data();
            let diff: Vec<f64> = match b {
                Some(b) => va.iter().zip(nodes[*b].value.data()).map(|(x, y)| 2.0 * g[0] * (x - y)).collect(),
                None => va.iter().map(|x| 2.0 * g[0] * x).collect(),
            };
            if let Some(d) = acc(grads, nodes, *a) {
                d.iter_mut().zip(&diff).for_each(|(d, v)| *d += v);
            }
            if let Some(b) = b {
                if let Some(d) = acc(grads, nodes, *b) {
                    d.iter_mut().zip(&diff).for_each(|(d, v)| *d -= v);
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            batch,
            heads,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), *batch, *heads, probs),
        Op::SliceCols { x, start } => {
            let n_in = nodes[*x].value.cols();
            let len = node.value.cols();
            if let Some(d) = acc(grads, nodes, *x) {
                for (r, grow) in g.chunks(len).enumerate() {
                    let drow = &mut d[r * n_in + start..r * n_in + start + len];
                    drow.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let n = node.value.cols();
            if let Some(d) = acc(grads, nodes, *x) {
                for (grow, &src) in g.chunks(n).zip(idx) {
                    d[src * n..(src + 1) * n].iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::ScatterAddRows { base, src, idx } => {
            let n = node.value.cols();
            if let Some(d) = acc(grads, nodes, *base) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = acc(grads, nodes, *src) {
                for (j, &dst) in idx.iter().enumerate() {
                    d[j * n..(j + 1) * n]
                        .iter_mut()
                        .zip(&g[dst * n..(dst + 1) * n])
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                if let Some(d) = acc(grads, nodes, p) {
                    d.iter_mut().zip(&g[off..off + len]).for_each(|(d, g)| *d += g);
                }
                off += len;
            }
        }
        Op::GatherElems { x, idx } => {
            if let Some(d) = acc(grads, nodes, *x) {
                for (gv, &j) in g.iter().zip(idx) {
                    d[j] += gv;
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (usize, usize, usize),
    batch: usize,
    heads: usize,
    probs: &[f64],
) {
    let qd = nodes[q].value.data();
    let kd = nodes[k].value.data();
    let vd = nodes[v].value.data();
    let d = nodes[q].value.cols();
    let lq = nodes[q].value.rows() / batch;
    let lk = nodes[k].value.rows() / batch;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let need_q = nodes[q].needs_grad;
    let need_k = nodes[k].needs_grad;
    let need_v = nodes[v].needs_grad;
    let mut dq = need_q.then(|| vec![0.0; qd.len()]);
    let mut dk = need_k.then(|| vec![0.0; kd.len()]);
    let mut dv = need_v.then(|| vec![0.0; vd.len()]);
    let mut dp = vec![0.0; lq * lk];
    for b in 0..batch {
        for h in 0..heads {
            let qo = b * lq * d + h * dh;
            let ko = b * lk * d + h * dh;
            let po = (b * heads + h) * lq * lk;
            let p = &probs[po..po + lq * lk];
            if let Some(dv) = dv.as_mut() {
                // dV += Pᵀ dO
                gemm(lk, lq, dh, p, 1, lk as isize, &g[qo..], d as isize, 1, 1.0, &mut dv[ko..], d as isize, 1);
            }
            if !(need_q || need_k) {
                continue;
            }
            // dP = dO Vᵀ
            gemm(lq, dh, lk, &g[qo..], d as isize, 1, &vd[ko..], 1, d as isize, 0.0, &mut dp, lk as isize, 1);
            for r in 0..lq {
                let pr = &p[r * lk..(r + 1) * lk];
                let dr = &mut dp[r * lk..(r + 1) * lk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (dv, pv) in dr.iter_mut().zip(pr) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            if let Some(dq) = dq.as_mut() {
                gemm(lq, lk, dh, &dp, lk as isize, 1, &kd[ko..], d as isize, 1, 1.0, &mut dq[qo..], d as isize, 1);
            }
            if let Some(dk) = dk.as_mut() {
                gemm(lk, lq, dh, &dp, 1, lk as isize, &qd[qo..], d as isize, 1, 1.0, &mut dk[ko..], d as isize, 1);
            }
        }
    }
    for (idx, buf) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(buf) = buf {
            if let Some(d) = acc(grads, nodes, idx) {
                d.iter_mut().zip(&buf).for_each(|(d, g)| *d += g);
            }
        }
    }
}
