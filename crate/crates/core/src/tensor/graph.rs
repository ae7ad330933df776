//! Reverse-mode differentiation over a recorded graph of array operations.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's index. The graph is therefore acyclic by construction and
//! a single reverse sweep over the node list is a valid topological order.

use std::str::FromStr;

use super::array::{gemm_acc, gemm_nt_acc, gemm_tn_acc, NdArray, Real};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation kind `{other}`"))),
        }
    }
}

const SQRT_2: Real = std::f64::consts::SQRT_2 as Real;
const INV_SQRT_2PI: Real = 0.398_942_280_401_432_7;

pub(crate) fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: Real) -> Real {
    0.5 * x * (1.0 + libm::erf((x / SQRT_2) as f64) as Real)
}

fn gelu_grad(x: Real) -> Real {
    let cdf = 0.5 * (1.0 + libm::erf((x / SQRT_2) as f64) as Real);
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Probability clamp used by the binary cross-entropy node.
pub const BCE_EPS: Real = 1e-7;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Real),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<Real>, inv_std: Vec<Real> },
    Softmax(Var),
    Act(Var, Activation),
    SumAll(Var),
    MeanAxis0(Var),
    MaxAxis0 { x: Var, argmax: Vec<usize> },
    GatherRows { x: Var, index: Vec<usize> },
    Concat0(Vec<Var>),
    ConcatLast(Vec<Var>),
    SliceLast { x: Var, start: usize },
    SliceAxis0 { x: Var, start: usize },
    Bce { p: Var, target: NdArray, weight: Real },
    SqErr { p: Var, target: NdArray, weight: Real },
}

struct Node {
    value: NdArray,
    op: Op,
    needs_grad: bool,
}

/// A recording of array operations that can be differentiated in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_visits: usize,
}

/// Cotangents produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&NdArray> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn permute_data(src: &[Real], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<Real>) {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
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

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Number of nodes processed by the most recent [`Graph::backward`] call.
    pub fn backward_visits(&self) -> usize {
        self.backward_visits
    }

    fn push(&mut self, value: NdArray, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: NdArray) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(Real, Real) -> Real, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err(name, va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, f);
        Ok(self.push(out, op, &[a, b]))
    }

    /// `x[..., C] + b[C]`, broadcasting `b` over every trailing-axis slice.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = vx.last_dim();
        if vb.len() != c {
            return Err(dim_err("add_row", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// `x[..., K] * w[K, N]`; leading axes of `x` are kept.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.ndim() != 2 || vx.last_dim() != vw.shape()[0] {
            return Err(dim_err("matmul", vx.shape(), vw.shape()));
        }
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        let m = vx.rows();
        let mut out = vec![0.0; m * n];
        gemm_acc(vx.data(), vw.data(), &mut out, m, k, n);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = NdArray::from_parts(shape, out);
        Ok(self.push(out, Op::MatMul(x, w), &[x, w]))
    }

    /// `y = x w + b` with the trailing axis of `x` contracted against `w[Din, Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Batched product of `[B, M, K]` with `[B, K, N]` (or `[B, N, K]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err("bmm", sa, sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(dim_err("bmm", sa, sb));
        }
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let ad = &va.data()[i * m * k..(i + 1) * m * k];
            let bd = &vb.data()[i * k * n..(i + 1) * k * n];
            let od = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt_acc(ad, bd, od, m, k, n);
            } else {
                gemm_acc(ad, bd, od, m, k, n);
            }
        }
        let out = NdArray::from_parts(vec![bs, m, n], out);
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let nd = vx.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Dimension(format!("permute: {axes:?} is not a permutation of {nd} axes")));
        }
        let (shape, data) = permute_data(vx.data(), vx.shape(), axes);
        let out = NdArray::from_parts(shape, data);
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Normalizes each trailing-axis slice, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Real) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let c = vx.last_dim();
        if vg.len() != c || vb.len() != c {
            return Err(dim_err("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.rows();
        let mut xhat = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(c) {
            let mean = row.iter().sum::<Real>() / c as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / c as Real;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let out = NdArray::from_parts(vx.shape().to_vec(), out);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(c) {
            let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let start = out.len();
            let mut s = 0.0;
            for &v in row {
                let e = (v - m).exp();
                s += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o /= s;
            }
        }
        let out = NdArray::from_parts(vx.shape().to_vec(), out);
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(Real) -> Real = match kind {
            Activation::Gelu => gelu,
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => Real::tanh,
        };
        let out = self.value(x).map(f);
        self.push(out, Op::Act(x, kind), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = NdArray::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    /// Mean over the leading axis: `[R, ...] -> [...]`. Each column is summed
    /// in sorted order, so reordering the rows leaves the result bit-identical.
    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let r = vx.shape()[0];
        let inner = vx.len() / r;
        let mut column = vec![0.0; r];
        let out: Vec<Real> = (0..inner)
            .map(|j| {
                for (i, c) in column.iter_mut().enumerate() {
                    *c = vx.data()[i * inner + j];
                }
                column.sort_by(Real::total_cmp);
                column.iter().sum::<Real>() / r as Real
            })
            .collect();
        let shape = if vx.ndim() > 1 { vx.shape()[1..].to_vec() } else { vec![1] };
        self.push(NdArray::from_parts(shape, out), Op::MeanAxis0(x), &[x])
    }

    /// Max over the leading axis; ties resolve to the first row.
    pub fn max_axis0(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let r = vx.shape()[0];
        let inner = vx.len() / r;
        let mut out = vx.data()[..inner].to_vec();
        let mut argmax = vec![0usize; inner];
        for (i, row) in vx.data().chunks(inner).enumerate().skip(1) {
            for j in 0..inner {
                if row[j] > out[j] {
                    out[j] = row[j];
                    argmax[j] = i;
                }
            }
        }
        let shape = if vx.ndim() > 1 { vx.shape()[1..].to_vec() } else { vec![1] };
        self.push(NdArray::from_parts(shape, out), Op::MaxAxis0 { x, argmax }, &[x])
    }

    /// Selects (and possibly repeats) leading-axis rows: `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let r = vx.shape()[0];
        if index.is_empty() {
            return Err(Error::Dimension("gather_rows: empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension(format!("gather_rows: row {bad} out of range for {:?}", vx.shape())));
        }
        let inner = vx.len() / r;
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in index {
            out.extend_from_slice(&vx.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = index.len();
        let out = NdArray::from_parts(shape, out);
        Ok(self.push(out, Op::GatherRows { x, index: index.to_vec() }, &[x]))
    }

    /// Concatenation along the leading axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != first[1..] {
                return Err(dim_err("concat0", &first, v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = first;
        shape[0] = rows;
        let out = NdArray::from_parts(shape, data);
        Ok(self.push(out, Op::Concat0(parts.to_vec()), parts))
    }

    /// Concatenation along the trailing axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let rows = self.value(parts[0]).rows();
        let mut width = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape()[..v.ndim() - 1] != first[..first.len() - 1] {
                return Err(dim_err("concat_last", &first, v.shape()));
            }
            width += v.last_dim();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let c = v.last_dim();
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = first;
        *shape.last_mut().unwrap() = width;
        let out = NdArray::from_parts(shape, data);
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!("slice_last: {start}..{} out of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(vx.rows() * len);
        for row in vx.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = NdArray::from_parts(shape, data);
        Ok(self.push(out, Op::SliceLast { x, start }, &[x]))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_axis0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let r = vx.shape()[0];
        if len == 0 || start + len > r {
            return Err(Error::Dimension(format!("slice_axis0: {start}..{} out of {r}", start + len)));
        }
        let inner = vx.len() / r;
        let data = vx.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = vx.shape().to_vec();
        shape[0] = len;
        let out = NdArray::from_parts(shape, data);
        Ok(self.push(out, Op::SliceAxis0 { x, start }, &[x]))
    }

    /// `weight * sum(BCE(p, target))` with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_sum(&mut self, p: Var, target: &NdArray, weight: Real) -> Result<Var> {
        let vp = self.value(p);
        if vp.shape() != target.shape() {
            return Err(Error::Input(format!(
                "bce: prediction shape {:?} vs label shape {:?}",
                vp.shape(),
                target.shape()
            )));
        }
        let mut s = 0.0;
        for (&pv, &y) in vp.data().iter().zip(target.data()) {
            let q = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            s -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        }
        let out = NdArray::scalar(weight * s);
        Ok(self.push(out, Op::Bce { p, target: target.clone(), weight }, &[p]))
    }

    /// `weight * sum((p - target)^2)`.
    pub fn sq_err_sum(&mut self, p: Var, target: &NdArray, weight: Real) -> Result<Var> {
        let vp = self.value(p);
        if vp.shape() != target.shape() {
            return Err(Error::Input(format!(
                "squared error: prediction shape {:?} vs target shape {:?}",
                vp.shape(),
                target.shape()
            )));
        }
        let s: Real = vp.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = NdArray::scalar(weight * s);
        Ok(self.push(out, Op::SqErr { p, target: target.clone(), weight }, &[p]))
    }

    /// Accumulates d(root)/d(node) for every node that depends on a
    /// differentiable leaf. `root` must hold a single value.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<NdArray>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(NdArray::from_parts(self.shape(root).to_vec(), vec![1.0]));
        self.backward_visits = 0;
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_visits += 1;
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<NdArray>], v: Var, contribution: impl FnOnce() -> NdArray) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let c = contribution();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&c),
            slot => *slot = Some(c),
        }
    }

    /// Adds into the parent's gradient slot in place, allocating zeros first if needed.
    fn accumulate_with(&self, grads: &mut [Option<NdArray>], v: Var, f: impl FnOnce(&mut [Real])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| NdArray::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, i: usize, g: &NdArray, grads: &mut [Option<NdArray>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, || g.zip_map(vb, |x, y| x * y));
                self.accumulate(grads, *b, || g.zip_map(va, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, || g.zip_map(vb, |x, y| x / y));
                self.accumulate_with(grads, *b, |out| {
                    for (((o, &gv), &av), &bv) in out.iter_mut().zip(gd).zip(va.data()).zip(vb.data()) {
                        *o -= gv * av / (bv * bv);
                    }
                });
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, || g.clone());
                let c = g.last_dim();
                self.accumulate_with(grads, *b, |out| {
                    for row in gd.chunks(c) {
                        for (o, v) in out.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, || g.map(|v| v * c)),
            Op::MatMul(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let m = vx.rows();
                self.accumulate_with(grads, *x, |out| gemm_nt_acc(gd, vw.data(), out, m, n, k));
                self.accumulate_with(grads, *w, |out| gemm_tn_acc(vx.data(), gd, out, m, k, n));
            }
            Op::Bmm { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = g.shape()[2];
                self.accumulate_with(grads, *a, |out| {
                    for i in 0..bs {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &vb.data()[i * k * n..(i + 1) * k * n];
                        let oi = &mut out[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            gemm_acc(gi, bi, oi, m, n, k);
                        } else {
                            gemm_nt_acc(gi, bi, oi, m, n, k);
                        }
                    }
                });
                self.accumulate_with(grads, *b, |out| {
                    for i in 0..bs {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &va.data()[i * m * k..(i + 1) * m * k];
                        let oi = &mut out[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm_tn_acc(gi, ai, oi, m, n, k);
                        } else {
                            gemm_tn_acc(ai, gi, oi, m, k, n);
                        }
                    }
                });
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                self.accumulate(grads, *x, || {
                    let (shape, data) = permute_data(gd, g.shape(), &inverse);
                    NdArray::from_parts(shape, data)
                });
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, || NdArray::from_parts(shape, gd.to_vec()));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let vg = self.value(*gain);
                let c = vg.len();
                self.accumulate_with(grads, *x, |out| {
                    for (r, (grow, hrow)) in gd.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = grow[j] * vg.data()[j];
                            mean_d += d;
                            mean_dh += d * hrow[j];
                        }
                        mean_d /= c as Real;
                        mean_dh /= c as Real;
                        let orow = &mut out[r * c..(r + 1) * c];
                        for j in 0..c {
                            let d = grow[j] * vg.data()[j];
                            orow[j] += inv_std[r] * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                });
                self.accumulate_with(grads, *gain, |out| {
                    for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            out[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate_with(grads, *bias, |out| {
                    for grow in gd.chunks(c) {
                        for (o, v) in out.iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.last_dim();
                self.accumulate_with(grads, *x, |out| {
                    for ((orow, grow), yrow) in out.chunks_mut(c).zip(gd.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: Real = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            orow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Act(x, kind) => {
                let y = &node.value;
                let vx = self.value(*x);
                self.accumulate_with(grads, *x, |out| match kind {
                    Activation::Sigmoid => {
                        for ((o, &gv), &yv) in out.iter_mut().zip(gd).zip(y.data()) {
                            *o += gv * yv * (1.0 - yv);
                        }
                    }
                    Activation::Tanh => {
                        for ((o, &gv), &yv) in out.iter_mut().zip(gd).zip(y.data()) {
                            *o += gv * (1.0 - yv * yv);
                        }
                    }
                    Activation::Gelu => {
                        for ((o, &gv), &xv) in out.iter_mut().zip(gd).zip(vx.data()) {
                            *o += gv * gelu_grad(xv);
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let s = gd[0];
                self.accumulate_with(grads, *x, |out| out.iter_mut().for_each(|o| *o += s));
            }
            Op::MeanAxis0(x) => {
                let r = self.shape(*x)[0];
                let inv = 1.0 / r as Real;
                self.accumulate_with(grads, *x, |out| {
                    for row in out.chunks_mut(gd.len()) {
                        for (o, v) in row.iter_mut().zip(gd) {
                            *o += v * inv;
                        }
                    }
                });
            }
            Op::MaxAxis0 { x, argmax } => {
                let inner = gd.len();
                self.accumulate_with(grads, *x, |out| {
                    for (j, &r) in argmax.iter().enumerate() {
                        out[r * inner + j] += gd[j];
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let inner = gd.len() / index.len();
                self.accumulate_with(grads, *x, |out| {
                    for (i, &r) in index.iter().enumerate() {
                        let src = &gd[i * inner..(i + 1) * inner];
                        for (o, v) in out[r * inner..(r + 1) * inner].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let slice = &gd[off..off + n];
                    self.accumulate_with(grads, p, |out| {
                        for (o, v) in out.iter_mut().zip(slice) {
                            *o += v;
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatLast(parts) => {
                let width = g.last_dim();
                let mut col = 0;
                for &p in parts {
                    let c = self.value(p).last_dim();
                    self.accumulate_with(grads, p, |out| {
                        for (orow, grow) in out.chunks_mut(c).zip(gd.chunks(width)) {
                            for (o, v) in orow.iter_mut().zip(&grow[col..col + c]) {
                                *o += v;
                            }
                        }
                    });
                    col += c;
                }
            }
            Op::SliceLast { x, start } => {
                let len = g.last_dim();
                let c = self.value(*x).last_dim();
                self.accumulate_with(grads, *x, |out| {
                    for (orow, grow) in out.chunks_mut(c).zip(gd.chunks(len)) {
                        for (o, v) in orow[*start..*start + len].iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SliceAxis0 { x, start } => {
                let vx = self.value(*x);
                let inner = vx.len() / vx.shape()[0];
                let off = start * inner;
                self.accumulate_with(grads, *x, |out| {
                    for (o, v) in out[off..off + gd.len()].iter_mut().zip(gd) {
                        *o += v;
                    }
                });
            }
            Op::Bce { p, target, weight } => {
                let vp = self.value(*p);
                let s = gd[0] * weight;
                self.accumulate_with(grads, *p, |out| {
                    for ((o, &pv), &y) in out.iter_mut().zip(vp.data()).zip(target.data()) {
                        if pv <= BCE_EPS || pv >= 1.0 - BCE_EPS {
                            continue;
                        }
                        *o -= s * (y / pv - (1.0 - y) / (1.0 - pv));
                    }
                });
            }
            Op::SqErr { p, target, weight } => {
                let vp = self.value(*p);
                let s = 2.0 * gd[0] * weight;
                self.accumulate_with(grads, *p, |out| {
                    for ((o, &pv), &y) in out.iter_mut().zip(vp.data()).zip(target.data()) {
                        *o += s * (pv - y);
                    }
                });
            }
        }
    }
}
