//! Define-by-run reverse-mode autodiff.
//!
//! Every primitive appends one node to the [`Tape`]; node ids are handed out in
//! recording order, so inputs always precede outputs and [`Tape::backward`]
//! only has to walk the node list in reverse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::{axis_split, gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::numerics::{Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` did not participate.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Takes ownership of the gradient of `v`, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable input whose gradient [`Tape::backward`] will report.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (av.dims2(), bv.dims2()) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(Error::dim("matmul", av.shape(), bv.shape())),
        };
        if k != k2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(op_name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector to every row (last-axis broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let n = *av.shape().last().expect("non-empty shape");
        if rv.numel() != n {
            return Err(Error::dim("add_row", av.shape(), rv.shape()));
        }
        let data = av
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(rv.data()).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// `x · w + b`, with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                xv.shape()
            )));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len)
                    .map(|a| src[at(a)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / total;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("non-empty shape");
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let n = T::lit(d as f64);
        let rows = xv.numel() / d;
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_fwd);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. Identity when
    /// `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*inputs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let chunk = val.shape()[axis] * inner;
                out.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `len` entries of `x` along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || len == 0 || start + len > xv.shape()[axis] {
            return Err(Error::Contract(format!(
                "slice [{start}, {}) on axis {axis} out of range for shape {:?}",
                start + len,
                xv.shape()
            )));
        }
        let (outer, full, inner) = axis_split(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        if start != self.shape(x)[axis] {
            return Err(Error::dim("split", self.shape(x), sizes));
        }
        Ok(parts)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let value = permute_tensor(xv, axes)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::Contract(format!(
                "mean axis {axis} out of range for shape {:?}",
                xv.shape()
            )));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let n = T::lit(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv.data()[(o * len + a) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / n);
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Mean { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().expect("matrix");
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt_acc(g, bv.data(), &mut da, m, n, k);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn_acc(av.data(), g, &mut db, m, k, n);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = g.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = g.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*row) {
                    let n = self.value(*row).numel();
                    let mut dr = vec![T::zero(); n];
                    for chunk in g.chunks(n) {
                        for (d, &x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    accumulate(grads, *row, dr);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().map(|&x| x * *s).collect());
                }
            }
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, len, inner) = axis_split(out.shape(), *axis);
                    let y = out.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let dot: T = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..len {
                                dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *out.shape().last().expect("non-empty shape");
                let gv = self.value(*gain).data();
                let n = T::lit(d as f64);
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let dxhat: Vec<T> = g[row.clone()]
                            .iter()
                            .zip(gv)
                            .map(|(&a, &b)| a * b)
                            .collect();
                        let h = &xhat[row.clone()];
                        let mean_d = dxhat.iter().copied().sum::<T>() / n;
                        let mean_dh = dxhat.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for c in 0..d {
                            dx[r * d + c] = rs * (dxhat[c] - mean_d - h[c] * mean_dh);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (chunk, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += chunk[c] * h[c];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); d];
                    for chunk in g.chunks(d) {
                        for c in 0..d {
                            db[c] += chunk[c];
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let dx = g.iter().zip(xv).map(|(&a, &v)| a * gelu_grad(v)).collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(&a, &v)| if v > T::zero() { a } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let dx = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            dv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(grads, v, dv);
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let (outer, full, inner) = axis_split(xs, *axis);
                    let len = out.shape()[*axis];
                    let mut dx = vec![T::zero(); xs.iter().product()];
                    for o in 0..outer {
                        let src = o * len * inner;
                        let dst = (o * full + start) * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Permute { x, axes } => {
                if self.wants(*x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let gt = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad shape");
                    let dx = permute_tensor(&gt, &inverse).expect("inverse permutation");
                    accumulate(grads, *x, dx.into_data());
                }
            }
            Op::Mean { x, axis } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let (outer, len, inner) = axis_split(xs, *axis);
                    let n = T::lit(len as f64);
                    let mut dx = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                dx[(o * len + a) * inner + i] = g[o * inner + i] / n;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    accumulate(grads, *x, vec![g[0]; n]);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let inner = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let k = T::lit(GELU_CUBIC);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * sech2 * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// Out-of-tape permutation: output axis `i` is input axis `axes[i]`.
pub fn permute_tensor<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::Contract(format!(
            "{axes:?} is not a permutation of {rank} axes"
        )));
    }
    let in_strides = x.strides();
    let shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = x.numel();
    let mut out = Vec::with_capacity(numel);
    let mut index = vec![0usize; rank];
    let src = x.data();
    for _ in 0..numel {
        out.push(src[index.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>()]);
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    Tensor::new(shape, out)
}
