//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op of one forward pass. Parameters are read in
//! place from a borrowed [`ParamStore`]; [`Graph::backward`] returns their
//! gradients as a [`Gradients`] value instead of mutating the store.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, TensorError};
use crate::float::{gemm, Float, MatRef};
use crate::store::{ParamId, ParamStore};
use crate::tensor::{
    broadcast_shapes, broadcast_strides, contiguous_strides, for_each_broadcast, lanes, numel, Tensor,
};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Kernel `[k, n, c]` mixes all input channels; output has `c` channels.
    Full,
    /// Kernel `[k, n, c]` applied per input channel; output has `n * c` channels.
    Depthwise,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Clamp(Var, T, T),
    Softmax(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow(Var, usize, usize),
    Conv1d { x: Var, kernel: Var, mode: ConvMode },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    Gather { table: ParamId, ids: Vec<usize> },
    Bce { logits: Var, labels: Vec<T> },
    StopGradient,
}

#[derive(Debug)]
struct Node<T> {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s, T: Float> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    kinks: Option<Vec<bool>>,
    check_finite: bool,
    buffer_updates: Vec<(ParamId, Vec<T>)>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    inputs: HashMap<usize, Vec<T>>,
    dense: BTreeMap<ParamId, Vec<T>>,
    sparse: BTreeMap<ParamId, BTreeMap<usize, Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to an input created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.inputs.get(&v.0).map(|g| g.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.dense.get(&id).map(|g| g.as_slice())
    }

    pub fn rows(&self, id: ParamId) -> Option<&BTreeMap<usize, Vec<T>>> {
        self.sparse.get(&id)
    }

    pub fn dense(&self) -> impl Iterator<Item = (&ParamId, &Vec<T>)> {
        self.dense.iter()
    }

    pub fn sparse(&self) -> impl Iterator<Item = (&ParamId, &BTreeMap<usize, Vec<T>>)> {
        self.sparse.iter()
    }
}

fn add_into<T: Float>(acc: &mut [T], g: &[T]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
}

impl<'s, T: Float> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            training: true,
            kinks: None,
            check_finite: cfg!(debug_assertions),
            buffer_updates: Vec::new(),
        }
    }

    /// Evaluation mode: batch norm uses running statistics.
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        let mut g = Self::new(store);
        g.training = false;
        g
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Record branch decisions of non-smooth ops (relu, clamp) for gradient checking.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(Vec::new());
    }

    pub fn kink_signature(&self) -> &[bool] {
        self.kinks.as_deref().unwrap_or(&[])
    }

    /// Reject non-finite outputs of ops whose inputs were finite.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Running-statistic updates produced by training-mode batch norm.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.value(v).data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if self.check_finite
            && !data.iter().all(|v| v.is_finite())
            && parents.iter().all(|&p| self.value(p).all_finite())
        {
            return Err(TensorError::Runtime(format!("non-finite output from {}", op_name(&op))));
        }
        let requires_grad = parents.iter().any(|&p| self.rg(p));
        self.nodes.push(Node { value: Some(Tensor::from_parts(shape, data)), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn record_kink(&mut self, flags: impl Iterator<Item = bool>) {
        if let Some(k) = &mut self.kinks {
            k.extend(flags);
        }
    }

    /// Leaf holding `t`; differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node { value: Some(t), op: Op::Input, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.input(t)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Parameter as a graph leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let requires_grad = self.store.kind(id).trainable();
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (da, db) = (self.data(a), self.data(b));
        let out;
        let data = if sa == sb {
            out = sa.clone();
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            out = broadcast_shapes(&sa, &sb).ok_or(TensorError::Shape { op: name, lhs: sa.clone(), rhs: sb.clone() })?;
            let mut v = vec![T::zero(); numel(&out)];
            let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            for_each_broadcast(&out, &ta, &tb, |o, ia, ib| v[o] = f(da[ia], db[ib]));
            v
        };
        self.push(out, data, op, &[a, b])
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

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x + s).collect();
        self.push(self.shape(a).to_vec(), data, Op::AddScalar(a), &[a])
    }

    /// Batched matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || TensorError::Shape { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let batch = broadcast_shapes(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(err)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let (da, db) = (self.data(a), self.data(b));
        if sb.len() == 2 && sa.len() >= 2 {
            // right operand shared: one tall product
            let rows = numel(&sa[..sa.len() - 1]);
            gemm(MatRef::new(da, rows, k), MatRef::new(db, k, n), &mut out, false);
        } else {
            let ta = broadcast_strides(&sa[..sa.len() - 2], &batch);
            let tb = broadcast_strides(&sb[..sb.len() - 2], &batch);
            let (ma, mb, mc) = (m * k, k * n, m * n);
            for_each_broadcast(&batch, &ta, &tb, |o, ia, ib| {
                gemm(
                    MatRef::new(&da[ia * ma..(ia + 1) * ma], m, k),
                    MatRef::new(&db[ib * mb..(ib + 1) * mb], k, n),
                    &mut out[o * mc..(o + 1) * mc],
                    false,
                );
            });
        }
        self.push(out_shape, out, Op::MatMul(a, b), &[a, b])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::Axis { op: "transpose", axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.data(a);
        let data: Vec<T> = x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let mask: Vec<bool> = x.iter().map(|&v| v > T::zero()).collect();
        self.record_kink(mask.into_iter());
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(a).to_vec(), data, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&v| v.tanh()).collect();
        self.push(self.shape(a).to_vec(), data, Op::Tanh(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let x = self.data(a);
        let data: Vec<T> = x.iter().map(|&v| v.max(lo).min(hi)).collect();
        let inside: Vec<bool> = x.iter().map(|&v| v > lo && v < hi).collect();
        self.record_kink(inside.into_iter());
        self.push(self.shape(a).to_vec(), data, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("softmax", axis, shape.len())?;
        let (outer, len, inner) = lanes(&shape, axis);
        let x = self.data(a);
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let mx = (0..len).map(|l| x[at(l)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for l in 0..len {
                    let e = (x[at(l)] - mx).exp();
                    y[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    y[at(l)] /= s;
                }
            }
        }
        self.push(shape, y, Op::Softmax(a, axis), &[a])
    }

    fn reduce(&mut self, a: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(if mean { "mean" } else { "sum" }, axis, shape.len())?;
        let (outer, len, inner) = lanes(&shape, axis);
        let x = self.data(a);
        let mut y = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                add_into(&mut y[o * inner..(o + 1) * inner], src);
            }
        }
        if mean && len > 0 {
            let d = T::of(len as f64);
            y.iter_mut().for_each(|v| *v /= d);
        }
        let mut out = shape.clone();
        if keepdim {
            out[axis] = 1;
        } else {
            out.remove(axis);
        }
        let op = if mean { Op::Mean(a, axis) } else { Op::Sum(a, axis) };
        self.push(out, y, op, &[a])
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false, false)
    }

    pub fn sum_keepdim(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true, false)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false, true)
    }

    pub fn mean_keepdim(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true, true)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::SumAll(a), &[a])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| TensorError::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::Shape { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = lanes(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        self.push(out_shape, out, Op::Concat(xs.to_vec(), axis), xs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a);
        if numel(src) != numel(shape) {
            return Err(TensorError::Shape { op: "reshape", lhs: src.to_vec(), rhs: shape.to_vec() });
        }
        let data = self.data(a).to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Shape { op: "permute", lhs: shape, rhs: perm.to_vec() });
        }
        let strides = contiguous_strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let sa: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let zeros = vec![0; perm.len()];
        let x = self.data(a);
        let mut out = vec![T::zero(); x.len()];
        for_each_broadcast(&out_shape, &sa, &zeros, |o, ia, _| out[o] = x[ia]);
        self.push(out_shape, out, Op::Permute(a, perm.to_vec()), &[a])
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("narrow", axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(TensorError::Index { what: format!("narrow axis {axis}"), index: start + len, len: shape[axis] + 1 });
        }
        let (outer, full, inner) = lanes(&shape, axis);
        let x = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(out_shape, out, Op::Narrow(a, axis, start), &[a])
    }

    /// Same-padded 1-D convolution of `x: [B, t, n]`.
    ///
    /// `kernel` is `[k, n, c]` (shared) or `[B, k, n, c]` (one kernel per
    /// instance); `y[b, i] = sum_l K[l]^T x[b, i + l - k/2]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, mode: ConvMode) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        let err = || TensorError::Shape { op: "conv1d", lhs: sx.clone(), rhs: sk.clone() };
        if sx.len() != 3 {
            return Err(err());
        }
        let (b, t, n) = (sx[0], sx[1], sx[2]);
        let (per_instance, k, kn, c) = match sk.len() {
            3 => (false, sk[0], sk[1], sk[2]),
            4 if sk[0] == b => (true, sk[1], sk[2], sk[3]),
            _ => return Err(err()),
        };
        if kn != n {
            return Err(err());
        }
        if k % 2 == 0 {
            return Err(TensorError::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        if t == 0 {
            return Err(TensorError::Config("conv1d over an empty sequence".into()));
        }
        let cout = match mode {
            ConvMode::Full => c,
            ConvMode::Depthwise => n * c,
        };
        let (xd, kd) = (self.data(x), self.data(kernel));
        let mut y = vec![T::zero(); b * t * cout];
        for bi in 0..b {
            let xb = &xd[bi * t * n..(bi + 1) * t * n];
            let yb = &mut y[bi * t * cout..(bi + 1) * t * cout];
            for l in 0..k {
                let kl = kernel_slice(kd, per_instance, bi, k, l, n * c);
                let Some((dst, src, rows)) = conv_rows(t, k, l) else { continue };
                match mode {
                    ConvMode::Full => gemm(
                        MatRef::new(&xb[src * n..(src + rows) * n], rows, n),
                        MatRef::new(kl, n, c),
                        &mut yb[dst * c..(dst + rows) * c],
                        true,
                    ),
                    ConvMode::Depthwise => {
                        for r in 0..rows {
                            let xr = &xb[(src + r) * n..(src + r + 1) * n];
                            let yr = &mut yb[(dst + r) * cout..(dst + r + 1) * cout];
                            for j in 0..n {
                                for q in 0..c {
                                    yr[j * c + q] += xr[j] * kl[j * c + q];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(vec![b, t, cout], y, Op::Conv1d { x, kernel, mode }, &[x, kernel])
    }

    /// Batch normalization over the rows of `x: [N, d]`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Shape { op: "batch_norm", lhs: shape, rhs: vec![] });
        }
        let (nrow, d) = (shape[0], shape[1]);
        for v in [gamma, beta] {
            if self.shape(v) != [d] {
                return Err(TensorError::Shape { op: "batch_norm", lhs: shape, rhs: self.shape(v).to_vec() });
            }
        }
        let eps = T::of(BN_EPS);
        let xd = self.data(x);
        let mut pending = Vec::new();
        let (mean, var) = if self.training {
            if nrow < 2 {
                return Err(TensorError::Runtime(format!("batch norm in training mode needs at least 2 rows, got {nrow}")));
            }
            let nf = T::of(nrow as f64);
            let mut mean = vec![T::zero(); d];
            for r in 0..nrow {
                add_into(&mut mean, &xd[r * d..(r + 1) * d]);
            }
            mean.iter_mut().for_each(|m| *m /= nf);
            let mut var = vec![T::zero(); d];
            for r in 0..nrow {
                for j in 0..d {
                    let c = xd[r * d + j] - mean[j];
                    var[j] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v /= nf);
            let mom = T::of(BN_MOMENTUM);
            let upd = |run: &[T], batch: &[T]| -> Vec<T> {
                run.iter().zip(batch).map(|(&r, &b)| mom * r + (T::one() - mom) * b).collect()
            };
            let rm = upd(self.store.get(running_mean).data(), &mean);
            let rv = upd(self.store.get(running_var).data(), &var);
            pending.push((running_mean, rm));
            pending.push((running_var, rv));
            (mean, var)
        } else {
            (self.store.get(running_mean).data().to_vec(), self.store.get(running_var).data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); nrow * d];
        let mut y = vec![T::zero(); nrow * d];
        for r in 0..nrow {
            for j in 0..d {
                let h = (xd[r * d + j] - mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                y[r * d + j] = gd[j] * h + bd[j];
            }
        }
        let training = self.training;
        self.buffer_updates.extend(pending);
        self.push(shape, y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, training }, &[x, gamma, beta])
    }

    /// Rows of an embedding table; output shape is `prefix ++ [dim]`.
    pub fn gather(&mut self, table: ParamId, ids: &[usize], prefix: &[usize], what: &str) -> Result<Var> {
        let t = self.store.get(table);
        if t.rank() != 2 {
            return Err(TensorError::Shape { op: "gather", lhs: t.shape().to_vec(), rhs: prefix.to_vec() });
        }
        if numel(prefix) != ids.len() {
            return Err(TensorError::DataLength { shape: prefix.to_vec(), len: ids.len() });
        }
        let (rows, dim) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index { what: format!("field `{what}`"), index: id, len: rows });
            }
            out.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let mut shape = prefix.to_vec();
        shape.push(dim);
        let requires_grad = self.store.kind(table).trainable();
        self.nodes.push(Node {
            value: Some(Tensor::from_parts(shape, out)),
            op: Op::Gather { table, ids: ids.to_vec() },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let z = self.data(logits);
        if z.len() != labels.len() || z.is_empty() {
            return Err(TensorError::DataLength { shape: self.shape(logits).to_vec(), len: labels.len() });
        }
        let mut s = T::zero();
        for (&zi, &yi) in z.iter().zip(labels) {
            s += zi.max(T::zero()) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let loss = s / T::of(z.len() as f64);
        self.push(Vec::new(), vec![loss], Op::Bce { logits, labels: labels.to_vec() }, &[logits])
    }

    /// Identity in the forward pass, blocks gradients in the backward pass.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.nodes.push(Node { value: Some(value), op: Op::StopGradient, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut out = Gradients { inputs: HashMap::new(), dense: BTreeMap::new(), sparse: BTreeMap::new() };
        if !self.rg(loss) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop(idx, &node.op, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop(
        &self,
        idx: usize,
        op: &Op<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let mut send = |v: Var, delta: &dyn Fn(&mut [T])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); numel(self.shape(v))]);
            delta(slot);
        };
        let y = || self.data(Var(idx));
        match op {
            Op::Input => {
                out.inputs.insert(idx, g);
            }
            Op::Param(id) => {
                let slot = out.dense.entry(*id).or_insert_with(|| vec![T::zero(); g.len()]);
                add_into(slot, &g);
            }
            Op::StopGradient => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(op, Op::Sub(..));
                let out_shape = self.shape(Var(idx)).to_vec();
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                send(*a, &|acc| reduce_broadcast(acc, &g, &sa, &out_shape, |v| v));
                send(*b, &|acc| reduce_broadcast(acc, &g, &sb, &out_shape, |v| if neg { -v } else { v }));
            }
            Op::Mul(a, b) => {
                let out_shape = self.shape(Var(idx)).to_vec();
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (da, db) = (self.data(*a), self.data(*b));
                let (ta, tb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
                send(*a, &|acc| for_each_broadcast(&out_shape, &ta, &tb, |o, ia, ib| acc[ia] += g[o] * db[ib]));
                send(*b, &|acc| for_each_broadcast(&out_shape, &ta, &tb, |o, ia, ib| acc[ib] += g[o] * da[ia]));
            }
            Op::Scale(a, s) => send(*a, &|acc| acc.iter_mut().zip(&g).for_each(|(x, &gi)| *x += gi * *s)),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, &|acc| add_into(acc, &g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let (da, db) = (self.data(*a), self.data(*b));
                if sb.len() == 2 {
                    let rows = numel(&sa[..sa.len() - 1]);
                    send(*a, &|acc| gemm(MatRef::new(&g, rows, n), MatRef::new(db, k, n).t(), acc, true));
                    send(*b, &|acc| gemm(MatRef::new(da, rows, k).t(), MatRef::new(&g, rows, n), acc, true));
                } else {
                    let out_shape = self.shape(Var(idx));
                    let batch = &out_shape[..out_shape.len() - 2];
                    let ta = broadcast_strides(&sa[..sa.len() - 2], batch);
                    let tb = broadcast_strides(&sb[..sb.len() - 2], batch);
                    let (ma, mb, mc) = (m * k, k * n, m * n);
                    send(*a, &|acc| {
                        for_each_broadcast(batch, &ta, &tb, |o, ia, ib| {
                            gemm(
                                MatRef::new(&g[o * mc..(o + 1) * mc], m, n),
                                MatRef::new(&db[ib * mb..(ib + 1) * mb], k, n).t(),
                                &mut acc[ia * ma..(ia + 1) * ma],
                                true,
                            )
                        })
                    });
                    send(*b, &|acc| {
                        for_each_broadcast(batch, &ta, &tb, |o, ia, ib| {
                            gemm(
                                MatRef::new(&da[ia * ma..(ia + 1) * ma], m, k).t(),
                                MatRef::new(&g[o * mc..(o + 1) * mc], m, n),
                                &mut acc[ib * mb..(ib + 1) * mb],
                                true,
                            )
                        })
                    });
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                send(*a, &|acc| {
                    for i in 0..acc.len() {
                        if x[i] > T::zero() {
                            acc[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = y();
                send(*a, &|acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = y();
                send(*a, &|acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.data(*a);
                send(*a, &|acc| {
                    for i in 0..acc.len() {
                        if x[i] > *lo && x[i] < *hi {
                            acc[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let y = y();
                let (outer, len, inner) = lanes(self.shape(*a), *axis);
                send(*a, &|acc| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + i;
                            let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                acc[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let (outer, len, inner) = lanes(self.shape(*a), *axis);
                let s = match op {
                    Op::Mean(..) if len > 0 => T::one() / T::of(len as f64),
                    _ => T::one(),
                };
                send(*a, &|acc| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut acc[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, &gi)| *d += gi * s);
                        }
                    }
                });
            }
            Op::SumAll(a) => send(*a, &|acc| acc.iter_mut().for_each(|v| *v += g[0])),
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = lanes(self.shape(Var(idx)), *axis);
                let mut off = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    send(v, &|acc| {
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + len) * inner];
                            add_into(&mut acc[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    off += len;
                }
            }
            Op::Permute(a, perm) => {
                let shape = self.shape(*a);
                let strides = contiguous_strides(shape);
                let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
                let sa: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
                let zeros = vec![0; perm.len()];
                send(*a, &|acc| for_each_broadcast(&out_shape, &sa, &zeros, |o, ia, _| acc[ia] += g[o]));
            }
            Op::Narrow(a, axis, start) => {
                let (outer, full, inner) = lanes(self.shape(*a), *axis);
                let len = self.shape(Var(idx))[*axis];
                send(*a, &|acc| {
                    for o in 0..outer {
                        let dst = &mut acc[(o * full + start) * inner..(o * full + start + len) * inner];
                        add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Conv1d { x, kernel, mode } => {
                let (sx, sk) = (self.shape(*x), self.shape(*kernel));
                let per_instance = sk.len() == 4;
                let (b, t, n) = (sx[0], sx[1], sx[2]);
                let (k, c) = (sk[sk.len() - 3], sk[sk.len() - 1]);
                let cout = if *mode == ConvMode::Full { c } else { n * c };
                let (xd, kd) = (self.data(*x), self.data(*kernel));
                send(*x, &|acc| {
                    for bi in 0..b {
                        let gb = &g[bi * t * cout..(bi + 1) * t * cout];
                        let ab = &mut acc[bi * t * n..(bi + 1) * t * n];
                        for l in 0..k {
                            let kl = kernel_slice(kd, per_instance, bi, k, l, n * c);
                            let Some((dst, src, rows)) = conv_rows(t, k, l) else { continue };
                            match mode {
                                ConvMode::Full => gemm(
                                    MatRef::new(&gb[dst * c..(dst + rows) * c], rows, c),
                                    MatRef::new(kl, n, c).t(),
                                    &mut ab[src * n..(src + rows) * n],
                                    true,
                                ),
                                ConvMode::Depthwise => {
                                    for r in 0..rows {
                                        for j in 0..n {
                                            let mut s = T::zero();
                                            for q in 0..c {
                                                s += gb[(dst + r) * cout + j * c + q] * kl[j * c + q];
                                            }
                                            ab[(src + r) * n + j] += s;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                send(*kernel, &|acc| {
                    for bi in 0..b {
                        let gb = &g[bi * t * cout..(bi + 1) * t * cout];
                        let xb = &xd[bi * t * n..(bi + 1) * t * n];
                        for l in 0..k {
                            let off = if per_instance { (bi * k + l) * n * c } else { l * n * c };
                            let kl = &mut acc[off..off + n * c];
                            let Some((dst, src, rows)) = conv_rows(t, k, l) else { continue };
                            match mode {
                                ConvMode::Full => gemm(
                                    MatRef::new(&xb[src * n..(src + rows) * n], rows, n).t(),
                                    MatRef::new(&gb[dst * c..(dst + rows) * c], rows, c),
                                    kl,
                                    true,
                                ),
                                ConvMode::Depthwise => {
                                    for r in 0..rows {
                                        for j in 0..n {
                                            let xv = xb[(src + r) * n + j];
                                            for q in 0..c {
                                                kl[j * c + q] += gb[(dst + r) * cout + j * c + q] * xv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let d = inv_std.len();
                let nrow = g.len() / d.max(1);
                let gd = self.data(*gamma);
                let mut sum_g = vec![T::zero(); d];
                let mut sum_gx = vec![T::zero(); d];
                for r in 0..nrow {
                    for j in 0..d {
                        sum_g[j] += g[r * d + j];
                        sum_gx[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                send(*beta, &|acc| add_into(acc, &sum_g));
                send(*gamma, &|acc| add_into(acc, &sum_gx));
                send(*x, &|acc| {
                    let nf = T::of(nrow as f64);
                    for r in 0..nrow {
                        for j in 0..d {
                            let i = r * d + j;
                            acc[i] += if *training {
                                gd[j] * inv_std[j] * (g[i] - sum_g[j] / nf - xhat[i] * sum_gx[j] / nf)
                            } else {
                                gd[j] * inv_std[j] * g[i]
                            };
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let dim = self.store.get(*table).shape()[1];
                let rows = out.sparse.entry(*table).or_default();
                for (i, &id) in ids.iter().enumerate() {
                    let row = rows.entry(id).or_insert_with(|| vec![T::zero(); dim]);
                    add_into(row, &g[i * dim..(i + 1) * dim]);
                }
            }
            Op::Bce { logits, labels } => {
                let z = self.data(*logits);
                let s = g[0] / T::of(z.len() as f64);
                send(*logits, &|acc| {
                    for i in 0..acc.len() {
                        acc[i] += s * (sigmoid(z[i]) - labels[i]);
                    }
                });
            }
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::MatMul(..) => "matmul",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Clamp(..) => "clamp",
        Op::Softmax(..) => "softmax",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumAll(_) => "sum_all",
        Op::Concat(..) => "concat",
        Op::Reshape(_) => "reshape",
        Op::Permute(..) => "permute",
        Op::Narrow(..) => "narrow",
        Op::Conv1d { .. } => "conv1d",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Gather { .. } => "gather",
        Op::Bce { .. } => "bce_with_logits",
        Op::StopGradient => "stop_gradient",
    }
}

pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::Axis { op, axis, rank });
    }
    Ok(())
}

/// Sum `g` (broadcast shape `out`) back onto a tensor of shape `src`.
fn reduce_broadcast<T: Float>(acc: &mut [T], g: &[T], src: &[usize], out: &[usize], f: impl Fn(T) -> T) {
    if src == out {
        acc.iter_mut().zip(g).for_each(|(a, &v)| *a += f(v));
        return;
    }
    let ts = broadcast_strides(src, out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &ts, &zeros, |o, i, _| acc[i] += f(g[o]));
}

fn kernel_slice<T>(kd: &[T], per_instance: bool, b: usize, k: usize, l: usize, block: usize) -> &[T] {
    let off = if per_instance { (b * k + l) * block } else { l * block };
    &kd[off..off + block]
}

/// Output rows `[dst, dst+rows)` read input rows `[src, src+rows)` at kernel offset `l`.
fn conv_rows(t: usize, k: usize, l: usize) -> Option<(usize, usize, usize)> {
    let shift = l as isize - (k / 2) as isize;
    let dst = (-shift).max(0) as usize;
    let end = (t as isize - shift).min(t as isize);
    if end <= dst as isize {
        return None;
    }
    let rows = end as usize - dst;
    Some((dst, (dst as isize + shift) as usize, rows))
}
