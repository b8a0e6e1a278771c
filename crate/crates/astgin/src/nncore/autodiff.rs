//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape of tensor operations built per batch and discarded
//! after the optimizer step. Every op validates shapes up front and, when the
//! graph is constructed in checked mode, scans its output for non-finite
//! values. Inputs always have smaller node indices than outputs, so
//! [`Graph::backward`] is a single reverse sweep.

use super::tensor::{axpy, bmm, matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced in checked mode")]
    NonFinite { op: &'static str },
    #[error("backward called twice without graph reset")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

enum OpRecord<T: Scalar> {
    Leaf,
    Matmul { a: usize, b: usize },
    Bmm { a: usize, b: usize, tb: bool },
    MatmulLShared { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: T },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize, end: usize },
    Permute { a: usize, perm: Vec<usize> },
    Reshape { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, eps: T },
    Dropout { a: usize, mask: Tensor<T> },
    Embedding { table: usize, indices: Vec<usize> },
    Mse { a: usize, b: usize },
    Sum { a: usize },
    MeanAxis { a: usize, axis: usize },
    GatherRows { a: usize, idx: Vec<usize>, u: usize },
    ScatterRows { base: usize, rows: usize, idx: Vec<usize>, u: usize },
    BroadcastAxis1 { a: usize, len: usize },
    MaxPoolAxis1 { a: usize, argmax: Vec<usize> },
}

impl<T: Scalar> OpRecord<T> {
    fn name(&self) -> &'static str {
        match self {
            OpRecord::Leaf => "leaf",
            OpRecord::Matmul { .. } => "matmul",
            OpRecord::Bmm { .. } => "bmm",
            OpRecord::MatmulLShared { .. } => "matmul_lshared",
            OpRecord::Add { .. } => "add",
            OpRecord::Sub { .. } => "sub",
            OpRecord::Mul { .. } => "mul",
            OpRecord::Scale { .. } => "scale",
            OpRecord::Concat { .. } => "concat",
            OpRecord::Slice { .. } => "slice",
            OpRecord::Permute { .. } => "permute",
            OpRecord::Reshape { .. } => "reshape",
            OpRecord::Relu { .. } => "relu",
            OpRecord::Sigmoid { .. } => "sigmoid",
            OpRecord::Tanh { .. } => "tanh",
            OpRecord::Softmax { .. } => "softmax",
            OpRecord::LayerNorm { .. } => "layer_norm",
            OpRecord::Dropout { .. } => "dropout",
            OpRecord::Embedding { .. } => "embedding_lookup",
            OpRecord::Mse { .. } => "mse",
            OpRecord::Sum { .. } => "sum",
            OpRecord::MeanAxis { .. } => "mean_axis",
            OpRecord::GatherRows { .. } => "gather_rows",
            OpRecord::ScatterRows { .. } => "scatter_rows",
            OpRecord::BroadcastAxis1 { .. } => "broadcast_axis1",
            OpRecord::MaxPoolAxis1 { .. } => "max_pool_axis1",
        }
    }
}

/// Reverse-mode tape. Build ops forward, call [`Graph::backward`] once.
pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<OpRecord<T>>,
    needs: Vec<bool>,
    grads: Vec<Option<Tensor<T>>>,
    requires: Vec<bool>,
    checked: bool,
    backward_run: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_mode(false)
    }

    /// Checked mode scans every op output for NaN/Inf.
    pub fn checked() -> Self {
        Self::with_mode(true)
    }

    fn with_mode(checked: bool) -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            checked,
            backward_run: false,
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.index]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.index].shape()
    }

    /// Gradient of a node after [`Graph::backward`]; `None` when the node
    /// does not require gradients.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.index].as_ref()
    }

    /// Differentiable input node.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var, NnError> {
        self.push(value, OpRecord::Leaf, true, true)
    }

    /// Non-differentiable input node.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, NnError> {
        self.push(value, OpRecord::Leaf, false, false)
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: OpRecord<T>,
        needs: bool,
        requires: bool,
    ) -> Result<Var, NnError> {
        if self.checked && !value.all_finite() {
            return Err(NnError::NonFinite { op: op.name() });
        }
        let index = self.values.len();
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        self.grads.push(None);
        self.requires.push(requires);
        Ok(Var { index })
    }

    fn needs_any(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.needs[i])
    }

    fn mismatch(op: &'static str, detail: String) -> NnError {
        NnError::ShapeMismatch { op, detail }
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a [m,k] * b [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros([m, n]);
        matmul_nn(self.values[a.index].data(), self.values[b.index].data(), out.data_mut(), m, k, n);
        let needs = self.needs_any(&[a.index, b.index]);
        self.push(out, OpRecord::Matmul { a: a.index, b: b.index }, needs, false)
    }

    /// Batched `a [B,m,k] * b [B,k,n] -> [B,m,n]`; `tb` treats `b` as
    /// `[B,n,k]` and multiplies by its transpose.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if tb { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Self::mismatch("bmm", format!("{sa:?} x {sb:?} (tb={tb})")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if tb { sb[1] } else { sb[2] };
        let mut out = Tensor::zeros([batch, m, n]);
        bmm(
            self.values[a.index].data(),
            self.values[b.index].data(),
            out.data_mut(),
            batch,
            m,
            k,
            n,
            false,
            tb,
        );
        let needs = self.needs_any(&[a.index, b.index]);
        self.push(out, OpRecord::Bmm { a: a.index, b: b.index, tb }, needs, false)
    }

    /// Shared-left batched product: `a [m,k] * b [B,k,n] -> [B,m,n]`.
    pub fn matmul_lshared(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 3 || sa[1] != sb[1] {
            return Err(Self::mismatch("matmul_lshared", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (batch, n) = (sb[0], sb[2]);
        let mut out = Tensor::zeros([batch, m, n]);
        for bi in 0..batch {
            matmul_nn(
                self.values[a.index].data(),
                &self.values[b.index].data()[bi * k * n..(bi + 1) * k * n],
                &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let needs = self.needs_any(&[a.index, b.index]);
        self.push(out, OpRecord::MatmulLShared { a: a.index, b: b.index }, needs, false)
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var, NnError> {
        if self.shape(a).len() != 2 {
            return Err(Self::mismatch("transpose", format!("{:?} is not rank 2", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    // ---- elementwise -------------------------------------------------------

    /// Elementwise add; `b` may be a trailing-shape broadcast of `a`
    /// (bias rows, positional encodings, scalar offsets).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_broadcast(a, b, "add", |x, y| x + y)
    }

    /// Elementwise subtract; shapes must match exactly.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch(
                "sub",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = Tensor::from_vec(
            self.shape(a).to_vec(),
            self.values[a.index]
                .data()
                .iter()
                .zip(self.values[b.index].data())
                .map(|(&x, &y)| x - y)
                .collect(),
        );
        let needs = self.needs_any(&[a.index, b.index]);
        self.push(out, OpRecord::Sub { a: a.index, b: b.index }, needs, false)
    }

    /// Elementwise multiply; `b` may be a trailing-shape broadcast of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_broadcast(a, b, "mul", |x, y| x * y)
    }

    fn binary_broadcast(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if !is_suffix(&sb, &sa) {
            return Err(Self::mismatch(op, format!("{sb:?} is not a trailing shape of {sa:?}")));
        }
        let bl = self.values[b.index].len().max(1);
        let bdata = self.values[b.index].data();
        let out = Tensor::from_vec(
            sa.clone(),
            self.values[a.index]
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bdata[i % bl]))
                .collect(),
        );
        let needs = self.needs_any(&[a.index, b.index]);
        let record = match op {
            "add" => OpRecord::Add { a: a.index, b: b.index },
            "mul" => OpRecord::Mul { a: a.index, b: b.index },
            _ => unreachable!(),
        };
        self.push(out, record, needs, false)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, NnError> {
        let out = self.values[a.index].map(|x| x * c);
        let needs = self.needs[a.index];
        self.push(out, OpRecord::Scale { a: a.index, c }, needs, false)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NnError> {
        let out = self.values[a.index].map(|x| if x > T::zero() { x } else { T::zero() });
        let needs = self.needs[a.index];
        self.push(out, OpRecord::Relu { a: a.index }, needs, false)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NnError> {
        let one = T::one();
        let out = self.values[a.index].map(|x| one / (one + (-x).exp()));
        let needs = self.needs[a.index];
        self.push(out, OpRecord::Sigmoid { a: a.index }, needs, false)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NnError> {
        let out = self.values[a.index].map(|x| x.tanh());
        let needs = self.needs[a.index];
        self.push(out, OpRecord::Tanh { a: a.index }, needs, false)
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NnError> {
        let vol: usize = shape.iter().product();
        if vol != self.values[a.index].len() {
            return Err(Self::mismatch(
                "reshape",
                format!("{:?} -> {:?} changes volume", self.shape(a), shape),
            ));
        }
        let out = self.values[a.index].clone().reshaped(shape.to_vec());
        let needs = self.needs[a.index];
        self.push(out, OpRecord::Reshape { a: a.index }, needs, false)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        if !is_permutation(perm, sa.len()) {
            return Err(NnError::InvalidArgument {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of 0..{}", sa.len()),
            });
        }
        let out = permute_tensor(&self.values[a.index], perm);
        let needs = self.needs[a.index];
        self.push(out, OpRecord::Permute { a: a.index, perm: perm.to_vec() }, needs, false)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(NnError::InvalidArgument { op: "concat", detail: "no inputs".into() });
        }
        let s0 = self.shape(parts[0]).to_vec();
        if axis >= s0.len() {
            return Err(NnError::InvalidArgument {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {}", s0.len()),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            let sp = self.shape(*p);
            let compatible = sp.len() == s0.len()
                && sp.iter().zip(&s0).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Self::mismatch("concat", format!("{sp:?} vs {s0:?} on axis {axis}")));
            }
            axis_total += sp[axis];
        }
        let mut shape = s0.clone();
        shape[axis] = axis_total;
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut data = vec![T::zero(); shape.iter().product()];
        let out_stride = axis_total * inner;
        let mut offset = 0;
        for p in parts {
            let t = &self.values[p.index];
            let al = t.shape()[axis];
            let in_stride = al * inner;
            for o in 0..outer {
                let src = &t.data()[o * in_stride..(o + 1) * in_stride];
                let dst = &mut data[o * out_stride + offset..o * out_stride + offset + in_stride];
                dst.copy_from_slice(src);
            }
            offset += al * inner;
        }
        let idxs: Vec<usize> = parts.iter().map(|p| p.index).collect();
        let needs = self.needs_any(&idxs);
        self.push(Tensor::from_vec(shape, data), OpRecord::Concat { parts: idxs, axis }, needs, false)
    }

    /// Half-open slice `[start, end)` along one axis.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start > end || end > sa[axis] {
            return Err(NnError::InvalidArgument {
                op: "slice",
                detail: format!("[{start},{end}) on axis {axis} of {sa:?}"),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let mut shape = sa.clone();
        shape[axis] = end - start;
        let mut data = vec![T::zero(); shape.iter().product()];
        let in_stride = sa[axis] * inner;
        let out_stride = (end - start) * inner;
        let src_all = self.values[a.index].data();
        for o in 0..outer {
            let src = &src_all[o * in_stride + start * inner..o * in_stride + end * inner];
            data[o * out_stride..(o + 1) * out_stride].copy_from_slice(src);
        }
        let needs = self.needs[a.index];
        self.push(
            Tensor::from_vec(shape, data),
            OpRecord::Slice { a: a.index, axis, start, end },
            needs,
            false,
        )
    }

    // ---- reductions and normalization ---------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(NnError::InvalidArgument {
                op: "softmax",
                detail: format!("axis {axis} out of range for {sa:?}"),
            });
        }
        let (outer, al, inner) = axis_split(&sa, axis);
        let src = self.values[a.index].data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * al + j) * inner + i;
                let mut mx = src[at(0)];
                for j in 1..al {
                    mx = mx.max(src[at(j)]);
                }
                let mut denom = T::zero();
                for j in 0..al {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    denom += e;
                }
                for j in 0..al {
                    data[at(j)] = data[at(j)] / denom;
                }
            }
        }
        let needs = self.needs[a.index];
        self.push(Tensor::from_vec(sa, data), OpRecord::Softmax { a: a.index, axis }, needs, false)
    }

    /// Normalize the last axis to zero mean / unit variance, then apply the
    /// learned `gamma`/`beta` affine pair.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        let n = *sa.last().ok_or_else(|| Self::mismatch("layer_norm", "rank-0 input".into()))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Self::mismatch(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{n}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let src = self.values[a.index].data();
        let g = self.values[gamma.index].data();
        let b = self.values[beta.index].data();
        let mut data = vec![T::zero(); src.len()];
        let inv_n = T::one() / T::from_usize(n).unwrap();
        for (row, out_row) in src.chunks(n).zip(data.chunks_mut(n)) {
            let mut mean = T::zero();
            for &x in row {
                mean += x;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            var = var * inv_n;
            let inv_std = T::one() / (var + eps).sqrt();
            for (j, (&x, y)) in row.iter().zip(out_row.iter_mut()).enumerate() {
                *y = (x - mean) * inv_std * g[j] + b[j];
            }
        }
        let needs = self.needs_any(&[a.index, gamma.index, beta.index]);
        self.push(
            Tensor::from_vec(sa, data),
            OpRecord::LayerNorm { a: a.index, gamma: gamma.index, beta: beta.index, eps },
            needs,
            false,
        )
    }

    /// Inverted dropout with a fixed seed; `rate = 0` is the identity.
    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidArgument {
                op: "dropout",
                detail: format!("rate {rate} outside [0,1)"),
            });
        }
        let len = self.values[a.index].len();
        let mask = if rate == 0.0 {
            Tensor::filled(self.shape(a).to_vec(), T::one())
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
            Tensor::from_vec(
                self.shape(a).to_vec(),
                (0..len)
                    .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
                    .collect(),
            )
        };
        let out = Tensor::from_vec(
            self.shape(a).to_vec(),
            self.values[a.index].data().iter().zip(mask.data()).map(|(&x, &m)| x * m).collect(),
        );
        let needs = self.needs[a.index];
        self.push(out, OpRecord::Dropout { a: a.index, mask }, needs, false)
    }

    /// Row lookup: `table [V,d]`, `indices` -> `[len,d]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var, NnError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Self::mismatch("embedding_lookup", format!("table {st:?} not rank 2")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(NnError::InvalidArgument {
                op: "embedding_lookup",
                detail: format!("index {bad} out of range 0..{v}"),
            });
        }
        let src = self.values[table.index].data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let needs = self.needs[table.index];
        self.push(
            Tensor::from_vec(vec![indices.len(), d], data),
            OpRecord::Embedding { table: table.index, indices: indices.to_vec() },
            needs,
            false,
        )
    }

    /// Mean squared error over all elements; scalar output.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let n = T::from_usize(self.values[a.index].len()).unwrap();
        let mut acc = T::zero();
        for (&x, &y) in self.values[a.index].data().iter().zip(self.values[b.index].data()) {
            let d = x - y;
            acc += d * d;
        }
        let out = Tensor::scalar(acc / n);
        let needs = self.needs_any(&[a.index, b.index]);
        self.push(out, OpRecord::Mse { a: a.index, b: b.index }, needs, false)
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, a: Var) -> Result<Var, NnError> {
        let mut acc = T::zero();
        for &x in self.values[a.index].data() {
            acc += x;
        }
        let needs = self.needs[a.index];
        self.push(Tensor::scalar(acc), OpRecord::Sum { a: a.index }, needs, false)
    }

    /// Mean along one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(NnError::InvalidArgument {
                op: "mean_axis",
                detail: format!("axis {axis} out of range for {sa:?}"),
            });
        }
        let (outer, al, inner) = axis_split(&sa, axis);
        let inv = T::one() / T::from_usize(al).unwrap();
        let src = self.values[a.index].data();
        let mut shape = sa.clone();
        shape.remove(axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..al {
                let row = &src[(o * al + j) * inner..(o * al + j + 1) * inner];
                axpy(inv, row, &mut data[o * inner..(o + 1) * inner]);
            }
        }
        let needs = self.needs[a.index];
        self.push(Tensor::from_vec(shape, data), OpRecord::MeanAxis { a: a.index, axis }, needs, false)
    }

    // ---- batched row selection (sparse attention support) -------------------

    /// Gather rows along axis 1: `a [B,L,d]`, `idx` flat `[B*u]` -> `[B,u,d]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize], u: usize) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || idx.len() != sa[0] * u {
            return Err(Self::mismatch(
                "gather_rows",
                format!("input {sa:?}, {} indices, u={u}", idx.len()),
            ));
        }
        let (batch, l, d) = (sa[0], sa[1], sa[2]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= l) {
            return Err(NnError::InvalidArgument {
                op: "gather_rows",
                detail: format!("row index {bad} out of range 0..{l}"),
            });
        }
        let src = self.values[a.index].data();
        let mut data = Vec::with_capacity(batch * u * d);
        for bi in 0..batch {
            for &r in &idx[bi * u..(bi + 1) * u] {
                data.extend_from_slice(&src[(bi * l + r) * d..(bi * l + r + 1) * d]);
            }
        }
        let needs = self.needs[a.index];
        self.push(
            Tensor::from_vec(vec![batch, u, d], data),
            OpRecord::GatherRows { a: a.index, idx: idx.to_vec(), u },
            needs,
            false,
        )
    }

    /// Write `rows [B,u,d]` into `base [B,L,d]` at per-batch row indices
    /// (distinct within each batch element).
    pub fn scatter_rows(
        &mut self,
        base: Var,
        rows: Var,
        idx: &[usize],
        u: usize,
    ) -> Result<Var, NnError> {
        let sb = self.shape(base).to_vec();
        let sr = self.shape(rows).to_vec();
        let ok = sb.len() == 3
            && sr.len() == 3
            && sr[0] == sb[0]
            && sr[1] == u
            && sr[2] == sb[2]
            && idx.len() == sb[0] * u;
        if !ok {
            return Err(Self::mismatch(
                "scatter_rows",
                format!("base {sb:?}, rows {sr:?}, {} indices, u={u}", idx.len()),
            ));
        }
        let (batch, l, d) = (sb[0], sb[1], sb[2]);
        for bi in 0..batch {
            let chunk = &idx[bi * u..(bi + 1) * u];
            for (i, &r) in chunk.iter().enumerate() {
                if r >= l {
                    return Err(NnError::InvalidArgument {
                        op: "scatter_rows",
                        detail: format!("row index {r} out of range 0..{l}"),
                    });
                }
                if chunk[..i].contains(&r) {
                    return Err(NnError::InvalidArgument {
                        op: "scatter_rows",
                        detail: format!("duplicate row index {r} in batch {bi}"),
                    });
                }
            }
        }
        let mut out = self.values[base.index].clone();
        let rsrc = self.values[rows.index].data();
        for bi in 0..batch {
            for (i, &r) in idx[bi * u..(bi + 1) * u].iter().enumerate() {
                let src = &rsrc[(bi * u + i) * d..(bi * u + i + 1) * d];
                out.data_mut()[(bi * l + r) * d..(bi * l + r + 1) * d].copy_from_slice(src);
            }
        }
        let needs = self.needs_any(&[base.index, rows.index]);
        self.push(
            out,
            OpRecord::ScatterRows { base: base.index, rows: rows.index, idx: idx.to_vec(), u },
            needs,
            false,
        )
    }

    /// Repeat `a [B,d]` into `[B,len,d]`.
    pub fn broadcast_axis1(&mut self, a: Var, len: usize) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Self::mismatch("broadcast_axis1", format!("{sa:?} not rank 2")));
        }
        let (batch, d) = (sa[0], sa[1]);
        let src = self.values[a.index].data();
        let mut data = Vec::with_capacity(batch * len * d);
        for bi in 0..batch {
            for _ in 0..len {
                data.extend_from_slice(&src[bi * d..(bi + 1) * d]);
            }
        }
        let needs = self.needs[a.index];
        self.push(
            Tensor::from_vec(vec![batch, len, d], data),
            OpRecord::BroadcastAxis1 { a: a.index, len },
            needs,
            false,
        )
    }

    /// Max pool along axis 1 of `[B,L,d]` with kernel 3, stride 2, padding 1
    /// (the sequence-halving distilling pool).
    pub fn max_pool_axis1(&mut self, a: Var) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || sa[1] == 0 {
            return Err(Self::mismatch("max_pool_axis1", format!("{sa:?}")));
        }
        let (batch, l, d) = (sa[0], sa[1], sa[2]);
        let lo = (l + 2 - 3) / 2 + 1;
        let src = self.values[a.index].data();
        let mut data = vec![T::zero(); batch * lo * d];
        let mut argmax = vec![0usize; batch * lo * d];
        for bi in 0..batch {
            for t in 0..lo {
                for c in 0..d {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for w in 0..3usize {
                        let pos = (t * 2 + w) as isize - 1;
                        if pos < 0 || pos >= l as isize {
                            continue;
                        }
                        let flat = (bi * l + pos as usize) * d + c;
                        if src[flat] > best {
                            best = src[flat];
                            best_idx = flat;
                        }
                    }
                    data[(bi * lo + t) * d + c] = best;
                    argmax[(bi * lo + t) * d + c] = best_idx;
                }
            }
        }
        let needs = self.needs[a.index];
        self.push(
            Tensor::from_vec(vec![batch, lo, d], data),
            OpRecord::MaxPoolAxis1 { a: a.index, argmax },
            needs,
            false,
        )
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every `param` node ends up with a
    /// gradient (zeros when it does not participate in the loss).
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.backward_run {
            return Err(NnError::BackwardTwice);
        }
        self.backward_run = true;
        if self.values[loss.index].len() != 1 {
            return Err(NnError::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        self.grads[loss.index] =
            Some(Tensor::from_vec(self.shape(loss).to_vec(), vec![T::one()]));

        for idx in (0..=loss.index).rev() {
            if !self.needs[idx] || self.grads[idx].is_none() {
                continue;
            }
            self.backprop_node(idx);
        }

        for idx in 0..self.values.len() {
            if self.requires[idx] && self.grads[idx].is_none() {
                self.grads[idx] = Some(Tensor::zeros(self.values[idx].shape().to_vec()));
            }
        }
        if self.checked {
            for (idx, g) in self.grads.iter().enumerate() {
                if let Some(g) = g {
                    if !g.all_finite() {
                        return Err(NnError::NonFinite { op: self.ops[idx].name() });
                    }
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize) {
        // Ops only reference strictly earlier nodes, so the upstream gradient
        // and the input gradients never alias.
        let (lower, upper) = self.grads.split_at_mut(idx);
        let g = upper[0].as_ref().expect("grad present").clone();
        let values = &self.values;
        let needs = &self.needs;
        let mut add_to = |target: usize, f: &mut dyn FnMut(&mut Tensor<T>)| {
            if !needs[target] {
                return;
            }
            let slot = &mut lower[target];
            let t = slot.get_or_insert_with(|| Tensor::zeros(values[target].shape().to_vec()));
            f(t);
        };

        match &self.ops[idx] {
            OpRecord::Leaf => {}
            OpRecord::Matmul { a, b } => {
                let (m, k) = (values[*a].shape()[0], values[*a].shape()[1]);
                let n = values[*b].shape()[1];
                add_to(*a, &mut |ga| {
                    let mut tmp = vec![T::zero(); m * k];
                    matmul_nt(g.data(), values[*b].data(), &mut tmp, m, n, k);
                    axpy(T::one(), &tmp, ga.data_mut());
                });
                add_to(*b, &mut |gb| {
                    let mut tmp = vec![T::zero(); k * n];
                    matmul_tn(values[*a].data(), g.data(), &mut tmp, k, m, n);
                    axpy(T::one(), &tmp, gb.data_mut());
                });
            }
            OpRecord::Bmm { a, b, tb } => {
                let sa = values[*a].shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.shape()[2];
                if !tb {
                    // c = a·b ; da = g·bᵀ ; db = aᵀ·g
                    add_to(*a, &mut |ga| {
                        let mut tmp = vec![T::zero(); batch * m * k];
                        bmm(g.data(), values[*b].data(), &mut tmp, batch, m, n, k, false, true);
                        axpy(T::one(), &tmp, ga.data_mut());
                    });
                    add_to(*b, &mut |gb| {
                        let mut tmp = vec![T::zero(); batch * k * n];
                        bmm(values[*a].data(), g.data(), &mut tmp, batch, k, m, n, true, false);
                        axpy(T::one(), &tmp, gb.data_mut());
                    });
                } else {
                    // c = a·bᵀ (b stored [B,n,k]) ; da = g·b ; db = gᵀ·a
                    add_to(*a, &mut |ga| {
                        let mut tmp = vec![T::zero(); batch * m * k];
                        bmm(g.data(), values[*b].data(), &mut tmp, batch, m, n, k, false, false);
                        axpy(T::one(), &tmp, ga.data_mut());
                    });
                    add_to(*b, &mut |gb| {
                        let mut tmp = vec![T::zero(); batch * n * k];
                        bmm(g.data(), values[*a].data(), &mut tmp, batch, n, m, k, true, false);
                        axpy(T::one(), &tmp, gb.data_mut());
                    });
                }
            }
            OpRecord::MatmulLShared { a, b } => {
                let (m, k) = (values[*a].shape()[0], values[*a].shape()[1]);
                let sb = values[*b].shape();
                let (batch, n) = (sb[0], sb[2]);
                add_to(*a, &mut |ga| {
                    let mut tmp = vec![T::zero(); m * k];
                    for bi in 0..batch {
                        matmul_nt(
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &values[*b].data()[bi * k * n..(bi + 1) * k * n],
                            &mut tmp,
                            m,
                            n,
                            k,
                        );
                        axpy(T::one(), &tmp, ga.data_mut());
                    }
                });
                add_to(*b, &mut |gb| {
                    let mut tmp = vec![T::zero(); k * n];
                    for bi in 0..batch {
                        matmul_tn(
                            values[*a].data(),
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &mut tmp,
                            k,
                            m,
                            n,
                        );
                        axpy(T::one(), &tmp, &mut gb.data_mut()[bi * k * n..(bi + 1) * k * n]);
                    }
                });
            }
            OpRecord::Add { a, b } => {
                add_to(*a, &mut |ga| axpy(T::one(), g.data(), ga.data_mut()));
                let bl = values[*b].len().max(1);
                add_to(*b, &mut |gb| {
                    for chunk in g.data().chunks(bl) {
                        axpy(T::one(), chunk, gb.data_mut());
                    }
                });
            }
            OpRecord::Sub { a, b } => {
                add_to(*a, &mut |ga| axpy(T::one(), g.data(), ga.data_mut()));
                add_to(*b, &mut |gb| axpy(-T::one(), g.data(), gb.data_mut()));
            }
            OpRecord::Mul { a, b } => {
                let bl = values[*b].len().max(1);
                add_to(*a, &mut |ga| {
                    let bdata = values[*b].data();
                    for (i, (gv, &gu)) in ga.data_mut().iter_mut().zip(g.data()).enumerate() {
                        *gv += gu * bdata[i % bl];
                    }
                });
                add_to(*b, &mut |gb| {
                    let adata = values[*a].data();
                    for (i, &gu) in g.data().iter().enumerate() {
                        gb.data_mut()[i % bl] += gu * adata[i];
                    }
                });
            }
            OpRecord::Scale { a, c } => {
                let c = *c;
                add_to(*a, &mut |ga| axpy(c, g.data(), ga.data_mut()));
            }
            OpRecord::Concat { parts, axis } => {
                let shape = values[idx].shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let out_stride = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts.clone() {
                    let al = values[p].shape()[*axis];
                    let in_stride = al * inner;
                    add_to(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g.data()
                                [o * out_stride + offset..o * out_stride + offset + in_stride];
                            axpy(
                                T::one(),
                                src,
                                &mut gp.data_mut()[o * in_stride..(o + 1) * in_stride],
                            );
                        }
                    });
                    offset += al * inner;
                }
            }
            OpRecord::Slice { a, axis, start, end } => {
                let sa = values[*a].shape().to_vec();
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let in_stride = sa[*axis] * inner;
                let out_stride = (end - start) * inner;
                let (start, end) = (*start, *end);
                add_to(*a, &mut |ga| {
                    for o in 0..outer {
                        let src = &g.data()[o * out_stride..(o + 1) * out_stride];
                        axpy(
                            T::one(),
                            src,
                            &mut ga.data_mut()
                                [o * in_stride + start * inner..o * in_stride + end * inner],
                        );
                    }
                });
            }
            OpRecord::Permute { a, perm } => {
                let inv = invert_permutation(perm);
                let gt = permute_tensor(&g, &inv);
                add_to(*a, &mut |ga| axpy(T::one(), gt.data(), ga.data_mut()));
            }
            OpRecord::Reshape { a } => {
                add_to(*a, &mut |ga| axpy(T::one(), g.data(), ga.data_mut()));
            }
            OpRecord::Relu { a } => {
                add_to(*a, &mut |ga| {
                    let src = values[*a].data();
                    for ((gv, &gu), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(src) {
                        if x > T::zero() {
                            *gv += gu;
                        }
                    }
                });
            }
            OpRecord::Sigmoid { a } => {
                let out = values[idx].data();
                add_to(*a, &mut |ga| {
                    for ((gv, &gu), &s) in ga.data_mut().iter_mut().zip(g.data()).zip(out) {
                        *gv += gu * s * (T::one() - s);
                    }
                });
            }
            OpRecord::Tanh { a } => {
                let out = values[idx].data();
                add_to(*a, &mut |ga| {
                    for ((gv, &gu), &t) in ga.data_mut().iter_mut().zip(g.data()).zip(out) {
                        *gv += gu * (T::one() - t * t);
                    }
                });
            }
            OpRecord::Softmax { a, axis } => {
                let shape = values[idx].shape().to_vec();
                let (outer, al, inner) = axis_split(&shape, *axis);
                let s = values[idx].data();
                add_to(*a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * al + j) * inner + i;
                            let mut dot = T::zero();
                            for j in 0..al {
                                dot += g.data()[at(j)] * s[at(j)];
                            }
                            for j in 0..al {
                                ga.data_mut()[at(j)] += s[at(j)] * (g.data()[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            OpRecord::LayerNorm { a, gamma, beta, eps } => {
                let n = *values[*a].shape().last().unwrap();
                let inv_n = T::one() / T::from_usize(n).unwrap();
                let src = values[*a].data();
                let gam = values[*gamma].data();
                let eps = *eps;
                add_to(*a, &mut |ga| {
                    for (r, (row, grow)) in src.chunks(n).zip(g.data().chunks(n)).enumerate() {
                        let mut mean = T::zero();
                        for &x in row {
                            mean += x;
                        }
                        mean = mean * inv_n;
                        let mut var = T::zero();
                        for &x in row {
                            let d = x - mean;
                            var += d * d;
                        }
                        var = var * inv_n;
                        let inv_std = T::one() / (var + eps).sqrt();
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for (j, (&x, &gu)) in row.iter().zip(grow).enumerate() {
                            let xh = (x - mean) * inv_std;
                            let gg = gu * gam[j];
                            m1 += gg;
                            m2 += gg * xh;
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        let out_row = &mut ga.data_mut()[r * n..(r + 1) * n];
                        for (j, (&x, &gu)) in row.iter().zip(grow).enumerate() {
                            let xh = (x - mean) * inv_std;
                            out_row[j] += inv_std * (gu * gam[j] - m1 - xh * m2);
                        }
                    }
                });
                add_to(*gamma, &mut |gg| {
                    for (row, grow) in src.chunks(n).zip(g.data().chunks(n)) {
                        let mut mean = T::zero();
                        for &x in row {
                            mean += x;
                        }
                        mean = mean * inv_n;
                        let mut var = T::zero();
                        for &x in row {
                            let d = x - mean;
                            var += d * d;
                        }
                        var = var * inv_n;
                        let inv_std = T::one() / (var + eps).sqrt();
                        for (j, (&x, &gu)) in row.iter().zip(grow).enumerate() {
                            gg.data_mut()[j] += gu * (x - mean) * inv_std;
                        }
                    }
                });
                add_to(*beta, &mut |gb| {
                    for grow in g.data().chunks(n) {
                        axpy(T::one(), grow, gb.data_mut());
                    }
                });
            }
            OpRecord::Dropout { a, mask } => {
                let mask = mask.clone();
                add_to(*a, &mut |ga| {
                    for ((gv, &gu), &m) in ga.data_mut().iter_mut().zip(g.data()).zip(mask.data())
                    {
                        *gv += gu * m;
                    }
                });
            }
            OpRecord::Embedding { table, indices } => {
                let d = values[*table].shape()[1];
                let indices = indices.clone();
                add_to(*table, &mut |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        let src = &g.data()[r * d..(r + 1) * d];
                        axpy(T::one(), src, &mut gt.data_mut()[i * d..(i + 1) * d]);
                    }
                });
            }
            OpRecord::Mse { a, b } => {
                let n = T::from_usize(values[*a].len()).unwrap();
                let gu = g.item();
                let two = T::from_f64_lossy(2.0);
                let coef = gu * two / n;
                add_to(*a, &mut |ga| {
                    for ((gv, &x), &y) in
                        ga.data_mut().iter_mut().zip(values[*a].data()).zip(values[*b].data())
                    {
                        *gv += coef * (x - y);
                    }
                });
                add_to(*b, &mut |gb| {
                    for ((gv, &x), &y) in
                        gb.data_mut().iter_mut().zip(values[*a].data()).zip(values[*b].data())
                    {
                        *gv -= coef * (x - y);
                    }
                });
            }
            OpRecord::Sum { a } => {
                let gu = g.item();
                add_to(*a, &mut |ga| {
                    for gv in ga.data_mut() {
                        *gv += gu;
                    }
                });
            }
            OpRecord::MeanAxis { a, axis } => {
                let sa = values[*a].shape().to_vec();
                let (outer, al, inner) = axis_split(&sa, *axis);
                let inv = T::one() / T::from_usize(al).unwrap();
                add_to(*a, &mut |ga| {
                    for o in 0..outer {
                        let grow = &g.data()[o * inner..(o + 1) * inner];
                        for j in 0..al {
                            axpy(
                                inv,
                                grow,
                                &mut ga.data_mut()
                                    [(o * al + j) * inner..(o * al + j + 1) * inner],
                            );
                        }
                    }
                });
            }
            OpRecord::GatherRows { a, idx: rows, u } => {
                let sa = values[*a].shape().to_vec();
                let (l, d) = (sa[1], sa[2]);
                let batch = sa[0];
                let (rows, u) = (rows.clone(), *u);
                add_to(*a, &mut |ga| {
                    for bi in 0..batch {
                        for (i, &r) in rows[bi * u..(bi + 1) * u].iter().enumerate() {
                            let src = &g.data()[(bi * u + i) * d..(bi * u + i + 1) * d];
                            axpy(
                                T::one(),
                                src,
                                &mut ga.data_mut()[(bi * l + r) * d..(bi * l + r + 1) * d],
                            );
                        }
                    }
                });
            }
            OpRecord::ScatterRows { base, rows, idx: ridx, u } => {
                let sb = values[*base].shape().to_vec();
                let (batch, l, d) = (sb[0], sb[1], sb[2]);
                let (ridx, u) = (ridx.clone(), *u);
                add_to(*base, &mut |gb| {
                    for bi in 0..batch {
                        let replaced = &ridx[bi * u..(bi + 1) * u];
                        for r in 0..l {
                            if replaced.contains(&r) {
                                continue;
                            }
                            let src = &g.data()[(bi * l + r) * d..(bi * l + r + 1) * d];
                            axpy(
                                T::one(),
                                src,
                                &mut gb.data_mut()[(bi * l + r) * d..(bi * l + r + 1) * d],
                            );
                        }
                    }
                });
                add_to(*rows, &mut |gr| {
                    for bi in 0..batch {
                        for (i, &r) in ridx[bi * u..(bi + 1) * u].iter().enumerate() {
                            let src = &g.data()[(bi * l + r) * d..(bi * l + r + 1) * d];
                            axpy(
                                T::one(),
                                src,
                                &mut gr.data_mut()[(bi * u + i) * d..(bi * u + i + 1) * d],
                            );
                        }
                    }
                });
            }
            OpRecord::BroadcastAxis1 { a, len } => {
                let d = values[*a].shape()[1];
                let batch = values[*a].shape()[0];
                let len = *len;
                add_to(*a, &mut |ga| {
                    for bi in 0..batch {
                        for t in 0..len {
                            let src = &g.data()[(bi * len + t) * d..(bi * len + t + 1) * d];
                            axpy(T::one(), src, &mut ga.data_mut()[bi * d..(bi + 1) * d]);
                        }
                    }
                });
            }
            OpRecord::MaxPoolAxis1 { a, argmax } => {
                let argmax = argmax.clone();
                add_to(*a, &mut |ga| {
                    for (o, &src_flat) in argmax.iter().enumerate() {
                        ga.data_mut()[src_flat] += g.data()[o];
                    }
                });
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn is_suffix(suffix: &[usize], of: &[usize]) -> bool {
    suffix.len() <= of.len() && of[of.len() - suffix.len()..] == *suffix
}

fn is_permutation(perm: &[usize], rank: usize) -> bool {
    perm.len() == rank && (0..rank).all(|i| perm.contains(&i))
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_tensor<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let src_shape = t.shape();
    let rank = src_shape.len();
    let dst_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let mut data = vec![T::zero(); t.len()];
    let mut dst_idx = vec![0usize; rank];
    for slot in data.iter_mut() {
        let mut src_flat = 0;
        for (d, &di) in dst_idx.iter().enumerate() {
            src_flat += di * src_strides[perm[d]];
        }
        *slot = t.data()[src_flat];
        for d in (0..rank).rev() {
            dst_idx[d] += 1;
            if dst_idx[d] < dst_shape[d] {
                break;
            }
            dst_idx[d] = 0;
        }
    }
    Tensor::from_vec(dst_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::checked();
        let x = g.constant(t64(&[2], &[0.0, 0.0])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t64(&[2], &[-1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn matmul_hand_oracle() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.constant(t64(&[2, 1], &[1.0, 1.0])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn identity_loss_gradient_is_one() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.5)).unwrap();
        g.backward(x).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x ⊙ x) at x=(1,2) -> grad (2,4)
        let mut g = Graph::<f64>::new();
        let x = g.param(t64(&[2], &[1.0, 2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.0)).unwrap();
        g.backward(x).unwrap();
        assert!(matches!(g.backward(x), Err(NnError::BackwardTwice)));
    }

    #[test]
    fn non_participating_param_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t64(&[2], &[1.0, 2.0])).unwrap();
        let unused = g.param(t64(&[3], &[1.0, 1.0, 1.0])).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3])).unwrap();
        let b = g.constant(Tensor::zeros([2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn checked_mode_rejects_nan() {
        let mut g = Graph::<f64>::checked();
        let err = g.constant(Tensor::scalar(f64::NAN)).unwrap_err();
        assert!(matches!(err, NnError::NonFinite { .. }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g
            .constant(t64(&[3, 4], &[0.3, -1.2, 2.0, 0.1, 5.0, 5.0, 5.0, 5.0, -3.0, 0.0, 1.0, 2.0]))
            .unwrap();
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(4) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_moments_before_affine() {
        let mut g = Graph::<f64>::new();
        let n = 16;
        let x = g
            .constant(Tensor::from_fn([4, n], |i| ((i * 2654435761) % 1000) as f64 / 100.0 - 5.0))
            .unwrap();
        let gamma = g.constant(Tensor::filled([n], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros([n])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-8).unwrap();
        for row in g.value(y).data().chunks(n) {
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn permute_round_trip() {
        let t = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let p = permute_tensor(&t, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = permute_tensor(&p, &invert_permutation(&[2, 0, 1]));
        assert_eq!(back, t);
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn([2, 3], |i| i as f64)).unwrap();
        let b = g.constant(Tensor::from_fn([2, 2], |i| 10.0 + i as f64)).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        let sa = g.slice(c, 1, 0, 3).unwrap();
        let sb = g.slice(c, 1, 3, 5).unwrap();
        assert_eq!(g.value(sa).data(), g.value(a).data());
        assert_eq!(g.value(sb).data(), g.value(b).data());
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t64(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let y = g.dropout(x, 0.0, 7).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn dropout_deterministic_under_seed() {
        let run = || {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::filled([100], 1.0)).unwrap();
            let y = g.dropout(x, 0.4, 99).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn embedding_lookup_rows() {
        let mut g = Graph::<f64>::new();
        let table = g.param(Tensor::from_fn([4, 2], |i| i as f64)).unwrap();
        let out = g.embedding_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(out).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let loss = g.sum(out).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_axis_and_broadcast_axis1() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 2, 3], |i| i as f64)).unwrap();
        let m = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.value(m).data(), &[1.5, 2.5, 3.5]);
        let b = g.broadcast_axis1(m, 2).unwrap();
        assert_eq!(g.value(b).data(), &[1.5, 2.5, 3.5, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn gather_scatter_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([2, 3, 2], |i| i as f64)).unwrap();
        let gathered = g.gather_rows(x, &[2, 0, 1, 2], 2).unwrap();
        assert_eq!(g.shape(gathered), &[2, 2, 2]);
        assert_eq!(g.value(gathered).data()[..4], [4.0, 5.0, 0.0, 1.0]);
        let back = g.scatter_rows(x, gathered, &[2, 0, 1, 2], 2).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn scatter_rejects_duplicate_indices() {
        let mut g = Graph::<f64>::new();
        let base = g.constant(Tensor::zeros([1, 3, 2])).unwrap();
        let rows = g.constant(Tensor::zeros([1, 2, 2])).unwrap();
        assert!(g.scatter_rows(base, rows, &[1, 1], 2).is_err());
    }

    #[test]
    fn max_pool_halves_sequence() {
        let mut g = Graph::<f64>::new();
        let x = g
            .constant(Tensor::from_vec(vec![1, 5, 1], vec![1.0, 5.0, 2.0, 0.0, 3.0]))
            .unwrap();
        let y = g.max_pool_axis1(x).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 1]);
        // windows (pad,1,5) (5,2,0) (0,3,pad) -> 5, 5, 3
        assert_eq!(g.value(y).data(), &[5.0, 5.0, 3.0]);
    }
}
