//! Dense row-major f64 tensors carrying an optional reverse-mode
//! autodiff graph.
//!
//! Every operation that consumes a tensor with `requires_grad` records a
//! node holding the operation kind and the parent handles; [`Tensor::backward`]
//! replays the graph in reverse topological order and accumulates gradients
//! into the grad buffers of all reachable tracked tensors. The graph is
//! consumed by the backward pass; running it twice on the same loss is an
//! error.
//!
//! Values are immutable after construction. Only grad buffers mutate, behind
//! a lock, so tensors can move freely between threads and distinct graphs can
//! run backward concurrently.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use spin::Mutex;

use crate::chunk::ChunkSpec;
use crate::math;
use crate::rng::SeededRng;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Errors raised by tensor construction, shape checks, and the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Data length does not match the product of the extents.
    DataLength { expected: usize, got: usize },
    /// An extent of zero was requested.
    ZeroExtent,
    /// Elementwise operands that neither match nor broadcast.
    BroadcastIncompatible(Vec<usize>, Vec<usize>),
    /// Ranks differ where equal ranks are required.
    RankMismatch { expected: usize, got: usize },
    /// Matmul inner extents differ.
    InnerExtent { lhs: usize, rhs: usize },
    /// Reshape target does not preserve the element count.
    ElementCount { expected: usize, got: usize },
    /// Axis permutation is not a permutation of 0..rank.
    InvalidPermutation(Vec<usize>),
    /// Axis index out of range.
    AxisOutOfRange { axis: usize, rank: usize },
    /// Slice range falls outside the axis extent.
    SliceOutOfRange { axis: usize, start: usize, len: usize, extent: usize },
    /// Concatenation over an empty list.
    EmptyConcat,
    /// A scalar argument outside its documented range.
    InvalidArgument(&'static str),
    /// Input shorter than the convolution kernel.
    InputTooShort { input: usize, kernel: usize },
    /// A shape did not match what the operation requires.
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    /// `backward` called on a tensor with more than one element.
    NonScalarLoss { numel: usize },
    /// `backward` called twice on the same graph.
    GraphConsumed,
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::ZeroExtent => write!(f, "tensor extents must be at least 1"),
            TensorError::BroadcastIncompatible(a, b) => {
                write!(f, "shapes {a:?} and {b:?} are not broadcast-compatible")
            }
            TensorError::RankMismatch { expected, got } => {
                write!(f, "expected rank {expected}, got {got}")
            }
            TensorError::InnerExtent { lhs, rhs } => {
                write!(f, "matmul inner extents differ: {lhs} vs {rhs}")
            }
            TensorError::ElementCount { expected, got } => {
                write!(f, "reshape changes element count: {expected} -> {got}")
            }
            TensorError::InvalidPermutation(p) => write!(f, "invalid axis permutation {p:?}"),
            TensorError::AxisOutOfRange { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            TensorError::SliceOutOfRange { axis, start, len, extent } => {
                write!(f, "slice {start}..{} exceeds extent {extent} on axis {axis}", start + len)
            }
            TensorError::EmptyConcat => write!(f, "concat needs at least one operand"),
            TensorError::InvalidArgument(msg) => write!(f, "{msg}"),
            TensorError::InputTooShort { input, kernel } => {
                write!(f, "input length {input} shorter than kernel length {kernel}")
            }
            TensorError::ShapeMismatch { expected, got } => {
                write!(f, "expected shape {expected:?}, got {got:?}")
            }
            TensorError::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            TensorError::GraphConsumed => {
                write!(f, "graph already consumed by a previous backward pass")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TensorError {}

pub type TensorResult<T> = Result<T, TensorError>;

/// Operation recorded for the backward pass. Parent order is fixed per
/// variant and relied on by the gradient rules in `backprop`.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(#[allow(dead_code)] f64),
    /// parents: [a (m x k), b (k x n)]
    Matmul { m: usize, k: usize, n: usize },
    Reshape,
    Permute(Vec<usize>),
    Slice { axis: usize, start: usize, len: usize },
    Concat { axis: usize },
    SumAll,
    Sigmoid,
    Tanh,
    Gelu,
    Ln,
    /// parents: [x (C_in x T), kernel (C_out x C_in x L)] + optional bias (C_out)
    Conv1d { stride: usize },
    /// parents: [f (C_in x K), kernel (C_in x C_out x L)]
    ConvTranspose1d { stride: usize },
    /// parents: [x (... x D), gain (D), shift (D)]; normalizes the trailing axis
    LayerNorm { eps: f64 },
    /// parents: [x (D x K)]
    Segment(ChunkSpec),
    /// parents: [u (D x I x J)]
    Merge(ChunkSpec),
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Mutex<Option<Node>>,
    consumed: AtomicBool,
}

/// Shared handle to an immutable tensor value. Clones are cheap and all see
/// the same grad buffer after a backward pass.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

fn checked_shape(shape: &[usize]) -> TensorResult<usize> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(TensorError::ZeroExtent);
    }
    Ok(shape.iter().product())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, node: Option<Node>) -> Tensor {
        Tensor {
            inner: Arc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node: Mutex::new(node),
                consumed: AtomicBool::new(false),
            }),
        }
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op, parents: Vec<Tensor>) -> Tensor {
        let tracked = parents.iter().any(|p| p.requires_grad());
        let node = tracked.then_some(Node { op, parents });
        Tensor::build(shape, Arc::new(data), tracked, node)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = checked_shape(shape).expect("valid shape");
        Tensor::build(shape.to_vec(), Arc::new(vec![0.0; n]), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = checked_shape(shape).expect("valid shape");
        Tensor::build(shape.to_vec(), Arc::new(vec![value; n]), false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![1], Arc::new(vec![value]), false, None)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> TensorResult<Tensor> {
        let n = checked_shape(shape)?;
        if data.len() != n {
            return Err(TensorError::DataLength { expected: n, got: data.len() });
        }
        Ok(Tensor::build(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Uniform values in [lo, hi) drawn from a fresh stream, so the result is
    /// a function of (seed, shape) alone.
    pub fn seeded_uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        Tensor::uniform(shape, lo, hi, &mut rng)
    }

    /// Uniform values in [lo, hi) drawn from the given stream.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
        let n = checked_shape(shape).expect("valid shape");
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::build(shape.to_vec(), Arc::new(data), false, None)
    }

    /// Marks a leaf as a gradient target.
    pub fn tracked(self) -> Tensor {
        if self.inner.node.lock().is_some() {
            // Non-leaf tensors are already tracked through their parents.
            return self;
        }
        Tensor::build(self.inner.shape.clone(), self.inner.data.clone(), true, None)
    }

    /// New untracked leaf sharing this tensor's storage.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.lock() = None;
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub(crate) fn take_node(&self) -> Option<Node> {
        self.inner.node.lock().take()
    }

    pub(crate) fn mark_consumed(&self) -> bool {
        self.inner.consumed.swap(true, Ordering::SeqCst)
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut cell = self.inner.grad.lock();
        match cell.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *cell = Some(delta.to_vec()),
        }
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        binary_op(self, rhs, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        binary_op(self, rhs, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        binary_op(self, rhs, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        binary_op(self, rhs, Op::Div, |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(c), vec![self.clone()])
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::AddScalar(c), vec![self.clone()])
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        if self.shape().len() != 2 {
            return Err(TensorError::RankMismatch { expected: 2, got: self.shape().len() });
        }
        if rhs.shape().len() != 2 {
            return Err(TensorError::RankMismatch { expected: 2, got: rhs.shape().len() });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        if k != k2 {
            return Err(TensorError::InnerExtent { lhs: k, rhs: k2 });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.data(), rhs.data(), m, k, n, &mut out);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::Matmul { m, k, n },
            vec![self.clone(), rhs.clone()],
        ))
    }

    // ── shape ───────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Tensor> {
        let n = checked_shape(shape)?;
        if n != self.numel() {
            return Err(TensorError::ElementCount { expected: self.numel(), got: n });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape,
            vec![self.clone()],
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> TensorResult<Tensor> {
        let rank = self.shape().len();
        if !is_permutation(perm, rank) {
            return Err(TensorError::InvalidPermutation(perm.to_vec()));
        }
        let (shape, data) = permute_data(self.shape(), self.data(), perm);
        Ok(Tensor::from_op(shape, data, Op::Permute(perm.to_vec()), vec![self.clone()]))
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> TensorResult<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let extent = self.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(TensorError::SliceOutOfRange { axis, start, len, extent });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(shape, out, Op::Slice { axis, start, len }, vec![self.clone()]))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> TensorResult<Tensor> {
        let first = parts.first().ok_or(TensorError::EmptyConcat)?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != rank {
                return Err(TensorError::RankMismatch { expected: rank, got: p.shape().len() });
            }
            for (ax, (&e, &f)) in first.shape().iter().zip(p.shape()).enumerate() {
                if ax != axis && e != f {
                    return Err(TensorError::ShapeMismatch {
                        expected: first.shape().to_vec(),
                        got: p.shape().to_vec(),
                    });
                }
            }
            axis_total += p.shape()[axis];
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = axis_total;
        Ok(Tensor::from_op(shape, out, Op::Concat { axis }, parts.to_vec()))
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], Op::SumAll, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    // ── activations ─────────────────────────────────────────────────

    /// Numerically stable logistic function, clamped so outputs stay
    /// strictly inside (0, 1) even where exp underflows.
    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|&x| stable_sigmoid(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Sigmoid, vec![self.clone()])
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data().iter().map(|&x| math::tanh(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Tanh, vec![self.clone()])
    }

    /// Gaussian error linear unit in its exact CDF form, x * Phi(x).
    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x * math::norm_cdf(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Gelu, vec![self.clone()])
    }

    /// Natural logarithm.
    pub fn ln(&self) -> Tensor {
        let data = self.data().iter().map(|&x| math::ln(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Ln, vec![self.clone()])
    }

    // ── structured ops ──────────────────────────────────────────────

    /// 1-D convolution. `self` is C_in x T, `kernel` is C_out x C_in x L.
    pub fn conv1d(&self, kernel: &Tensor, bias: Option<&Tensor>, stride: usize) -> TensorResult<Tensor> {
        assert!(stride >= 1, "stride must be at least 1");
        if self.shape().len() != 2 {
            return Err(TensorError::RankMismatch { expected: 2, got: self.shape().len() });
        }
        if kernel.shape().len() != 3 {
            return Err(TensorError::RankMismatch { expected: 3, got: kernel.shape().len() });
        }
        let (c_in, t) = (self.shape()[0], self.shape()[1]);
        let (c_out, kc_in, l) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        if kc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                expected: vec![c_out, c_in, l],
                got: kernel.shape().to_vec(),
            });
        }
        if t < l {
            return Err(TensorError::InputTooShort { input: t, kernel: l });
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(TensorError::ShapeMismatch { expected: vec![c_out], got: b.shape().to_vec() });
            }
        }
        let k_frames = (t - l) / stride + 1;
        let x = self.data();
        let w = kernel.data();
        let mut out = vec![0.0; c_out * k_frames];
        for co in 0..c_out {
            let row = &mut out[co * k_frames..(co + 1) * k_frames];
            if let Some(b) = bias {
                row.fill(b.data()[co]);
            }
            for ci in 0..c_in {
                let wrow = &w[(co * c_in + ci) * l..(co * c_in + ci + 1) * l];
                let xrow = &x[ci * t..(ci + 1) * t];
                for (k, r) in row.iter_mut().enumerate() {
                    let base = k * stride;
                    let mut acc = 0.0;
                    for (dl, &wv) in wrow.iter().enumerate() {
                        acc += wv * xrow[base + dl];
                    }
                    *r += acc;
                }
            }
        }
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(vec![c_out, k_frames], out, Op::Conv1d { stride }, parents))
    }

    /// 1-D transposed convolution (overlap-add synthesis). `self` is
    /// C_in x K, `kernel` is C_in x C_out x L; output is C_out x ((K-1)*stride + L).
    pub fn conv_transpose1d(&self, kernel: &Tensor, stride: usize) -> TensorResult<Tensor> {
        assert!(stride >= 1, "stride must be at least 1");
        if self.shape().len() != 2 {
            return Err(TensorError::RankMismatch { expected: 2, got: self.shape().len() });
        }
        if kernel.shape().len() != 3 {
            return Err(TensorError::RankMismatch { expected: 3, got: kernel.shape().len() });
        }
        let (c_in, k_frames) = (self.shape()[0], self.shape()[1]);
        let (kc_in, c_out, l) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        if kc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                expected: vec![c_in, c_out, l],
                got: kernel.shape().to_vec(),
            });
        }
        let t_out = (k_frames - 1) * stride + l;
        let f = self.data();
        let w = kernel.data();
        let mut out = vec![0.0; c_out * t_out];
        for ci in 0..c_in {
            let frow = &f[ci * k_frames..(ci + 1) * k_frames];
            for co in 0..c_out {
                let wrow = &w[(ci * c_out + co) * l..(ci * c_out + co + 1) * l];
                let orow = &mut out[co * t_out..(co + 1) * t_out];
                for (k, &fv) in frow.iter().enumerate() {
                    let base = k * stride;
                    for (dl, &wv) in wrow.iter().enumerate() {
                        orow[base + dl] += fv * wv;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c_out, t_out],
            out,
            Op::ConvTranspose1d { stride },
            vec![self.clone(), kernel.clone()],
        ))
    }

    /// Layer normalization over the trailing axis with learned gain and shift.
    /// Variance uses the biased 1/D estimator.
    pub fn layer_norm(&self, gain: &Tensor, shift: &Tensor, eps: f64) -> TensorResult<Tensor> {
        let d = *self.shape().last().expect("non-empty shape");
        if gain.shape() != [d] {
            return Err(TensorError::ShapeMismatch { expected: vec![d], got: gain.shape().to_vec() });
        }
        if shift.shape() != [d] {
            return Err(TensorError::ShapeMismatch { expected: vec![d], got: shift.shape().to_vec() });
        }
        let positions = self.numel() / d;
        let x = self.data();
        let g = gain.data();
        let b = shift.data();
        let mut out = vec![0.0; self.numel()];
        for p in 0..positions {
            let row = &x[p * d..(p + 1) * d];
            let (mu, var) = mean_var(row);
            let inv = 1.0 / math::sqrt(var + eps);
            let orow = &mut out[p * d..(p + 1) * d];
            for i in 0..d {
                orow[i] = g[i] * (row[i] - mu) * inv + b[i];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LayerNorm { eps },
            vec![self.clone(), gain.clone(), shift.clone()],
        ))
    }

    /// Splits a D x K frame sequence into overlapped chunks D x I x J
    /// according to `spec`. Padded positions are zero.
    pub(crate) fn segment_chunks(&self, spec: ChunkSpec) -> TensorResult<Tensor> {
        if self.shape().len() != 2 || self.shape()[1] != spec.frames {
            return Err(TensorError::ShapeMismatch {
                expected: vec![self.shape()[0], spec.frames],
                got: self.shape().to_vec(),
            });
        }
        let d = self.shape()[0];
        let (i_len, j_len) = (spec.chunk, spec.positions());
        let x = self.data();
        let mut out = vec![0.0; d * i_len * j_len];
        for dc in 0..d {
            let xrow = &x[dc * spec.frames..(dc + 1) * spec.frames];
            for i in 0..i_len {
                for j in 0..j_len {
                    let padded = j * spec.hop + i;
                    if let Some(k) = spec.unpadded_index(padded) {
                        out[(dc * i_len + i) * j_len + j] = xrow[k];
                    }
                }
            }
        }
        Ok(Tensor::from_op(vec![d, i_len, j_len], out, Op::Segment(spec), vec![self.clone()]))
    }

    /// Inverse of [`Tensor::segment_chunks`]: overlap-adds chunks back onto
    /// the frame axis and divides by per-position coverage.
    pub(crate) fn merge_chunks(&self, spec: ChunkSpec) -> TensorResult<Tensor> {
        let (i_len, j_len) = (spec.chunk, spec.positions());
        if self.shape().len() != 3 || self.shape()[1] != i_len || self.shape()[2] != j_len {
            return Err(TensorError::ShapeMismatch {
                expected: vec![self.shape()[0], i_len, j_len],
                got: self.shape().to_vec(),
            });
        }
        let d = self.shape()[0];
        let cov = spec.coverage();
        let u = self.data();
        let mut out = vec![0.0; d * spec.frames];
        for dc in 0..d {
            let orow = &mut out[dc * spec.frames..(dc + 1) * spec.frames];
            for i in 0..i_len {
                for j in 0..j_len {
                    let padded = j * spec.hop + i;
                    if let Some(k) = spec.unpadded_index(padded) {
                        orow[k] += u[(dc * i_len + i) * j_len + j];
                    }
                }
            }
            for (k, o) in orow.iter_mut().enumerate() {
                *o /= cov[spec.pad_front + k] as f64;
            }
        }
        Ok(Tensor::from_op(vec![d, spec.frames], out, Op::Merge(spec), vec![self.clone()]))
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    };
    // Keep outputs strictly inside (0, 1); the closed forms round to the
    // endpoints for |x| beyond ~37.
    y.max(f64::MIN_POSITIVE).min(1.0 - 0.5 * f64::EPSILON)
}

pub(crate) fn mean_var(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, var)
}

fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Reorders axes: output axis p takes input axis perm[p].
pub(crate) fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out_strides = vec![1usize; rank];
    for p in (0..rank.saturating_sub(1)).rev() {
        out_strides[p] = out_strides[p + 1] * out_shape[p + 1];
    }
    // mapped[a] = stride of input axis a in the output layout
    let mut mapped = vec![0usize; rank];
    for (p, &a) in perm.iter().enumerate() {
        mapped[a] = out_strides[p];
    }
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; rank];
    let mut oflat = 0usize;
    for &v in data {
        out[oflat] = v;
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            oflat += mapped[ax];
            if coords[ax] < shape[ax] {
                break;
            }
            coords[ax] = 0;
            oflat -= shape[ax] * mapped[ax];
        }
    }
    (out_shape, out)
}

// ── broadcasting ────────────────────────────────────────────────────

/// Same-rank broadcast: an axis of extent 1 stretches to the other operand's
/// extent.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> TensorResult<Vec<usize>> {
    if a.len() != b.len() {
        return Err(TensorError::BroadcastIncompatible(a.to_vec(), b.to_vec()));
    }
    a.iter()
        .zip(b)
        .map(|(&ea, &eb)| {
            if ea == eb || eb == 1 {
                Ok(ea.max(eb))
            } else if ea == 1 {
                Ok(eb)
            } else {
                Err(TensorError::BroadcastIncompatible(a.to_vec(), b.to_vec()))
            }
        })
        .collect()
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut s = vec![1usize; rank];
    for p in (0..rank.saturating_sub(1)).rev() {
        s[p] = s[p + 1] * shape[p + 1];
    }
    s
}

/// Strides for reading `shape` while iterating over `out_shape` row-major;
/// broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let native = row_major_strides(shape);
    shape
        .iter()
        .zip(out_shape)
        .zip(native)
        .map(|((&e, &o), s)| if e == 1 && o != 1 { 0 } else { s })
        .collect()
}

fn binary_op(
    a: &Tensor,
    b: &Tensor,
    op: Op,
    f: impl Fn(f64, f64) -> f64,
) -> TensorResult<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_op(a.shape().to_vec(), data, op, vec![a.clone(), b.clone()]));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let data = broadcast_zip(a.data(), a.shape(), b.data(), b.shape(), &out_shape, f);
    Ok(Tensor::from_op(out_shape, data, op, vec![a.clone(), b.clone()]))
}

pub(crate) fn broadcast_zip(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let rank = out_shape.len();
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a[ia], b[ib]));
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
            ia -= out_shape[ax] * sa[ax];
            ib -= out_shape[ax] * sb[ax];
        }
    }
    out
}

/// Sums `grad` (shaped `grad_shape`) down to `target_shape` over the axes
/// that were stretched during broadcasting.
pub(crate) fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let rank = grad_shape.len();
    let st = broadcast_strides(target_shape, grad_shape);
    let n_t: usize = target_shape.iter().product();
    let mut out = vec![0.0; n_t];
    let mut coords = vec![0usize; rank];
    let mut it = 0usize;
    for &g in grad {
        out[it] += g;
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            it += st[ax];
            if coords[ax] < grad_shape[ax] {
                break;
            }
            coords[ax] = 0;
            it -= grad_shape[ax] * st[ax];
        }
    }
    out
}

// ── matmul kernels ──────────────────────────────────────────────────

/// C += A * B with A: m x k, B: k x n. C must be zeroed by the caller.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A * B^T with A: m x k, B: n x k.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// C += A^T * B with A: k x m, B: k x n.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}
