//! Differentiable layer vocabulary: 1-D convolutions, pointwise feature
//! maps, linear, layer normalization, bidirectional LSTM, LayerScale, and
//! stochastic-depth drop-path.
//!
//! Layers are pure functions of (input, parameters, rng state); parameters
//! are plain tracked tensors owned by the layer structs.

use alloc::vec::Vec;

use crate::math;
use crate::rng::SeededRng;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Default epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Train/eval switch for layers with stochastic behavior.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform(-k, k) with k = 1/sqrt(fan_in), the init used for every kernel
/// and weight matrix in the model.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let k = 1.0 / math::sqrt(fan_in as f64);
    Tensor::uniform(shape, -k, k, rng)
}

// ── convolutions ────────────────────────────────────────────────────

/// Strided 1-D convolution over a C_in x T signal.
#[derive(Clone)]
pub struct Conv1d {
    /// C_out x C_in x L
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
}

impl Conv1d {
    pub fn init(c_out: usize, c_in: usize, len: usize, stride: usize, bias: bool, rng: &mut SeededRng) -> Conv1d {
        let fan_in = c_in * len;
        Conv1d {
            kernel: uniform_init(&[c_out, c_in, len], fan_in, rng).tracked(),
            bias: bias.then(|| uniform_init(&[c_out], fan_in, rng).tracked()),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        x.conv1d(&self.kernel, self.bias.as_ref(), self.stride)
    }
}

/// Strided 1-D transposed convolution (overlap-add synthesis).
#[derive(Clone)]
pub struct ConvTranspose1d {
    /// C_in x C_out x L
    pub kernel: Tensor,
    pub stride: usize,
}

impl ConvTranspose1d {
    pub fn init(c_in: usize, c_out: usize, len: usize, stride: usize, rng: &mut SeededRng) -> ConvTranspose1d {
        ConvTranspose1d {
            kernel: uniform_init(&[c_in, c_out, len], c_in * len, rng).tracked(),
            stride,
        }
    }

    pub fn forward(&self, f: &Tensor) -> TensorResult<Tensor> {
        f.conv_transpose1d(&self.kernel, self.stride)
    }
}

/// 1x1 feature map over a feature-major tensor: D_in x ... -> D_out x ...,
/// applied independently at every trailing position.
#[derive(Clone)]
pub struct PointwiseConv {
    /// D_out x D_in
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

impl PointwiseConv {
    pub fn init(d_out: usize, d_in: usize, bias: bool, rng: &mut SeededRng) -> PointwiseConv {
        PointwiseConv {
            kernel: uniform_init(&[d_out, d_in], d_in, rng).tracked(),
            bias: bias.then(|| uniform_init(&[d_out], d_in, rng).tracked()),
        }
    }

    pub fn forward(&self, u: &Tensor) -> TensorResult<Tensor> {
        let d_in = self.kernel.shape()[1];
        let d_out = self.kernel.shape()[0];
        if u.shape()[0] != d_in {
            return Err(TensorError::ShapeMismatch {
                expected: alloc::vec![d_in],
                got: alloc::vec![u.shape()[0]],
            });
        }
        let positions = u.numel() / d_in;
        let flat = u.reshape(&[d_in, positions])?;
        let mut out = self.kernel.matmul(&flat)?;
        if let Some(b) = &self.bias {
            out = out.add(&b.reshape(&[d_out, 1])?)?;
        }
        let mut shape = u.shape().to_vec();
        shape[0] = d_out;
        out.reshape(&shape)
    }
}

// ── linear ──────────────────────────────────────────────────────────

/// Affine map on the trailing axis: ... x D_in -> ... x D_out.
#[derive(Clone)]
pub struct Linear {
    /// D_out x D_in
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn init(d_out: usize, d_in: usize, bias: bool, rng: &mut SeededRng) -> Linear {
        Linear {
            weight: uniform_init(&[d_out, d_in], d_in, rng).tracked(),
            bias: bias.then(|| uniform_init(&[d_out], d_in, rng).tracked()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        let d_in = self.weight.shape()[1];
        let d_out = self.weight.shape()[0];
        let last = *x.shape().last().expect("non-empty shape");
        if last != d_in {
            return Err(TensorError::ShapeMismatch {
                expected: alloc::vec![d_in],
                got: alloc::vec![last],
            });
        }
        let positions = x.numel() / d_in;
        let flat = x.reshape(&[positions, d_in])?;
        let mut out = flat.matmul(&self.weight.permute(&[1, 0])?)?;
        if let Some(b) = &self.bias {
            out = out.add(&b.reshape(&[1, d_out])?)?;
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        out.reshape(&shape)
    }
}

// ── normalization ───────────────────────────────────────────────────

/// Layer normalization over the trailing axis with learned gain and shift.
#[derive(Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(d: usize) -> LayerNorm {
        LayerNorm {
            gain: Tensor::full(&[d], 1.0).tracked(),
            shift: Tensor::zeros(&[d]).tracked(),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        x.layer_norm(&self.gain, &self.shift, self.eps)
    }

    /// Normalizes the leading (feature) axis of a feature-major tensor by
    /// rotating it to the trailing position and back.
    pub fn forward_feature_major(&self, x: &Tensor) -> TensorResult<Tensor> {
        match x.shape().len() {
            2 => {
                let y = self.forward(&x.permute(&[1, 0])?)?;
                y.permute(&[1, 0])
            }
            3 => {
                let y = self.forward(&x.permute(&[1, 2, 0])?)?;
                y.permute(&[2, 0, 1])
            }
            r => Err(TensorError::RankMismatch { expected: 3, got: r }),
        }
    }
}

// ── recurrent ───────────────────────────────────────────────────────

/// One direction of an LSTM: packed gate weights in i, f, g, o order.
#[derive(Clone)]
pub struct LstmDirection {
    /// 4H x D_in
    pub w_ih: Tensor,
    /// 4H x H
    pub w_hh: Tensor,
    /// 4H
    pub bias: Tensor,
}

impl LstmDirection {
    fn init(d_in: usize, hidden: usize, rng: &mut SeededRng) -> LstmDirection {
        let k = 1.0 / math::sqrt(hidden as f64);
        let w_ih = Tensor::uniform(&[4 * hidden, d_in], -k, k, rng).tracked();
        let w_hh = Tensor::uniform(&[4 * hidden, hidden], -k, k, rng).tracked();
        // Forget-gate bias starts at 1 so early cells retain state.
        let mut b: Vec<f64> = (0..4 * hidden).map(|_| rng.uniform(-k, k)).collect();
        for v in &mut b[hidden..2 * hidden] {
            *v = 1.0;
        }
        let bias = Tensor::from_vec(&[4 * hidden], b).expect("bias shape").tracked();
        LstmDirection { w_ih, w_hh, bias }
    }
}

/// Bidirectional LSTM over batched sequences. Initial hidden and cell states
/// are zero; the two direction outputs are concatenated per step.
#[derive(Clone)]
pub struct BiLstm {
    pub forward_dir: LstmDirection,
    pub backward_dir: LstmDirection,
    pub hidden: usize,
}

impl BiLstm {
    pub fn init(d_in: usize, hidden: usize, rng: &mut SeededRng) -> BiLstm {
        BiLstm {
            forward_dir: LstmDirection::init(d_in, hidden, rng),
            backward_dir: LstmDirection::init(d_in, hidden, rng),
            hidden,
        }
    }

    /// Single sequence D x T -> 2H x T.
    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        let (d, t) = (x.shape()[0], x.shape()[1]);
        let batched = self.forward_batched(&x.reshape(&[d, t, 1])?)?;
        batched.reshape(&[2 * self.hidden, t])
    }

    /// Batch of sequences D x T x B -> 2H x T x B. The recurrence runs once
    /// per step with the batch handled by a single matmul.
    pub fn forward_batched(&self, x: &Tensor) -> TensorResult<Tensor> {
        if x.shape().len() != 3 {
            return Err(TensorError::RankMismatch { expected: 3, got: x.shape().len() });
        }
        let (d, t, b) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        // Step-major layout so each step is a contiguous slice.
        let steps = x.permute(&[1, 2, 0])?.reshape(&[t * b, d])?;
        let fwd = self.run_direction(&self.forward_dir, &steps, t, b, false)?;
        let bwd = self.run_direction(&self.backward_dir, &steps, t, b, true)?;
        let both = Tensor::concat(&[fwd, bwd], 2)?;
        both.permute(&[2, 0, 1])
    }

    fn run_direction(
        &self,
        dir: &LstmDirection,
        steps: &Tensor,
        t: usize,
        b: usize,
        reversed: bool,
    ) -> TensorResult<Tensor> {
        let h = self.hidden;
        // All input projections in one matmul, then per-step slices.
        let gates_in = steps
            .matmul(&dir.w_ih.permute(&[1, 0])?)?
            .add(&dir.bias.reshape(&[1, 4 * h])?)?
            .reshape(&[t, b, 4 * h])?;
        let w_hh_t = dir.w_hh.permute(&[1, 0])?;
        let mut hidden_state = Tensor::zeros(&[b, h]);
        let mut cell = Tensor::zeros(&[b, h]);
        let mut outputs: Vec<Option<Tensor>> = alloc::vec![None; t];
        let order: Vec<usize> = if reversed { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let gx = gates_in.slice_axis(0, step, 1)?.reshape(&[b, 4 * h])?;
            let gates = gx.add(&hidden_state.matmul(&w_hh_t)?)?;
            let input_gate = gates.slice_axis(1, 0, h)?.sigmoid();
            let forget_gate = gates.slice_axis(1, h, h)?.sigmoid();
            let candidate = gates.slice_axis(1, 2 * h, h)?.tanh();
            let output_gate = gates.slice_axis(1, 3 * h, h)?.sigmoid();
            cell = forget_gate.mul(&cell)?.add(&input_gate.mul(&candidate)?)?;
            hidden_state = output_gate.mul(&cell.tanh())?;
            outputs[step] = Some(hidden_state.reshape(&[1, b, h])?);
        }
        let ordered: Vec<Tensor> = outputs.into_iter().map(|o| o.expect("all steps filled")).collect();
        Tensor::concat(&ordered, 0)
    }
}

// ── residual-branch scaling ─────────────────────────────────────────

/// Learned per-feature gain on a residual branch.
#[derive(Clone)]
pub struct LayerScale {
    /// D
    pub gamma: Tensor,
}

impl LayerScale {
    pub fn init(d: usize, initial: f64) -> LayerScale {
        LayerScale { gamma: Tensor::full(&[d], initial).tracked() }
    }

    /// h is feature-major: D x ...
    pub fn forward(&self, h: &Tensor) -> TensorResult<Tensor> {
        let d = self.gamma.shape()[0];
        let mut shape = alloc::vec![1usize; h.shape().len()];
        shape[0] = d;
        h.mul(&self.gamma.reshape(&shape)?)
    }
}

/// Stochastic depth: in train mode the whole branch is zeroed with
/// probability `p` and survivors are rescaled by 1/(1-p) so the expectation
/// is unchanged; in eval mode it is the identity.
pub fn drop_path(h: &Tensor, p: f64, mode: Mode, rng: &mut SeededRng) -> TensorResult<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::InvalidArgument("drop probability must be in [0, 1)"));
    }
    match mode {
        Mode::Eval => Ok(h.clone()),
        Mode::Train => {
            if p == 0.0 {
                return Ok(h.clone());
            }
            if rng.unit() < p {
                Ok(h.scale(0.0))
            } else {
                Ok(h.scale(1.0 / (1.0 - p)))
            }
        }
    }
}
