//! Waveform to latent-feature boundary: the learned framing convolution and
//! its overlap-add synthesis counterpart, with the padding and trimming
//! bookkeeping that makes the round trip length-exact.

use alloc::vec::Vec;

use crate::nn::{Conv1d, ConvTranspose1d};
use crate::signal::Waveform;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Encoder output N x K plus everything needed to invert the framing.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    /// N x K feature tensor.
    pub values: Tensor,
    /// Frame length L in samples.
    pub frame_len: usize,
    /// Frame stride in samples.
    pub stride: usize,
    /// Input length T before padding; decode trims back to this.
    pub original_len: usize,
    pub sample_rate: u32,
}

/// Number of frames produced for an input of `t_padded` samples.
pub fn frame_count(t_padded: usize, frame_len: usize, stride: usize) -> usize {
    (t_padded - frame_len) / stride + 1
}

/// Right-pad length: the smallest T' >= max(T, L) with (T' - L) divisible by
/// the stride.
pub fn padded_len(t: usize, frame_len: usize, stride: usize) -> usize {
    if t <= frame_len {
        return frame_len;
    }
    let rem = (t - frame_len) % stride;
    if rem == 0 {
        t
    } else {
        t + stride - rem
    }
}

/// Frames the waveform with the encoder convolution. The input is
/// zero-padded on the right so every sample falls inside a frame.
pub fn encode(y: &Waveform, encoder: &Conv1d) -> TensorResult<FeatureSequence> {
    if y.is_empty() {
        return Err(TensorError::InvalidArgument("cannot encode an empty waveform"));
    }
    let frame_len = encoder.kernel.shape()[2];
    let stride = encoder.stride;
    let t_padded = padded_len(y.len(), frame_len, stride);
    let mut data = Vec::with_capacity(t_padded);
    data.extend_from_slice(&y.samples);
    data.resize(t_padded, 0.0);
    let x = Tensor::from_vec(&[1, t_padded], data)?;
    let values = encoder.forward(&x)?;
    Ok(FeatureSequence {
        values,
        frame_len,
        stride,
        original_len: y.len(),
        sample_rate: y.sample_rate,
    })
}

/// Synthesizes a waveform tensor of exactly `original_len` samples from a
/// feature sequence. Kept in the graph so training losses differentiate
/// through it.
pub fn decode_tensor(f: &FeatureSequence, decoder: &ConvTranspose1d) -> TensorResult<Tensor> {
    let k = f.values.shape()[1];
    let t_padded = padded_len(f.original_len, f.frame_len, f.stride);
    if k != frame_count(t_padded, f.frame_len, f.stride) {
        return Err(TensorError::ShapeMismatch {
            expected: alloc::vec![f.values.shape()[0], frame_count(t_padded, f.frame_len, f.stride)],
            got: f.values.shape().to_vec(),
        });
    }
    let full = decoder.forward(&f.values)?;
    let trimmed = full.slice_axis(1, 0, f.original_len)?;
    trimmed.reshape(&[f.original_len])
}

/// [`decode_tensor`] with the result materialized as a waveform.
pub fn decode(f: &FeatureSequence, decoder: &ConvTranspose1d) -> TensorResult<Waveform> {
    let t = decode_tensor(f, decoder)?;
    Ok(Waveform::new(t.data().to_vec(), f.sample_rate))
}

/// Replaces the feature values, keeping the framing metadata. Used to push
/// masked features back through the decoder.
pub fn with_values(f: &FeatureSequence, values: Tensor) -> FeatureSequence {
    FeatureSequence {
        values,
        frame_len: f.frame_len,
        stride: f.stride,
        original_len: f.original_len,
        sample_rate: f.sample_rate,
    }
}
