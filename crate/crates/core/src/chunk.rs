//! Overlapped chunking of a frame sequence and its exact inverse.
//!
//! A D x K sequence is zero-padded and split into J chunks of I frames at hop
//! H, stacked as D x I x J. `merge` overlap-adds the chunks back, divides
//! every frame by the number of chunks covering it, and strips the padding,
//! so `merge(segment(x)) == x` holds for every plan.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Tensor, TensorError, TensorResult};

/// Segmentation plan: all index bookkeeping needed to invert the layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSpec {
    /// Chunk size I.
    pub chunk: usize,
    /// Hop H between chunk starts.
    pub hop: usize,
    /// Zero frames prepended before the first input frame.
    pub pad_front: usize,
    /// Zero frames appended after the last input frame.
    pub pad_back: usize,
    /// Unpadded frame count K.
    pub frames: usize,
}

impl ChunkSpec {
    /// Plans the tiling for `frames` frames. With K <= I a single unpadded-
    /// front chunk holds everything; otherwise the front pad is I - H (H for
    /// the default 50% overlap) and the back pad is the smallest amount that
    /// gives every input frame full coverage.
    pub fn plan(frames: usize, chunk: usize, hop: usize) -> TensorResult<ChunkSpec> {
        if frames == 0 {
            return Err(TensorError::ZeroExtent);
        }
        assert!(chunk >= 1, "chunk size must be at least 1");
        assert!((1..=chunk).contains(&hop), "hop must be in 1..=chunk");
        if frames <= chunk {
            return Ok(ChunkSpec { chunk, hop, pad_front: 0, pad_back: chunk - frames, frames });
        }
        let pad_front = chunk - hop;
        let last = pad_front + frames - 1;
        let last_start = (last / hop) * hop;
        let padded = last_start + chunk;
        Ok(ChunkSpec { chunk, hop, pad_front, pad_back: padded - pad_front - frames, frames })
    }

    pub fn padded_len(&self) -> usize {
        self.pad_front + self.frames + self.pad_back
    }

    /// Number of chunk positions J.
    pub fn positions(&self) -> usize {
        (self.padded_len() - self.chunk) / self.hop + 1
    }

    /// Maps a padded frame index to the input frame index, if any.
    pub(crate) fn unpadded_index(&self, padded: usize) -> Option<usize> {
        let k = padded.checked_sub(self.pad_front)?;
        (k < self.frames).then_some(k)
    }

    /// How many chunks cover each padded frame position.
    pub(crate) fn coverage(&self) -> Vec<u32> {
        let mut cov = vec![0u32; self.padded_len()];
        for j in 0..self.positions() {
            for i in 0..self.chunk {
                cov[j * self.hop + i] += 1;
            }
        }
        cov
    }
}

/// A chunked feature tensor D x I x J with the metadata needed to merge it
/// back into a D x K sequence.
#[derive(Debug, Clone)]
pub struct ChunkTensor {
    pub values: Tensor,
    pub spec: ChunkSpec,
}

/// Splits a D x K tensor into overlapped chunks of size `chunk` at hop `hop`.
pub fn segment(f: &Tensor, chunk: usize, hop: usize) -> TensorResult<ChunkTensor> {
    if f.shape().len() != 2 {
        return Err(TensorError::RankMismatch { expected: 2, got: f.shape().len() });
    }
    let spec = ChunkSpec::plan(f.shape()[1], chunk, hop)?;
    let values = f.segment_chunks(spec.clone())?;
    Ok(ChunkTensor { values, spec })
}

/// Exact left inverse of [`segment`].
pub fn merge(u: &ChunkTensor) -> TensorResult<Tensor> {
    u.values.merge_chunks(u.spec.clone())
}

/// Merges an arbitrary D x I x J tensor using an existing plan. The backbone
/// output shares the plan of the segmented input.
pub fn merge_with_spec(values: &Tensor, spec: &ChunkSpec) -> TensorResult<Tensor> {
    values.merge_chunks(spec.clone())
}
