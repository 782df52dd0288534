//! Time-domain two-speaker speech separation at desk scale.
//!
//! The crate is organized around a small reverse-mode autodiff engine over
//! dense f64 tensors ([`tensor`]), the layer vocabulary built on it ([`nn`]),
//! the learned encoder/decoder frontend ([`frontend`]), the dual-path
//! recurrent-convolutional separator ([`separator`]), SI-SDR training under
//! utterance-level permutation-invariant assignment ([`train`]), and a
//! complexity/metrics analyzer ([`analysis`]).
//!
//! The crate is `no_std`-compatible (with `alloc`); all scalar math goes
//! through `libm` so results do not depend on the `std` feature. File
//! formats, dataset generation, and the command-line interface live in the
//! companion `dprcnet` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

mod backprop;
mod math;

pub mod analysis;

pub mod chunk;
pub mod frontend;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod separator;
pub mod signal;
pub mod tensor;
pub mod train;

pub use backprop::Gradients;
pub use rng::SeededRng;
pub use tensor::{Tensor, TensorError, TensorResult};
