//! File formats, dataset generation, and checkpoints for the dprcnet
//! speech-separation toolkit. The algorithmic core lives in `dprcnet-core`;
//! this crate adds everything that touches the filesystem plus the `dprcnet`
//! command-line binary.

pub mod checkpoint;
pub mod dataset;
pub mod runconfig;
pub mod wav;
