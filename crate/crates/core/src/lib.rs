//! Frequency-domain learning for night-time scene parsing, at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`ops`], [`autodiff`], [`gradcheck`]: dense `f64` tensors, paired
//!   forward/gradient kernels, a replayable tape and a central-difference checker.
//! - [`dct`]: orthonormal block DCT and multi-spectral channel extraction.
//! - [`freqstats`], [`netpbm`]: block-spectrum statistics over images and datasets.
//! - [`nn`]: learnable frequency encoder, spatial-frequency fusion, edge-aware losses.
//! - [`toynet`]: a small end-to-end segmentation network, synthetic day/night scenes,
//!   the trainer, mIoU evaluation and ablations.
//! - [`selftest`]: the bundled identity and gradient checks.

pub mod autodiff;
pub mod dct;
pub mod error;
pub mod freqstats;
pub mod fsio;
pub mod gradcheck;
pub mod netpbm;
pub mod nn;
pub mod ops;
pub mod selftest;
pub mod tensor;
pub mod toynet;

pub use autodiff::{Param, ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
