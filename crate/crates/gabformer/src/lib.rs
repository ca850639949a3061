//! Gabor-guided single-image deraining at desk scale.
//!
//! This crate implements the Gabformer architecture end to end on the CPU in
//! `f64`: a minimal tape-based reverse-mode differentiation engine, an exact
//! multi-scale Gabor filter bank feeding the query path of transposed
//! channel self-attention, gated feed-forward blocks, a 4-level
//! encoder-decoder with pixel-(un)shuffle resampling, PSNR/SSIM metrics,
//! synthetic rain generation, and a small training loop. Everything is
//! seed-deterministic and verified against independent oracles (per-tap
//! kernel evaluation, finite differences, naive metric implementations).
//!
//! The companion guide under `book/` walks through each subsystem; its code
//! snippets compile and run as doc-tests of this crate.

pub mod error;
pub mod blocks;
pub mod checkpoint;
pub mod gabor;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Forward, Init, ParamId, ParamStore};
pub use tensor::{PaddingMode, Tape, Tensor, Var};
