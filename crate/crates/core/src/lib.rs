//! Visually guided separation of unseen instrument categories.
//!
//! The crate implements the mix-and-separate pipeline (STFT, binary-mask
//! targets, a U-Net audio analyzer fused with a motion encoder), the
//! inter- and intra-modal consistency losses, per-pair online matching at
//! test time, and BSS-eval style SDR/SIR/SAR scoring, on top of a small
//! reverse-mode autodiff engine.

pub mod autodiff;
mod error;

pub use error::{Error, Result};
pub mod dsp;
pub mod masks;
pub mod losses;
pub mod networks;
pub mod io;
pub mod synthdata;
pub mod bsseval;
pub mod pipeline;
pub mod trainer;
pub mod online_matching;
