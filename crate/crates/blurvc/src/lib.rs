//! `blurvc` — a desk-scale, end-to-end trainable video codec for blurry
//! footage.
//!
//! The pipeline enhances each incoming blurry frame with a learned blur
//! residual, estimates and refines motion against the previously decoded
//! frame, codes the refined flow and the remaining residual with learned
//! autoencoders and a factorized entropy model, and emits a real bitstream
//! that a matching decoder reconstructs bit-exactly.

pub mod autodiff;
pub mod blocks;
pub mod cli;
pub mod codec;
pub mod data_synth;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod flow_warp;
pub mod img;
pub mod losses;
pub mod train;

pub use error::{Error, Result};
