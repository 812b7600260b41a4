//! A desk-scale laboratory for Mixture-of-Experts language models.
//!
//! The crate provides a small reverse-mode tensor engine, a LLaMA-style
//! decoder, every expert layer variant used for comparison (top-K, top-3,
//! hash, fine-grained flattened, top-P, and the Cartesian product layer),
//! a deterministic AdamW trainer, and the evaluation harnesses built on top:
//! parameter accounting, top-1 expert ablation, granularity sweeps, and
//! controlled variant comparisons.

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod moe;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
