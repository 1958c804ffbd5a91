//! Forward-only unlearning by knowledge vector weakening.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: a tiny decoder-only transformer whose FFN exposes the
//!   key–value memory decomposition, plus the weight container format.
//! - [`coeffs`]: answer-token coefficient extraction and accumulation.
//! - [`kvw`]: forget-knowledge accessor, gate, and the progressive editing loop.
//! - [`synth`]: planted-fact models with exactly measurable recall.
//! - [`eval`]: constrained selection, sweeps, ablations and the FLOP model.

pub mod coeffs;
pub mod error;
pub mod eval;
pub mod kvw;
pub mod model;
pub mod synth;
pub mod tensor;

pub use error::{KvwError, Result};
