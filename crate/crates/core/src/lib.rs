//! Style interleaved learning for domain-generalizable embeddings.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a define-by-run tape for reverse-mode
//!   differentiation and a finite-difference gradient checker.
//! - [`backbone`]: the small staged CNN with stylizer insertion points.
//! - [`stylize`]: ISG plus the pAdaIN / MixStyle / DSU baselines.
//! - [`memory`]: per-domain prototype banks and the cosine-softmax loss.
//! - [`data`]: procedural multi-domain benchmark and P×K batch sampling.
//! - [`trainer`]: the interleaved loop and its ablation variants.
//! - [`eval`]: retrieval metrics and style diagnostics.
//! - [`ablate`]: multi-seed ablation sweeps.

pub mod ablate;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod memory;
pub mod stylize;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Eager, Ops, Scalar, Tape, Tensor, Var};
