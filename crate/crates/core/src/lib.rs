//! Two-pathway video transformer: per-frame appearance tokens and
//! optical-flow tokens, fused by arrow-masked cross-attention into video
//! units, then aggregated over time with causal self-attention.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod model;
pub mod params;
pub mod patching;
pub mod tensor;
pub mod training;
pub mod viz;

pub use error::{MooseError, Result};
pub use tensor::{Tape, Tensor, Var};
