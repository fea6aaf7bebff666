//! Desk-scale laboratory for parameter-efficient adaptation of small vision
//! transformers: a tape-based f64 autodiff engine, a fully addressable ViT,
//! a family of adaptation strategies built around sums of Kronecker products
//! and low-rank deltas, Fastfood-subspace intrinsic-dimension measurement,
//! parameter-count analysis, and a reproducible training/benchmark harness.

pub mod analysis;
mod error;
pub mod harness;
pub mod peft;
pub mod subspace;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorError, Var};
