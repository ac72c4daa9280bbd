//! Hierarchical construction-integration attention.
//!
//! A sequence is cut into fixed-length segments. Each segment is summarised
//! into `M` local slots by bottleneck cross-attention, all local slots are
//! pooled into `K` global slots through statistical aggregation and a small
//! selection attention, and finally every segment attends over
//! `[G; L_i; X_i]` so that tokens see sequence-wide context at segment cost.
//!
//! The crate is `no_std` (it needs `alloc`). Everything numeric runs in
//! 64-bit floats on a small dense [`Tensor`] type, and every forward path is
//! expressed on a [`Graph`] so that gradients come from reverse-mode
//! differentiation and can be checked against [`finite_diff_grad`].
//!
//! File formats, checkpoints and the command-line driver live in the `hici`
//! companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod hici;
pub mod host;
pub(crate) mod math;
pub mod ops;
pub mod params;
pub mod rng;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use graph::{FlopCounter, Graph, Scope, Var};
pub use tensor::Tensor;
