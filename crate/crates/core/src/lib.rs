//! Distance-kernel relative positional biases for softmax attention.
//!
//! The crate covers the kernel zoo ([`kernel`]), per-head slope schedules
//! ([`slopes`]), multiple-kernel fusion ([`fusion`]), bias matrices
//! ([`bias`]), biased attention with exact gradients ([`attention`]), a small
//! trainable language model for length-extrapolation runs ([`lm`]) and the
//! figure-style analyses ([`analysis`]).

pub mod analysis;
pub mod attention;
pub mod bias;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod io_util;
pub mod kernel;
pub mod lm;
pub mod slopes;

pub use error::{Error, Result};
