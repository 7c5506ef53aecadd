//! Differentially private transfer learning with an averaged-feature ensemble.
//!
//! A trusted party trains an initial CNN on public data; each participant
//! copies it, freezes the classification head and fine-tunes the rest with
//! DP-SGD on private data; a cloud role averages the participants'
//! penultimate activations and feeds the mean through the shared head.

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod io;
pub mod nn;
pub mod optim;
pub mod privacy;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
