//! Causal mini-batch sampling for self-supervised learning.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balance;
pub mod dataset;
pub mod error;
pub mod evalharness;
pub mod experiment;
pub mod hash;
pub mod oracle;
pub mod rlvm;
pub mod rngs;
pub mod sampler;
pub mod scmgen;
pub mod ssl;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/library-tour.md")]
pub struct LibraryTour;
