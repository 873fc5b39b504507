//! Unsupervised, source-free, parameter-efficient post-pretraining of a
//! micro vision transformer.

pub mod adapters;
pub mod cvr;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod numcore;
pub mod ssl;
pub mod trainer;

pub use error::{Error, Result};
