//! Query-free model inversion against transfer-learning student models.

pub mod access;
pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod runner;
pub mod seed;

pub use error::{Error, Result};
