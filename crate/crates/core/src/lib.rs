#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coupling;
pub mod error;
pub mod experiments;
pub mod inequalities;
pub mod integrator;
pub mod models;
pub mod spaces;

pub use error::{Error, Result};
