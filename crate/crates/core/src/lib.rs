//! Knowledge-graph guided contrastive alignment for video action recognition.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod trainer;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
