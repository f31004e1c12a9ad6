#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod inference;
mod json;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod pretrain;
pub mod subspace;

pub use error::{Error, Result};
