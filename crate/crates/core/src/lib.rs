//! PAC-Bayesian training and certification of stochastic representation
//! networks for contrastive unsupervised learning.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod certify;
pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod divergences;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod losses;
pub mod network;
pub mod objective;
pub mod optim;
pub mod oracle;
pub mod pipeline;
mod serde_float;
pub mod train;

pub use error::{Error, Result};
