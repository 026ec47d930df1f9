//! Decentralized fitted Q-iteration over factored Markov games with a
//! configurable information-sharing graph.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod data;
pub mod error;
pub mod fqi;
pub mod game;
pub mod harness;
pub mod oracle;
pub mod regression;
pub mod rng;
pub mod sched;

pub use error::{Error, Result};
