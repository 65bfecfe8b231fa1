//! Differentially private and corruption-robust preference alignment on
//! finite bandit environments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod error;
pub mod harness;
pub mod noise;
pub mod objectives;
pub mod offline;
pub mod online;
pub mod rng;
pub mod uclemmas;

pub use error::{Error, Result};
