//! Off-policy evaluation and policy-gradient estimation for deterministic
//! continuous-action policies, using kernel-smoothed doubly robust estimators.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::type_complexity,
    clippy::needless_range_loop
)]

pub mod analytic;
pub mod bandwidth;
pub mod error;
pub mod env;
pub mod estimators;
pub mod harness;
pub mod kernel;
pub mod learner;
pub mod quadrature;
pub mod sieve;
pub mod models;
pub mod nuisance;
pub mod pipeline;
pub mod stats;

pub use error::{Error, Result};
