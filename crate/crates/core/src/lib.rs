//! Continuous-time capture-recapture with observed covariates, Gamma
//! frailty, a nonparametric baseline and delayed-onset / finite-memory
//! behavioral response.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod em;
pub mod error;
pub mod io;
pub mod likelihood;
pub mod model;
mod par;
pub mod population;
pub mod selection;
pub mod simulator;
pub mod special;

pub use error::{Error, Result};
