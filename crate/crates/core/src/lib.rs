//! Data-driven stochastic predictive control with polynomial chaos
//! expansions and Hankel-matrix predictors.

pub mod behavioral;
pub mod conic;
pub mod controller;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod lti;
pub mod ocp;
pub mod pce;
pub mod terminal;

pub use error::{Error, Result};
