//! Instrumental-variables quantile regression and its density-weighted
//! first stage.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod first_stage;
pub mod ivqr;
pub mod montecarlo;
pub mod qr;
pub mod stats;
pub mod weights;

pub use error::{Error, Result};
