//! Distributions, random streams and dense linear algebra shared by the estimators.

pub mod dist;
pub mod linalg;
pub mod rng;

pub use dist::{chisq_cdf, chisq_sf, norm_cdf, norm_pdf, norm_quantile};
pub use linalg::{solve_wls, Cholesky, Matrix};
pub use rng::{bivariate_normal_sample, RngStream};
