//! Simultaneous selection and estimation of fixed and random functional
//! effects in multilevel functional mixed models.
//!
//! Responses are curves observed on a shared grid, nested in clusters with
//! replicated measurements. Fixed and random effect coefficient functions are
//! expanded in cubic B-splines, a spike-and-slab group-lasso prior is placed
//! on each coefficient block and on each row-block of the Cholesky factor of
//! the random-effect covariance, and the maximum a posteriori estimate is
//! computed by an expectation/conditional-maximization iteration whose
//! conditional updates are weighted group-lasso problems. Exact zeros in the
//! solution deliver the selected fixed and random effects.
//!
//! The crate also ships the supporting machinery used to study the method:
//! spike parameter tuning by BIC over a grid, synthetic data generators with
//! calibrated signal-to-noise ratios, and Monte Carlo selection/error
//! summaries.

pub mod basis;
pub mod ecm;
pub mod error;
pub mod group_lasso;
mod linalg;
pub mod metrics;
pub mod model;
pub mod simulate;
pub mod ssgl;
pub mod tuning;

pub use error::{Error, Result};
