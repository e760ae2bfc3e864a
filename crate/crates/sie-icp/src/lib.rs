//! Robust point-cloud registration built around statistical inlier
//! estimation: the sensor noise model is learned from residual histograms
//! while the registration runs, and every correspondence is weighted by its
//! probability of being an inlier.

pub mod error;
pub mod fmt;
pub mod geometry;
pub mod histogram;
pub mod costs;
pub mod registration;
pub mod sie;

pub use error::{Error, Result};
