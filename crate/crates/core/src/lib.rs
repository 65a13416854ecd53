//! Adversarial-example detection with a fixed Gaussian-mixture head.
//!
//! An MLP encoder maps inputs to a representation space holding `k` benign
//! cluster centers and one adversarial center at the origin. Inputs are
//! classified by the nearest benign center and flagged when they sit
//! farther than a calibrated per-class radius from it.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gmm;
pub mod loss;
pub mod metrics;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
