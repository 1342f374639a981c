//! Perturb–backprop–denoise training (SmoothOut and its filter-adaptive
//! variant), smoothed-loss estimators on analytic landscapes, and sharpness
//! instruments for trained networks.

pub mod error;
pub mod checkpoint;
pub mod data;
pub mod experiment;
pub mod landscape;
pub mod nn;
pub mod optim;
pub mod par;
pub mod perturb;
pub mod rng;
pub mod sharpness;
pub mod tensor;

pub use error::{Error, Result};
