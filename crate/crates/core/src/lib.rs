//! Adversarial super-resolution: train an SR network whose weights carry a
//! targeted attack on a frozen downstream classifier, and measure both image
//! fidelity and attack success.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod models;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
