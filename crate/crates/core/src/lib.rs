//! Multiple instance learning as weakly-supervised self-training.
//!
//! An instance classifier is trained on negative-bag instances (known
//! negatives) and positive-bag instances whose pseudo labels come from an
//! entropic optimal-transport assignment constrained by the bag labels.
//! Bag-classification baselines, synthetic bag generators and the
//! instance/bag entropy analysis live alongside.

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod labeling;
pub mod model;
pub mod numkit;
pub mod trainer;

pub use error::{Error, Result};
