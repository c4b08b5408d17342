//! Decorrelated adversarial learning: a residual factorization of features
//! into identity and age parts, kept uncorrelated by a batch canonical
//! correlation adversary, trained on synthetic entangled-factor data.

pub mod bcca;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
