//! Training toolkit for text classifiers that learn jointly from
//! instance-wise task labels and pair-wise preference labels.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: reverse-mode differentiation over dense matrices.
//! - [`model`]: hashed n-gram encoder, classification head and preference heads.
//! - [`losses`] and [`baselines`]: the preference-augmented objective and the
//!   comparison objectives, each as a plain scalar function and as a graph builder.
//! - [`prefsources`]: extractive, generative and subjective preference labels.
//! - [`sampling`]: informative pair selection.
//! - [`trainer`]: Adam and the training loops.
//! - [`metrics`]: accuracy family, MCC, calibration.
//! - [`dataio`]: JSONL datasets, splits, synthetic data.

pub mod baselines;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod prefsources;
pub mod rng;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
