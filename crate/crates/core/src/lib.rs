//! Fully convolutional classifiers for 12-lead ECG windows, with saliency
//! maps, DTW clustering, lead-importance aggregation and exact tests for
//! comparing classifiers.

pub mod cluster;
pub mod dataset_io;
pub mod datagen;
pub mod error;
pub mod fcn;
pub mod signal;
pub mod stats;
pub mod trainer;
pub mod xai;

pub use error::{Error, Result};
