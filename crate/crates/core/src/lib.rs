//! Lightweight All-ConvNet for gesture recognition from instantaneous HD-sEMG
//! images, with the preprocessing, transfer-learning and evaluation machinery
//! around it.

pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod signal;

pub use error::{Error, Result};
