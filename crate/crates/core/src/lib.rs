//! Hierarchical visual review scoring.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod hierarchy;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tiler;

pub use error::{Error, Result};
