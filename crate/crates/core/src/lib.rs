//! One-class anomaly detection for class-imbalanced vision data.

pub mod cluster;
pub mod data;
pub mod error;
pub mod fcdd;
pub mod harness;
pub mod heatmap;
pub mod io;
pub mod mnpair;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
