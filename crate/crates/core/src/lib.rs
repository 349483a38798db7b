//! Class-incremental object detection with generative replay on a toy
//! set-prediction detector.

pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod generator;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod plot;
pub mod prompt;
pub mod refiner;
pub mod seeds;
pub mod trainer;

pub use error::{Error, Result};
