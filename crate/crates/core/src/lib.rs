pub mod cli;
pub mod dataset;
pub mod detectors;
pub mod error;
pub mod instrumentation;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod store;
pub mod sweeps;
pub mod thm6;
pub mod trainer;

pub use error::{Error, Result};
