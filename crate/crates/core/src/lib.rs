pub mod config;
pub mod dataset;
pub mod dt;
pub mod error;
pub mod harness;
pub mod policies;
pub mod scalar;
pub mod sim;
pub mod stats;

pub use config::{ExperimentConfig, HeuristicParams, SimConfig};
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision decision transformer, the weight file's native type.
pub type DtModelF32 = dt::DtModel<f32>;
/// Double-precision decision transformer.
pub type DtModelF64 = dt::DtModel<f64>;
