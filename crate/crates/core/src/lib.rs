//! Passive non-line-of-sight imaging with a learned light-transport
//! condition: forward simulation, datasets, the codebook and modulation
//! machinery, networks, objectives, training, evaluation and the command
//! line tool.

pub mod checkpoint;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod lightsim;
pub mod losses;
pub mod metrics;
pub mod modulation;
pub mod networks;
pub mod nn;
pub mod training;

pub use error::{Error, Result};

/// Scalar used by training and the command line tool.
pub type Real = f32;
/// Double-precision scalar used by oracles and gradient checks.
pub type Real64 = f64;
pub type Image = image::ImageGrid<Real>;
pub type Image64 = image::ImageGrid<Real64>;
pub type Ckpt = checkpoint::Checkpoint<Real>;
pub type Params = nlos_tensor::ParamSet<Real>;
