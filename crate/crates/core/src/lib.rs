//! Light-ResKAN: residual networks built from Gram-polynomial KAN
//! convolutions with channel-shared activations.
//!
//! * [`kan`]: polynomial bases, activation units, KAN convolution paths.
//! * [`network`]: model configuration, construction and forward pass.
//! * [`audit`]: parameter/FLOPs/memory-traffic accounting and the operator
//!   benchmark.
//! * [`speckle`]: Gamma multiplicative noise.
//! * [`data`]: image loading, preprocessing, synthetic data, sampling.
//! * [`trainer`]: AdamW, training and evaluation loops, checkpoints.

pub mod audit;
pub mod data;
pub mod error;
pub mod kan;
pub mod network;
pub mod seed;
pub mod speckle;
pub mod trainer;

pub use error::{Error, Result};
