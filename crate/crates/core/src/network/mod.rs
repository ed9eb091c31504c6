//! The Light-ResKAN classifier: a two-branch stem, four stages of residual
//! blocks built from KAN convolutions, and a pooled linear head.
//!
//! Spatial ladder for a 112x112 input: the stride-2 stem gives 56, the
//! 3x3/2 max-pool (padding 1) 28, then stages 1 to 4 give 28, 14, 7 and 4.

pub mod config;
pub mod model;
pub mod plan;

pub use config::{apply_ablation, AblationRow, NetworkConfig, MIN_INPUT_SIZE};
pub use model::{build, BnUpdate, ForwardOutput, LightResKan, BN_EPS, BN_MOMENTUM};
pub use plan::{LayerKind, PlanEntry};
