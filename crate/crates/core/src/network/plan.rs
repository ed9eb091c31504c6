//! Static layer listing of a built model at a given input size, used by the
//! complexity audit.

use crate::kan::KanGeometry;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Conv { c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize },
    /// `coeffs` counts the learnable recurrence coefficients of the layer.
    Kan { geom: KanGeometry, coeffs: usize },
    BatchNorm { c: usize },
    /// Parameter-free per-sample standardization.
    InstanceNorm { c: usize },
    Silu { c: usize },
    MaxPool { c: usize, k: usize, stride: usize, padding: usize },
    Add { c: usize },
    GlobalAvgPool { c: usize },
    Dropout { c: usize },
    Linear { in_features: usize, out_features: usize },
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Kan { .. } => "kan_conv",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::InstanceNorm { .. } => "instance_norm",
            LayerKind::Silu { .. } => "silu",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::Add { .. } => "add",
            LayerKind::GlobalAvgPool { .. } => "global_avg_pool",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Linear { .. } => "linear",
        }
    }
}

/// One layer with its per-sample input and output spatial size and the
/// names of the parameter tensors it owns.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub name: String,
    pub kind: LayerKind,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub params: Vec<String>,
}
