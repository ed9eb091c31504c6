use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::kan::{KanMode, BASIS_NAMES, PATH_NAMES};

/// Declarative description of a Light-ResKAN network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output channels of both stem convolutions (their outputs are summed).
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stage_blocks: Vec<usize>,
    /// Bottleneck width `C_b` of each stage.
    pub widths: Vec<usize>,
    /// Stage output channels are `expansion * C_b` in bottleneck blocks.
    pub expansion: usize,
    pub degree: usize,
    pub dropout: f64,
    /// Standardize each input image per channel to zero mean and unit
    /// variance before the stem, which makes the network invariant to a
    /// global intensity gain.
    pub input_norm: bool,
    /// Ordinary convolutions everywhere when off.
    pub kan_conv: bool,
    pub basis: String,
    /// Bottleneck blocks when on, two-convolution basic blocks of width
    /// `C_b` when off.
    pub bottleneck: bool,
    pub mode: KanMode,
    /// Batch-normalize the input of every KAN convolution.
    pub kan_pre_norm: bool,
    /// Execution strategy for KAN convolutions.
    pub conv_path: String,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            num_classes: 10,
            stem_channels: 32,
            stem_kernel: 7,
            stem_stride: 2,
            stage_blocks: vec![3, 4, 6, 3],
            widths: vec![16, 32, 64, 128],
            expansion: 4,
            degree: 3,
            dropout: 0.1,
            input_norm: true,
            kan_conv: true,
            basis: "gram".into(),
            bottleneck: true,
            mode: KanMode::Shared,
            kan_pre_norm: true,
            conv_path: "fused".into(),
        }
    }
}

/// Minimum input height and width: four stride-2 reductions after the
/// stem and pool must leave at least one cell.
pub const MIN_INPUT_SIZE: usize = 32;

impl NetworkConfig {
    /// Desk-scale preset used for fast experiments.
    pub fn tiny(num_classes: usize) -> Self {
        NetworkConfig { num_classes, stem_channels: 16, widths: vec![8, 16, 32, 64], expansion: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("stem_channels", self.stem_channels),
            ("stem_kernel", self.stem_kernel),
            ("stem_stride", self.stem_stride),
            ("expansion", self.expansion),
            ("degree", self.degree),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(config_err!("network.{field} must be positive"));
            }
        }
        if self.stage_blocks.len() != 4 {
            return Err(config_err!("network.stage_blocks must list 4 stages, got {}", self.stage_blocks.len()));
        }
        if self.stage_blocks.contains(&0) {
            return Err(config_err!("network.stage_blocks entries must be positive"));
        }
        if self.widths.len() != 4 {
            return Err(config_err!("network.widths must list 4 stages, got {}", self.widths.len()));
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|p| p[1] <= p[0]) {
            return Err(config_err!("network.widths must be positive and strictly increasing, got {:?}", self.widths));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("network.dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !BASIS_NAMES.contains(&self.basis.as_str()) {
            return Err(config_err!("network.basis `{}` is unknown; expected one of {}", self.basis, BASIS_NAMES.join(", ")));
        }
        if !PATH_NAMES.contains(&self.conv_path.as_str()) {
            return Err(config_err!(
                "network.conv_path `{}` is unknown; expected one of {}",
                self.conv_path,
                PATH_NAMES.join(", ")
            ));
        }
        self.ablation_row()?;
        Ok(())
    }

    /// Channels leaving stage `s`.
    pub fn stage_out(&self, s: usize) -> usize {
        if self.bottleneck {
            self.widths[s] * self.expansion
        } else {
            self.widths[s]
        }
    }

    /// Width of the pooled feature vector fed to the classifier.
    pub fn feature_dim(&self) -> usize {
        self.stage_out(3)
    }

    /// Identifies which rung of the cumulative component ladder the switches
    /// describe. Switch combinations off the ladder are rejected.
    pub fn ablation_row(&self) -> Result<AblationRow> {
        let gram = self.basis != "monomial";
        let shared = self.mode == KanMode::Shared;
        let row = match (self.kan_conv, gram, self.bottleneck, shared) {
            (true, true, true, true) => AblationRow::Shared,
            (true, true, true, false) => AblationRow::Bottleneck,
            (true, true, false, false) => AblationRow::Gram,
            (true, false, false, false) => AblationRow::Kan,
            (false, false, false, false) => AblationRow::Baseline,
            _ => {
                return Err(config_err!(
                    "network switches (kan_conv={}, basis={}, bottleneck={}, mode={}) are not a cumulative ablation \
                     row; components enable in the order kan_conv, gram basis, bottleneck, shared mode",
                    self.kan_conv,
                    self.basis,
                    self.bottleneck,
                    self.mode.name()
                ))
            }
        };
        Ok(row)
    }
}

/// Rungs of the cumulative component ladder, each adding one component to
/// the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AblationRow {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "+kan")]
    Kan,
    #[serde(rename = "+gram")]
    Gram,
    #[serde(rename = "+bottleneck")]
    Bottleneck,
    #[serde(rename = "+shared")]
    Shared,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] =
        [AblationRow::Baseline, AblationRow::Kan, AblationRow::Gram, AblationRow::Bottleneck, AblationRow::Shared];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Baseline => "baseline",
            AblationRow::Kan => "+kan",
            AblationRow::Gram => "+gram",
            AblationRow::Bottleneck => "+bottleneck",
            AblationRow::Shared => "+shared",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s || r.name().trim_start_matches('+') == s)
            .ok_or_else(|| config_err!("unknown ablation row `{s}`; expected baseline, +kan, +gram, +bottleneck or +shared"))
    }
}

/// Sets the component switches of `config` to the given ladder rung,
/// leaving widths and every other field alone.
pub fn apply_ablation(config: &NetworkConfig, row: AblationRow) -> NetworkConfig {
    let at_least = |r: AblationRow| row >= r;
    NetworkConfig {
        kan_conv: at_least(AblationRow::Kan),
        basis: if at_least(AblationRow::Gram) { "gram" } else { "monomial" }.into(),
        bottleneck: at_least(AblationRow::Bottleneck),
        mode: if at_least(AblationRow::Shared) { KanMode::Shared } else { KanMode::Elementwise },
        ..config.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_row_round_trips_through_its_switches() {
        for row in AblationRow::ALL {
            let c = apply_ablation(&NetworkConfig::default(), row);
            assert_eq!(c.ablation_row().unwrap(), row);
            assert_eq!(AblationRow::parse(row.name()).unwrap(), row);
        }
        assert_eq!(apply_ablation(&NetworkConfig::default(), AblationRow::Shared), NetworkConfig::default());
    }

    #[test]
    fn off_ladder_switches_are_rejected() {
        let c = NetworkConfig { bottleneck: false, ..NetworkConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("cumulative"));
    }
}
