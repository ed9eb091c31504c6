//! Parameter, FLOP and memory-traffic accounting over a model's layer plan,
//! plus a latency benchmark of the KAN convolution paths.
//!
//! Conventions, also written into every report header:
//!
//! * one multiply-accumulate is 2 FLOPs;
//! * transcendentals are charged fixed costs: tanh 1, SiLU 4;
//! * KAN basis evaluation costs `1 + 2 * (D - 1) + 4` per input pixel and
//!   channel (tanh, recurrence terms of degree 2 and up, SiLU);
//! * shared KAN weighting is `2 * C_out * C_in * (D + 1) * H * W`, the
//!   residual weighting `2 * C_out * C_in * H * W`, and the all-ones
//!   aggregation `C_out * H' * W' * k^2`;
//! * elementwise KAN weighting is `2 * C_out * H' * W' * C_in * k^2 * (D + 2)`;
//! * batch norm (inference affine) 2 per element, input standardization 4
//!   per element (two reductions, subtract, scale), add 1, max pool
//!   `k^2 - 1` comparisons per output, global average pool `H * W` per
//!   channel, linear `2 * F * K + K`; dropout is free at inference;
//! * bytes moved count activation reads and writes plus one read of every
//!   weight per sample, at 4 bytes per scalar, so traffic is proportional
//!   to the batch size.

mod bench;

pub use bench::{bench, default_sweep, BenchConfig, BenchResult, BENCH_CSV_HEADER, BENCH_TOLERANCE};

use std::fmt::Write as _;

use crate::kan::{KanGeometry, KanMode, PATH_NAMES};
use crate::network::{LayerKind, LightResKan, PlanEntry, MIN_INPUT_SIZE};
use crate::error::{config_err, Result};
use reskan_tensor::Scalar;

pub const BYTES_PER_SCALAR: u64 = 4;

/// Published calibration references: total parameters in millions and
/// FLOPs in G for a batch of 16 at 112 x 112.
pub const REFERENCE_PARAMS_M: f64 = 0.82;
pub const REFERENCE_FLOPS_G: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub flops_per_sample: u64,
    pub bytes_per_batch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub path: String,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn flops_per_sample(&self) -> u64 {
        self.rows.iter().map(|r| r.flops_per_sample).sum()
    }

    pub fn flops_per_batch(&self) -> u64 {
        self.flops_per_sample() * self.batch as u64
    }

    pub fn bytes_per_batch(&self) -> u64 {
        self.rows.iter().map(|r| r.bytes_per_batch).sum()
    }

    /// `# `-prefixed lines stating the input, the path and every convention.
    pub fn header(&self) -> Vec<String> {
        vec![
            format!("# light-reskan {} complexity report", env!("CARGO_PKG_VERSION")),
            format!("# input 1x{}x{}, batch {}, conv path {}", self.height, self.width, self.batch, self.path),
            "# FLOPs: multiply-accumulate = 2 FLOPs; tanh = 1, SiLU = 4; KAN basis 1 + 2(D-1) + 4 per input pixel"
                .into(),
            "# bytes: activation reads + writes and one weight read per sample, 4 bytes per scalar".into(),
        ]
    }

    /// Reported totals next to the published references. The counting
    /// convention behind the references is unknown, so these are
    /// informational only.
    pub fn calibration(&self) -> Vec<String> {
        let params_m = self.total_params() as f64 / 1e6;
        let sample_g = self.flops_per_sample() as f64 / 1e9;
        let batch_g = self.flops_per_batch() as f64 / 1e9;
        vec![
            format!(
                "# params {params_m:.4} M (reference {REFERENCE_PARAMS_M} M, delta {:+.4} M)",
                params_m - REFERENCE_PARAMS_M
            ),
            format!(
                "# FLOPs per sample {sample_g:.4} G, per batch of {} {batch_g:.4} G (reference {REFERENCE_FLOPS_G} G, \
                 delta per sample {:+.4} G, per batch {:+.4} G)",
                self.batch,
                sample_g - REFERENCE_FLOPS_G,
                batch_g - REFERENCE_FLOPS_G
            ),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for line in self.header() {
            let _ = writeln!(s, "{line}");
        }
        let _ = writeln!(s, "layer,kind,params,flops_per_sample,flops_per_batch,bytes_per_batch");
        let b = self.batch as u64;
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.name,
                r.kind,
                r.params,
                r.flops_per_sample,
                r.flops_per_sample * b,
                r.bytes_per_batch
            );
        }
        let _ = writeln!(
            s,
            "total,,{},{},{},{}",
            self.total_params(),
            self.flops_per_sample(),
            self.flops_per_batch(),
            self.bytes_per_batch()
        );
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for line in self.header() {
            let _ = writeln!(s, "{line}");
        }
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "{:<width$}  {:<15}  {:>10}  {:>15}  {:>15}", "layer", "kind", "params", "FLOPs/sample", "bytes/batch");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:<15}  {:>10}  {:>15}  {:>15}",
                r.name, r.kind, r.params, r.flops_per_sample, r.bytes_per_batch
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:<15}  {:>10}  {:>15}  {:>15}",
            "total",
            "",
            self.total_params(),
            self.flops_per_sample(),
            self.bytes_per_batch()
        );
        for line in self.calibration() {
            let _ = writeln!(s, "{line}");
        }
        s
    }
}

/// Closed-form parameter count of one layer. KAN layers carry basis
/// weights, one residual weight per activation unit and the basis
/// coefficients; batch norm carries an affine pair per channel.
pub fn layer_params(kind: &LayerKind) -> u64 {
    let n = match *kind {
        LayerKind::Conv { c_in, c_out, k, .. } => c_out * c_in * k * k,
        LayerKind::Kan { geom, coeffs } => kan_poly_params(&geom) + kan_units(&geom) + coeffs,
        LayerKind::BatchNorm { c } => 2 * c,
        LayerKind::Linear { in_features, out_features } => in_features * out_features + out_features,
        LayerKind::Silu { .. }
        | LayerKind::InstanceNorm { .. }
        | LayerKind::MaxPool { .. }
        | LayerKind::Add { .. }
        | LayerKind::GlobalAvgPool { .. }
        | LayerKind::Dropout { .. } => 0,
    };
    n as u64
}

/// Basis weights: `C_out * C_in * (D + 1)` shared, times `k^2` elementwise.
pub fn kan_poly_params(g: &KanGeometry) -> usize {
    let per_pair = g.degree + 1;
    match g.mode {
        KanMode::Shared => g.c_out * g.c_in * per_pair,
        KanMode::Elementwise => g.c_out * g.c_in * g.k * g.k * per_pair,
    }
}

fn kan_units(g: &KanGeometry) -> usize {
    match g.mode {
        KanMode::Shared => g.c_out * g.c_in,
        KanMode::Elementwise => g.c_out * g.c_in * g.k * g.k,
    }
}

/// Per-pixel basis cost: tanh, one 2-FLOP step per degree from 2 up, SiLU.
pub fn basis_flops_per_pixel(degree: usize) -> u64 {
    1 + 2 * degree.saturating_sub(1) as u64 + 4
}

/// FLOPs of one layer for a single sample.
pub fn layer_flops(e: &PlanEntry) -> u64 {
    let (h, w) = (e.in_hw.0 as u64, e.in_hw.1 as u64);
    let (oh, ow) = (e.out_hw.0 as u64, e.out_hw.1 as u64);
    match e.kind {
        LayerKind::Conv { c_in, c_out, k, .. } => 2 * c_out as u64 * oh * ow * c_in as u64 * (k * k) as u64,
        LayerKind::Kan { geom, .. } => {
            let (ci, co, kk, d) = (geom.c_in as u64, geom.c_out as u64, (geom.k * geom.k) as u64, geom.degree as u64);
            let basis = ci * h * w * basis_flops_per_pixel(geom.degree);
            match geom.mode {
                KanMode::Shared => basis + 2 * co * ci * (d + 1) * h * w + 2 * co * ci * h * w + co * oh * ow * kk,
                KanMode::Elementwise => basis + 2 * co * oh * ow * ci * kk * (d + 2),
            }
        }
        LayerKind::BatchNorm { c } => 2 * c as u64 * oh * ow,
        LayerKind::InstanceNorm { c } => 4 * c as u64 * oh * ow,
        LayerKind::Silu { c } => 4 * c as u64 * oh * ow,
        LayerKind::MaxPool { c, k, .. } => c as u64 * oh * ow * (k * k - 1) as u64,
        LayerKind::Add { c } => c as u64 * oh * ow,
        LayerKind::GlobalAvgPool { c } => c as u64 * h * w,
        LayerKind::Dropout { .. } => 0,
        LayerKind::Linear { in_features, out_features } => (2 * in_features * out_features + out_features) as u64,
    }
}

fn channels(kind: &LayerKind) -> (usize, usize) {
    match *kind {
        LayerKind::Conv { c_in, c_out, .. } => (c_in, c_out),
        LayerKind::Kan { geom, .. } => (geom.c_in, geom.c_out),
        LayerKind::BatchNorm { c }
        | LayerKind::InstanceNorm { c }
        | LayerKind::Silu { c }
        | LayerKind::MaxPool { c, .. }
        | LayerKind::Add { c }
        | LayerKind::GlobalAvgPool { c }
        | LayerKind::Dropout { c } => (c, c),
        LayerKind::Linear { in_features, out_features } => (in_features, out_features),
    }
}

/// Bytes of the expanded basis tensor `[N, C_in * basis_len, H, W]`,
/// written once and read once.
pub fn expansion_bytes(n: usize, c_in: usize, basis_len: usize, h: usize, w: usize) -> u64 {
    2 * BYTES_PER_SCALAR * (n * c_in * basis_len * h * w) as u64
}

/// Whether `path` materializes the expanded basis for a layer of `mode`.
/// The fused path handles shared layers only and falls back to the
/// decoupled realization otherwise.
fn materializes(path: &str, mode: KanMode) -> bool {
    match path {
        "decoupled" => true,
        "fused" => mode == KanMode::Elementwise,
        _ => false,
    }
}

/// Bytes moved by one layer for a batch of `n` under `path`. Weights are
/// charged once per sample.
pub fn layer_bytes(e: &PlanEntry, n: usize, path: &str) -> u64 {
    let (ci, co) = channels(&e.kind);
    let (h, w) = e.in_hw;
    let (oh, ow) = e.out_hw;
    let inputs = if matches!(e.kind, LayerKind::Add { .. }) { 2 } else { 1 };
    let per_sample = (inputs * ci * h * w + co * oh * ow) as u64 + layer_params(&e.kind);
    let mut bytes = n as u64 * per_sample * BYTES_PER_SCALAR;
    if let LayerKind::Kan { geom, .. } = e.kind {
        if materializes(path, geom.mode) {
            // Basis expansion plus the SiLU residual channel.
            bytes += expansion_bytes(n, geom.c_in, geom.degree + 1, h, w) + expansion_bytes(n, geom.c_in, 1, h, w);
            if geom.mode == KanMode::Shared {
                // Weighted field before the all-ones aggregation.
                bytes += 2 * BYTES_PER_SCALAR * (n * geom.c_out * h * w) as u64;
            }
        }
    }
    bytes
}

fn check_path(path: &str) -> Result<()> {
    if PATH_NAMES.contains(&path) {
        Ok(())
    } else {
        Err(config_err!("unknown conv path `{path}`; expected one of {}", PATH_NAMES.join(", ")))
    }
}

/// Full per-layer report at input `h x w`, batch `batch`, under `path`.
pub fn cost_report<T: Scalar>(model: &LightResKan<T>, h: usize, w: usize, batch: usize, path: &str) -> Result<CostReport> {
    check_path(path)?;
    if batch == 0 {
        return Err(config_err!("batch size must be positive"));
    }
    let rows = model
        .plan(h, w)?
        .iter()
        .map(|e| CostRow {
            name: e.name.clone(),
            kind: e.kind.label(),
            params: layer_params(&e.kind),
            flops_per_sample: layer_flops(e),
            bytes_per_batch: layer_bytes(e, batch, path),
        })
        .collect();
    Ok(CostReport { height: h, width: w, batch, path: path.to_string(), rows })
}

/// Closed-form total parameter count.
pub fn count_params<T: Scalar>(model: &LightResKan<T>) -> Result<u64> {
    Ok(model.plan(MIN_INPUT_SIZE, MIN_INPUT_SIZE)?.iter().map(|e| layer_params(&e.kind)).sum())
}

/// Total basis-weight count over all KAN layers.
pub fn count_poly_params<T: Scalar>(model: &LightResKan<T>) -> Result<u64> {
    Ok(model
        .plan(MIN_INPUT_SIZE, MIN_INPUT_SIZE)?
        .iter()
        .map(|e| match e.kind {
            LayerKind::Kan { geom, .. } => kan_poly_params(&geom) as u64,
            _ => 0,
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    pub per_sample: u64,
    pub per_batch: u64,
}

pub fn count_flops<T: Scalar>(model: &LightResKan<T>, h: usize, w: usize, batch: usize) -> Result<FlopCount> {
    let per_sample: u64 = model.plan(h, w)?.iter().map(layer_flops).sum();
    Ok(FlopCount { per_sample, per_batch: per_sample * batch as u64 })
}

pub fn estimate_mac<T: Scalar>(model: &LightResKan<T>, h: usize, w: usize, batch: usize, path: &str) -> Result<u64> {
    check_path(path)?;
    Ok(model.plan(h, w)?.iter().map(|e| layer_bytes(e, batch, path)).sum())
}
