use std::time::Instant;

use reskan_tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::kan::{basis, conv_path, init_kan_tensors, BufferMeter, KanGeometry, KanMode, KanVars, PATH_NAMES};
use crate::kan::init::uniform_tensor;
use crate::seed::derive_rng;

pub const BENCH_CSV_HEADER: &str = "path,Cin,Cout,k,H,W,N,D,median_us,p10_us,p90_us,peak_bytes";

/// Largest normwise relative disagreement with the direct path that the
/// correctness gate accepts (f32).
pub const BENCH_TOLERANCE: f64 = 1e-6;

pub const MIN_REPETITIONS: usize = 20;
pub const WARMUP: usize = 3;

/// One shared-mode layer to time: stride 1, padding `k / 2`, Gram basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub n: usize,
    pub degree: usize,
}

impl BenchConfig {
    pub fn geometry(&self) -> KanGeometry {
        KanGeometry {
            mode: KanMode::Shared,
            c_in: self.c_in,
            c_out: self.c_out,
            k: self.k,
            stride: 1,
            padding: self.k / 2,
            degree: self.degree,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub path: String,
    pub config: BenchConfig,
    pub repetitions: usize,
    pub median_us: f64,
    pub p10_us: f64,
    pub p90_us: f64,
    pub peak_bytes: usize,
}

impl BenchResult {
    pub fn csv_row(&self) -> String {
        let c = &self.config;
        format!(
            "{},{},{},{},{},{},{},{},{:.1},{:.1},{:.1},{}",
            self.path, c.c_in, c.c_out, c.k, c.h, c.w, c.n, c.degree, self.median_us, self.p10_us, self.p90_us, self.peak_bytes
        )
    }
}

/// Sweep over kernel sizes and degrees at a modest layer size.
pub fn default_sweep() -> Vec<BenchConfig> {
    let mut v = Vec::new();
    for k in [1, 3, 5, 7] {
        for degree in [1, 3] {
            v.push(BenchConfig { c_in: 16, c_out: 16, k, h: 28, w: 28, n: 4, degree });
        }
    }
    v
}

struct Case {
    geom: KanGeometry,
    x: Tensor<f32>,
    w: Tensor<f32>,
    wm: Tensor<f32>,
    beta: Option<Tensor<f32>>,
}

/// Runs one forward on `path`; returns the output and the peak transient
/// buffer bytes.
fn run(path: &str, case: &Case) -> Result<(Tensor<f32>, usize)> {
    let p = conv_path::<f32>(path)?;
    let b = basis::<f32>("gram")?;
    let mut g = Graph::new();
    let x = g.input(case.x.clone());
    let vars = KanVars {
        w: g.input(case.w.clone()),
        wm: g.input(case.wm.clone()),
        beta: case.beta.as_ref().map(|t| g.input(t.clone())),
    };
    let mut meter = BufferMeter::new();
    let y = p.forward(&mut g, x, &vars, &case.geom, &b, &mut meter)?;
    Ok((g.value(y).clone(), meter.peak()))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times every path on one layer. All paths are first run on identical
/// inputs and must agree with `direct`; otherwise no timing is produced.
/// Each path then gets `WARMUP` untimed runs and `repetitions` timed ones.
pub fn bench(config: &BenchConfig, repetitions: usize, seed: u64) -> Result<Vec<BenchResult>> {
    if repetitions < MIN_REPETITIONS {
        return Err(config_err!("benchmark needs at least {MIN_REPETITIONS} repetitions, got {repetitions}"));
    }
    let geom = config.geometry();
    geom.validate()?;
    if config.n == 0 || config.h == 0 || config.w == 0 {
        return Err(config_err!("benchmark input must be non-empty"));
    }
    let mut rng = derive_rng(seed, "bench", 0);
    let gram = basis::<f32>("gram")?;
    let (w, wm, beta) = init_kan_tensors(&geom, gram.as_ref(), &mut rng)?;
    let mut xr = derive_rng(seed, "bench.input", 0);
    let x = uniform_tensor(&mut xr, vec![config.n, config.c_in, config.h, config.w], 2.0);
    let case = Case { geom, x, w, wm, beta };

    let (reference, _) = run("direct", &case)?;
    for &path in PATH_NAMES {
        let (out, _) = run(path, &case)?;
        let err = out.linf_rel_diff(&reference, 1e-30);
        if !(err <= BENCH_TOLERANCE) {
            return Err(Error::Runtime(format!(
                "correctness gate failed: {path} differs from direct by {err:e} (tolerance {BENCH_TOLERANCE:e}) on {config:?}"
            )));
        }
    }

    let mut results = Vec::with_capacity(PATH_NAMES.len());
    for &path in PATH_NAMES {
        for _ in 0..WARMUP {
            run(path, &case)?;
        }
        let mut times = Vec::with_capacity(repetitions);
        let mut peak = 0;
        for _ in 0..repetitions {
            let start = Instant::now();
            let (_, p) = run(path, &case)?;
            times.push(start.elapsed().as_secs_f64() * 1e6);
            peak = peak.max(p);
        }
        times.sort_by(f64::total_cmp);
        results.push(BenchResult {
            path: path.to_string(),
            config: *config,
            repetitions,
            median_us: percentile(&times, 0.5),
            p10_us: percentile(&times, 0.1),
            p90_us: percentile(&times, 0.9),
            peak_bytes: peak,
        });
    }
    Ok(results)
}
