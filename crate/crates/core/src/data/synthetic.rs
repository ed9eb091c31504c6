//! Speckled SAR-like stand-in data. Class `c` of `K` is a sinusoidal
//! grating at orientation `c * 180 / K` degrees modulating a smooth
//! reflectivity map of Gaussian blobs; each image is then multiplied by a
//! Gamma speckle field and quantized to 8 bits.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{content_hash, duplicate_hashes, recipe_for, Dataset, DatasetKind, GrayImage, Sample, Split};
use crate::error::{config_err, data_err, Error, Result};
use crate::seed::{derive_rng, derive_seed};
use crate::speckle::{sample_field, GammaNoiseSpec, Parametrization};

pub const MANIFEST_FILE: &str = "spec.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Square image side.
    pub size: usize,
    /// Nominal grating period in pixels; each image jitters it by up to 15%.
    pub period: f64,
    /// Speckle applied at generation; `None` leaves images clean.
    pub speckle: Option<GammaNoiseSpec>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            train_per_class: 200,
            test_per_class: 100,
            size: 64,
            period: 8.0,
            // Single-look speckle: unit-mean exponential intensity.
            speckle: Some(GammaNoiseSpec { alpha: 1.0, value: 1.0, parametrization: Parametrization::Scale }),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err!("data.num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(config_err!("data.train_per_class and data.test_per_class must be positive"));
        }
        if self.size < 8 {
            return Err(config_err!("data.size must be at least 8, got {}", self.size));
        }
        if !(self.period >= 2.0 && self.period.is_finite()) {
            return Err(config_err!("data.period must be at least 2 pixels, got {}", self.period));
        }
        if let Some(s) = &self.speckle {
            s.validate()?;
        }
        Ok(())
    }

    pub fn class_name(c: usize) -> String {
        format!("class{c:02}")
    }

    /// Orientation of class `c` in degrees.
    pub fn orientation_deg(&self, c: usize) -> f64 {
        c as f64 * 180.0 / self.num_classes as f64
    }
}

/// Clean reflectivity in `[0, 1]` for one image.
fn reflectivity(spec: &SyntheticSpec, class: usize, rng: &mut crate::seed::Rng) -> Vec<f64> {
    let n = spec.size;
    let nf = n as f64;
    let spread = PI / (6.0 * spec.num_classes as f64);
    let theta = spec.orientation_deg(class).to_radians() + rng.random_range(-spread..spread);
    let period = spec.period * rng.random_range(0.85..1.15);
    let phase = rng.random_range(-PI / 3.0..PI / 3.0);
    let gain = rng.random_range(0.6..0.9);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..nf),
                rng.random_range(0.0..nf),
                rng.random_range(0.15..0.35) * nf,
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let (ct, st) = (theta.cos(), theta.sin());
    let c = (nf - 1.0) / 2.0;
    let mut map = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let b: f64 = blobs
                .iter()
                .map(|&(bx, by, s, a)| a * (-((xf - bx).powi(2) + (yf - by).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            map.push(0.25 + b);
        }
    }
    let peak = map.iter().cloned().fold(f64::MIN, f64::max);
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let u = (x as f64 - c) * ct + (y as f64 - c) * st;
            let grating = 0.55 + 0.45 * (2.0 * PI * u / period + phase).cos();
            out.push(gain * map[y * n + x] / peak * grating);
        }
    }
    out
}

fn generate_split(spec: &SyntheticSpec, split: Split, per_class: usize) -> Result<Dataset> {
    let label = format!("synthetic.{}", split.name());
    let recipe = recipe_for(DatasetKind::Synthetic);
    let n = spec.size;
    // Every image has its own streams, so the worker count never matters.
    let samples = (0..per_class * spec.num_classes)
        .into_par_iter()
        .map(|idx| {
            let (class, i) = (idx / per_class, idx % per_class);
            let mut rng = derive_rng(spec.seed, &label, idx as u64);
            let mut r = reflectivity(spec, class, &mut rng);
            if let Some(noise) = &spec.speckle {
                let seed = derive_seed(spec.seed, &format!("{label}.speckle"), idx as u64);
                let field = sample_field::<f64>(&[1, n, n], noise, seed)?;
                for (v, f) in r.iter_mut().zip(field.tensor().data()) {
                    *v *= f;
                }
            }
            let bytes: Vec<u8> = r.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let hash = content_hash(n, n, 1, &bytes);
            let image = recipe.apply(&GrayImage::from_u8(n, n, &bytes)?)?;
            let id = format!("{}/{i:05}.png", SyntheticSpec::class_name(class));
            Ok(Sample { id, label: class, image, hash })
        })
        .collect::<Result<Vec<_>>>()?;
    let class_names = (0..spec.num_classes).map(SyntheticSpec::class_name).collect();
    Ok(Dataset { class_names, samples, split })
}

/// Builds the train and test splits. Both derive from `spec.seed` through
/// split-specific streams and are checked to share no image.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let train = generate_split(spec, Split::Train, spec.train_per_class)?;
    let test = generate_split(spec, Split::Test, spec.test_per_class)?;
    if let Some((a, b)) = duplicate_hashes(&train, &test).first() {
        return Err(data_err!("synthetic splits share identical images {a} and {b}"));
    }
    Ok((train, test))
}

#[derive(Serialize)]
struct Manifest<'a> {
    generator: &'static str,
    version: &'static str,
    spec: &'a SyntheticSpec,
    class_names: &'a [String],
    orientations_deg: Vec<f64>,
    train_samples: usize,
    test_samples: usize,
}

/// Writes `root/{train,test}/<class>/<id>.png` and the manifest.
pub fn write_dataset(root: &Path, spec: &SyntheticSpec, train: &Dataset, test: &Dataset) -> Result<()> {
    for data in [train, test] {
        for s in &data.samples {
            let path = root.join(data.split.name()).join(&s.id);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let bytes: Vec<u8> = s.image.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect();
            image::GrayImage::from_raw(s.image.width as u32, s.image.height as u32, bytes)
                .ok_or_else(|| data_err!("image {} has inconsistent dimensions", s.id))?
                .save(&path)
                .map_err(|e| data_err!("cannot write {}: {e}", path.display()))?;
        }
    }
    let manifest = Manifest {
        generator: "light-reskan synthetic",
        version: env!("CARGO_PKG_VERSION"),
        spec,
        class_names: &train.class_names,
        orientations_deg: (0..spec.num_classes).map(|c| spec.orientation_deg(c)).collect(),
        train_samples: train.len(),
        test_samples: test.len(),
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Runtime(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
