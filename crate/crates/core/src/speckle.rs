//! Multiplicative speckle: an observed image is the clean reflectivity times
//! an i.i.d. Gamma-distributed factor field, `I = R * F`.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Gamma};
use reskan_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{config_err, Error, Result};
use crate::seed::derive_rng;

/// How the second Gamma parameter is read: as a scale `theta` (mean
/// `alpha * theta`) or as a rate `beta = 1 / theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parametrization {
    #[default]
    Scale,
    Rate,
}

impl Parametrization {
    pub fn name(self) -> &'static str {
        match self {
            Parametrization::Scale => "scale",
            Parametrization::Rate => "rate",
        }
    }
}

impl FromStr for Parametrization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale" => Ok(Parametrization::Scale),
            "rate" => Ok(Parametrization::Rate),
            other => Err(Error::Usage(format!("unknown gamma parametrization `{other}`; expected scale or rate"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaNoiseSpec {
    /// Shape `alpha`.
    pub alpha: f64,
    /// Scale or rate, per `parametrization`.
    pub value: f64,
    pub parametrization: Parametrization,
}

impl GammaNoiseSpec {
    pub fn new(alpha: f64, value: f64, parametrization: Parametrization) -> Result<Self> {
        let spec = GammaNoiseSpec { alpha, value, parametrization };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(config_err!("gamma shape must be positive and finite, got {}", self.alpha));
        }
        if !(self.value > 0.0 && self.value.is_finite()) {
            return Err(config_err!("gamma {} must be positive and finite, got {}", self.parametrization.name(), self.value));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        match self.parametrization {
            Parametrization::Scale => self.value,
            Parametrization::Rate => 1.0 / self.value,
        }
    }

    pub fn mean(&self) -> f64 {
        self.alpha * self.scale()
    }

    pub fn variance(&self) -> f64 {
        self.alpha * self.scale() * self.scale()
    }
}

/// Gamma density at `x > 0`, evaluated in log space.
pub fn gamma_pdf(x: f64, spec: &GammaNoiseSpec) -> Result<f64> {
    spec.validate()?;
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Domain(format!("gamma density is defined for finite x > 0, got {x}")));
    }
    let (a, theta) = (spec.alpha, spec.scale());
    Ok(((a - 1.0) * x.ln() - x / theta - ln_gamma(a) - a * theta.ln()).exp())
}

/// Named severity levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLevel {
    Weak,
    Medium,
    Strong,
}

impl NoiseLevel {
    pub const ALL: [NoiseLevel; 3] = [NoiseLevel::Weak, NoiseLevel::Medium, NoiseLevel::Strong];

    pub fn name(self) -> &'static str {
        match self {
            NoiseLevel::Weak => "weak",
            NoiseLevel::Medium => "medium",
            NoiseLevel::Strong => "strong",
        }
    }
}

impl fmt::Display for NoiseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown noise level `{s}`; expected weak, medium or strong")))
    }
}

/// `(alpha, second parameter)` of each level: weak (3, 0.1), medium
/// (1, 0.5), strong (0.5, 2).
pub fn preset(level: NoiseLevel, parametrization: Parametrization) -> GammaNoiseSpec {
    let (alpha, value) = match level {
        NoiseLevel::Weak => (3.0, 0.1),
        NoiseLevel::Medium => (1.0, 0.5),
        NoiseLevel::Strong => (0.5, 2.0),
    };
    GammaNoiseSpec { alpha, value, parametrization }
}

/// A strictly positive multiplicative factor field.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeckleField<T: Scalar>(Tensor<T>);

impl<T: Scalar> SpeckleField<T> {
    /// Wraps explicit factors; every entry must be positive and finite.
    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        if let Some(v) = t.data().iter().find(|v| !(**v > T::zero() && v.is_finite())) {
            return Err(Error::Domain(format!("speckle factors must be positive and finite, found {v}")));
        }
        Ok(SpeckleField(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Draws i.i.d. factors of `shape`. The leading axis indexes images, and
/// image `i` uses its own random stream derived from `(seed, i)`, so any
/// subset of images can be regenerated independently.
pub fn sample_field<T: Scalar>(shape: &[usize], spec: &GammaNoiseSpec, seed: u64) -> Result<SpeckleField<T>> {
    spec.validate()?;
    let gamma = Gamma::new(spec.alpha, spec.scale()).map_err(|e| config_err!("invalid gamma parameters: {e}"))?;
    let total: usize = shape.iter().product();
    let per_image = if shape.is_empty() { 1 } else { shape[1..].iter().product() };
    let mut data = Vec::with_capacity(total);
    for i in 0..total.checked_div(per_image).unwrap_or(0) {
        let mut rng = derive_rng(seed, "speckle", i as u64);
        // Underflow to zero is possible for small shapes in f32; keep factors positive.
        data.extend((0..per_image).map(|_| T::from_f64(gamma.sample(&mut rng)).max(T::min_positive_value())));
    }
    Ok(SpeckleField(Tensor::new(shape.to_vec(), data)?))
}

/// `clip(R * F, 0, 1)` elementwise.
pub fn apply_field<T: Scalar>(r: &Tensor<T>, field: &SpeckleField<T>) -> Result<Tensor<T>> {
    if r.shape() != field.0.shape() {
        return Err(config_err!("image shape {:?} does not match speckle field {:?}", r.shape(), field.0.shape()));
    }
    let data = r.data().iter().zip(field.0.data()).map(|(&a, &f)| (a * f).max(T::zero()).min(T::one())).collect();
    Ok(Tensor::new(r.shape().to_vec(), data)?)
}

/// Multiplies `r` by a freshly sampled field and clips to `[0, 1]`.
pub fn apply<T: Scalar>(r: &Tensor<T>, spec: &GammaNoiseSpec, seed: u64) -> Result<Tensor<T>> {
    if let Some(v) = r.data().iter().find(|v| !(v.is_finite() && **v >= T::zero())) {
        return Err(Error::Domain(format!("speckle needs finite non-negative images, found {v}")));
    }
    let field = sample_field(r.shape(), spec, seed)?;
    apply_field(r, &field)
}
