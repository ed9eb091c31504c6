use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Error, Result};

/// A single-channel image with intensities in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width || height == 0 || width == 0 {
            return Err(data_err!("image of {height}x{width} cannot hold {} pixels", pixels.len()));
        }
        Ok(GrayImage { height, width, pixels })
    }

    /// 8-bit gray values, unscaled.
    pub fn from_u8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        Self::new(height, width, pixels.iter().map(|&p| p as f32).collect())
    }

    /// Luminance `0.299 R + 0.587 G + 0.114 B` of interleaved 8-bit RGB.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(data_err!("RGB buffer of {} bytes does not match {height}x{width}", rgb.len()));
        }
        let pixels = rgb
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) as f32)
            .collect();
        Self::new(height, width, pixels)
    }

    fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// One preprocessing step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// Bilinear resize to a square side, sampling at half-pixel centers.
    Resize(usize),
    /// Square window around the center; larger than the image is an error.
    CenterCrop(usize),
    /// No-op on single-channel data: color inputs are converted by
    /// luminance when decoded.
    ToGrayscale,
    /// Maps 8-bit values to `[0, 1]`.
    ScaleToUnit,
}

impl Step {
    pub fn apply(&self, img: &GrayImage) -> Result<GrayImage> {
        match *self {
            Step::Resize(side) => resize_bilinear(img, side, side),
            Step::CenterCrop(side) => center_crop(img, side),
            Step::ToGrayscale => Ok(img.clone()),
            Step::ScaleToUnit => {
                GrayImage::new(img.height, img.width, img.pixels.iter().map(|&p| p / 255.0).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessRecipe {
    pub steps: Vec<Step>,
}

impl PreprocessRecipe {
    pub fn apply(&self, img: &GrayImage) -> Result<GrayImage> {
        let mut out = img.clone();
        for step in &self.steps {
            out = step.apply(&out)?;
        }
        Ok(out)
    }

    /// The fixed output side, if some step sets one.
    pub fn output_side(&self) -> Option<usize> {
        self.steps.iter().rev().find_map(|s| match *s {
            Step::Resize(n) | Step::CenterCrop(n) => Some(n),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mstar,
    Fusar,
    SarAcd,
    Synthetic,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [DatasetKind::Mstar, DatasetKind::Fusar, DatasetKind::SarAcd, DatasetKind::Synthetic];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mstar => "mstar",
            DatasetKind::Fusar => "fusar",
            DatasetKind::SarAcd => "sar_acd",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Usage(format!("unknown dataset kind `{s}`; expected mstar, fusar, sar_acd or synthetic"))
        })
    }
}

pub fn recipe_for(kind: DatasetKind) -> PreprocessRecipe {
    use Step::*;
    let steps = match kind {
        DatasetKind::Mstar => vec![CenterCrop(112), ScaleToUnit],
        DatasetKind::Fusar => vec![Resize(512), ScaleToUnit],
        DatasetKind::SarAcd => vec![Resize(128), CenterCrop(112), ScaleToUnit],
        DatasetKind::Synthetic => vec![ScaleToUnit],
    };
    PreprocessRecipe { steps }
}

pub fn center_crop(img: &GrayImage, side: usize) -> Result<GrayImage> {
    if side == 0 || side > img.height || side > img.width {
        return Err(data_err!("cannot center-crop {side}x{side} from a {}x{} image", img.height, img.width));
    }
    let top = (img.height - side) / 2;
    let left = (img.width - side) / 2;
    let mut pixels = Vec::with_capacity(side * side);
    for y in top..top + side {
        pixels.extend_from_slice(&img.pixels[y * img.width + left..y * img.width + left + side]);
    }
    GrayImage::new(side, side, pixels)
}

/// Source coordinate of destination index `d` under half-pixel alignment,
/// as the two neighbours and the weight of the upper one.
fn taps(d: usize, src: usize, dst: usize) -> (usize, usize, f32) {
    let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, (s - lo as f64) as f32)
}

pub fn resize_bilinear(img: &GrayImage, height: usize, width: usize) -> Result<GrayImage> {
    if height == 0 || width == 0 {
        return Err(data_err!("cannot resize to {height}x{width}"));
    }
    let cols: Vec<_> = (0..width).map(|x| taps(x, img.width, width)).collect();
    let mut pixels = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = taps(y, img.height, height);
        for &(x0, x1, fx) in &cols {
            let top = img.at(y0, x0) + (img.at(y0, x1) - img.at(y0, x0)) * fx;
            let bottom = img.at(y1, x0) + (img.at(y1, x1) - img.at(y1, x0)) * fx;
            pixels.push(top + (bottom - top) * fy);
        }
    }
    GrayImage::new(height, width, pixels)
}
