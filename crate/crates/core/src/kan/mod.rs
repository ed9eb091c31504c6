//! KAN convolutions whose kernel entries are Gram-polynomial activations.
//!
//! An activation unit computes
//! `phi(x) = sum_k w_k * G_k(tanh x) + w_m * silu(x)`.
//! In elementwise mode every kernel position `(co, ci, i, j)` owns a unit; in
//! shared mode one unit per `(co, ci)` pair is applied at every position of
//! the window, which makes the layer equal to a positionwise activation
//! followed by an all-ones spatial sum. Positions that fall in the padding
//! contribute nothing.

pub mod basis;
pub mod init;
pub mod layer;
pub mod ops;
pub mod paths;

use reskan_tensor::{Scalar, Window};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub use basis::{basis, Basis, GramBasis, MonomialBasis, BASIS_NAMES};
pub use init::{beta_sigma, init_kan_tensors, kaiming_uniform_bound};
pub use layer::KanConvLayer;
pub use ops::{expand_basis, gram_activation, gram_basis};
pub use paths::{conv_path, BufferMeter, ConvPath, KanVars, PATH_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KanMode {
    Elementwise,
    Shared,
}

impl KanMode {
    pub fn name(self) -> &'static str {
        match self {
            KanMode::Elementwise => "elementwise",
            KanMode::Shared => "shared",
        }
    }
}

/// Static shape of one KAN convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KanGeometry {
    pub mode: KanMode,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub degree: usize,
}

impl KanGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(config_err!("KAN conv needs positive channel counts, got {}->{}", self.c_in, self.c_out));
        }
        if self.k == 0 || self.stride == 0 {
            return Err(config_err!("KAN conv needs positive kernel size and stride"));
        }
        if self.degree == 0 {
            return Err(config_err!("polynomial degree must be at least 1"));
        }
        Ok(())
    }

    pub fn window(&self) -> Window {
        Window::new(self.stride, self.padding)
    }

    /// Shape of the basis-weight tensor `w`.
    pub fn w_shape(&self) -> Vec<usize> {
        match self.mode {
            KanMode::Elementwise => vec![self.c_out, self.c_in, self.k, self.k, self.degree + 1],
            KanMode::Shared => vec![self.c_out, self.c_in, self.degree + 1],
        }
    }

    /// Shape of the residual weight `w_m`: one scalar per activation unit.
    pub fn wm_shape(&self) -> Vec<usize> {
        match self.mode {
            KanMode::Elementwise => vec![self.c_out, self.c_in, self.k, self.k],
            KanMode::Shared => vec![self.c_out, self.c_in],
        }
    }

    pub fn units(&self) -> usize {
        self.wm_shape().iter().product()
    }

    /// Basis-weight count `units * (D + 1)`.
    pub fn poly_params(&self) -> usize {
        self.units() * (self.degree + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let win = self.window();
        Ok((win.out_len(h, self.k, "height")?, win.out_len(w, self.k, "width")?))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// `d/dx silu(x) = s(x) * (1 + x * (1 - s(x)))`.
#[inline]
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}
