//! Parameter initialization: Kaiming-uniform (linear gain) weights and
//! small-variance normal recurrence coefficients.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use reskan_tensor::{Scalar, Tensor};

use super::{Basis, KanGeometry};
use crate::error::Result;

/// `sqrt(3 / fan_in)`: the Kaiming-uniform bound with gain 1.
pub fn kaiming_uniform_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in.max(1) as f64).sqrt()
}

/// Standard deviation of the recurrence coefficients,
/// `1 / (k^d * C_in * (D + 1))` with spatial dimension `d = 2`.
pub fn beta_sigma(k: usize, c_in: usize, degree: usize) -> f64 {
    1.0 / ((k * k) as f64 * c_in as f64 * (degree + 1) as f64)
}

pub fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..=bound)))
}

/// Draws `(w, w_m, beta)` for one layer. Each output sums over
/// `C_in * k^2` window taps, each contributing `D + 1` basis terms, so the
/// basis weights use fan-in `C_in * k^2 * (D + 1)` and the residual weights
/// `C_in * k^2`, in both modes.
pub fn init_kan_tensors<T: Scalar, R: Rng + ?Sized>(
    geom: &KanGeometry,
    basis: &dyn Basis<T>,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    geom.validate()?;
    let taps = geom.c_in * geom.k * geom.k;
    let w = uniform_tensor(rng, geom.w_shape(), kaiming_uniform_bound(taps * (geom.degree + 1)));
    let wm = uniform_tensor(rng, geom.wm_shape(), kaiming_uniform_bound(taps));
    let nc = basis.num_coeffs(geom.degree);
    let beta = if nc == 0 {
        None
    } else {
        let normal = Normal::new(0.0, beta_sigma(geom.k, geom.c_in, geom.degree))
            .expect("sigma is positive and finite");
        Some(Tensor::from_fn(vec![nc], |_| T::from_f64(normal.sample(rng))))
    };
    Ok((w, wm, beta))
}
