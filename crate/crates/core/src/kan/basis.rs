//! Polynomial bases evaluated on tanh-squashed inputs, and the registry
//! that selects one by name.
//!
//! A basis expands each value `t` into `[G_0(t), ..., G_D(t)]`. Buffers use
//! a basis-major layout: for `len` input values, `out[k * len + i]` holds
//! `G_k(t[i])`.

use std::sync::Arc;

use reskan_tensor::Scalar;

use crate::error::{config_err, Result};

pub trait Basis<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of learnable recurrence coefficients at the given degree.
    fn num_coeffs(&self, degree: usize) -> usize;

    /// Writes `G_0..G_D` of every element of `t` into `out` (`(D+1) * len`).
    fn expand(&self, t: &[T], coeffs: &[T], degree: usize, out: &mut [T]);

    /// Reverse pass of [`Basis::expand`]. `grad` holds `dL/dG_k` in the same
    /// layout and is consumed as scratch. Adds `dL/dt` into `grad_t` and, if
    /// given, `dL/dcoeff` into `grad_coeffs`. Coefficient gradients are long
    /// cancelling reductions over every input value, so they accumulate in
    /// f64 regardless of `T`.
    fn expand_backward(
        &self,
        t: &[T],
        coeffs: &[T],
        degree: usize,
        values: &[T],
        grad: &mut [T],
        grad_t: &mut [T],
        grad_coeffs: Option<&mut [f64]>,
    );
}

/// `G_0 = 1`, `G_1 = t`, `G_k = t * G_{k-1} - beta_k * G_{k-2}` with one
/// learnable `beta_k` per `k >= 2`.
#[derive(Debug, Default, Clone, Copy)]
pub struct GramBasis;

/// Powers of `t`: the recurrence with every `beta_k` fixed at zero.
#[derive(Debug, Default, Clone, Copy)]
pub struct MonomialBasis;

fn recurrence_forward<T: Scalar>(t: &[T], beta: Option<&[T]>, degree: usize, out: &mut [T]) {
    let len = t.len();
    assert!(out.len() >= (degree + 1) * len, "basis output buffer too small");
    out[..len].fill(T::one());
    if degree == 0 {
        return;
    }
    out[len..2 * len].copy_from_slice(t);
    for k in 2..=degree {
        let (lo, hi) = out.split_at_mut(k * len);
        let (g2, g1) = (&lo[(k - 2) * len..(k - 1) * len], &lo[(k - 1) * len..]);
        let gk = &mut hi[..len];
        match beta {
            Some(b) => {
                let bk = b[k - 2];
                for i in 0..len {
                    gk[i] = t[i] * g1[i] - bk * g2[i];
                }
            }
            None => {
                for i in 0..len {
                    gk[i] = t[i] * g1[i];
                }
            }
        }
    }
}

fn recurrence_backward<T: Scalar>(
    t: &[T],
    beta: Option<&[T]>,
    degree: usize,
    values: &[T],
    grad: &mut [T],
    grad_t: &mut [T],
    mut grad_beta: Option<&mut [f64]>,
) {
    // Adjoints run in f64, block by block, so the cancelling coefficient
    // sums see unrounded values.
    const BLOCK: usize = 64;
    let len = t.len();
    if degree == 0 {
        return;
    }
    let d1 = degree + 1;
    let b: Vec<f64> = (2..=degree).map(|k| beta.map_or(0.0, |b| b[k - 2].as_f64())).collect();
    let mut gb = vec![0.0f64; degree.saturating_sub(1)];
    let mut a = vec![[0.0f64; BLOCK]; d1];
    let mut tb = [0.0f64; BLOCK];
    let mut gt = [0.0f64; BLOCK];
    for i0 in (0..len).step_by(BLOCK) {
        let m = BLOCK.min(len - i0);
        for (k, ak) in a.iter_mut().enumerate() {
            for (dst, src) in ak[..m].iter_mut().zip(&grad[k * len + i0..k * len + i0 + m]) {
                *dst = src.as_f64();
            }
        }
        for (dst, src) in tb[..m].iter_mut().zip(&t[i0..i0 + m]) {
            *dst = src.as_f64();
        }
        gt[..m].fill(0.0);
        for k in (2..=degree).rev() {
            let (lo, hi) = a.split_at_mut(k);
            let ak = &hi[0];
            let (a2, a1) = lo.split_at_mut(k - 1);
            let (a2, a1) = (&mut a2[k - 2], &mut a1[0]);
            let g1 = &values[(k - 1) * len + i0..(k - 1) * len + i0 + m];
            let g2 = &values[(k - 2) * len + i0..(k - 2) * len + i0 + m];
            let bk = b[k - 2];
            let mut acc = 0.0f64;
            for j in 0..m {
                a1[j] += ak[j] * tb[j];
                a2[j] -= bk * ak[j];
                gt[j] += ak[j] * g1[j].as_f64();
                acc += ak[j] * g2[j].as_f64();
            }
            gb[k - 2] += acc;
        }
        for j in 0..m {
            grad_t[i0 + j] += T::from_f64(gt[j] + a[1][j]);
        }
        for (k, ak) in a.iter().enumerate() {
            for (dst, &src) in grad[k * len + i0..k * len + i0 + m].iter_mut().zip(&ak[..m]) {
                *dst = T::from_f64(src);
            }
        }
    }
    if let Some(gbeta) = grad_beta.as_deref_mut() {
        for (g, v) in gbeta.iter_mut().zip(&gb) {
            *g -= v;
        }
    }
}

impl<T: Scalar> Basis<T> for GramBasis {
    fn name(&self) -> &'static str {
        "gram"
    }

    fn num_coeffs(&self, degree: usize) -> usize {
        degree.saturating_sub(1)
    }

    fn expand(&self, t: &[T], coeffs: &[T], degree: usize, out: &mut [T]) {
        assert_eq!(coeffs.len(), degree.saturating_sub(1), "gram basis expects D-1 coefficients");
        recurrence_forward(t, Some(coeffs), degree, out);
    }

    fn expand_backward(
        &self,
        t: &[T],
        coeffs: &[T],
        degree: usize,
        values: &[T],
        grad: &mut [T],
        grad_t: &mut [T],
        grad_coeffs: Option<&mut [f64]>,
    ) {
        recurrence_backward(t, Some(coeffs), degree, values, grad, grad_t, grad_coeffs);
    }
}

impl<T: Scalar> Basis<T> for MonomialBasis {
    fn name(&self) -> &'static str {
        "monomial"
    }

    fn num_coeffs(&self, _degree: usize) -> usize {
        0
    }

    fn expand(&self, t: &[T], _coeffs: &[T], degree: usize, out: &mut [T]) {
        recurrence_forward(t, None, degree, out);
    }

    fn expand_backward(
        &self,
        t: &[T],
        _coeffs: &[T],
        degree: usize,
        values: &[T],
        grad: &mut [T],
        grad_t: &mut [T],
        _grad_coeffs: Option<&mut [f64]>,
    ) {
        recurrence_backward(t, None, degree, values, grad, grad_t, None);
    }
}

/// Names accepted by [`basis`]. `spline` is reserved: the interface admits
/// it but no implementation ships.
pub const BASIS_NAMES: &[&str] = &["gram", "monomial", "spline"];

pub fn basis<T: Scalar>(name: &str) -> Result<Arc<dyn Basis<T>>> {
    match name {
        "gram" => Ok(Arc::new(GramBasis)),
        "monomial" => Ok(Arc::new(MonomialBasis)),
        "spline" => Err(config_err!("basis `spline` is not implemented; available: gram, monomial")),
        other => Err(config_err!("unknown basis `{other}`; expected one of {}", BASIS_NAMES.join(", "))),
    }
}
