//! Differentiable basis expansion and single-unit activation.

use std::sync::Arc;

use reskan_tensor::{CustomOp, Graph, Scalar, Tensor, Var};

use super::{silu, silu_grad, Basis};
use crate::error::{config_err, Result};

fn coeffs_of<'a, T: Scalar>(g: &'a Graph<T>, beta: Option<Var>) -> &'a [T] {
    beta.map_or(&[], |b| g.value(b).data())
}

fn check_coeffs<T: Scalar>(g: &Graph<T>, basis: &dyn Basis<T>, beta: Option<Var>, degree: usize) -> Result<()> {
    let want = basis.num_coeffs(degree);
    let got = beta.map_or(0, |b| g.value(b).numel());
    if want != got || (want == 0 && beta.is_some()) {
        return Err(config_err!(
            "basis `{}` at degree {degree} takes {want} coefficients, got {got}",
            basis.name()
        ));
    }
    if degree == 0 {
        return Err(config_err!("polynomial degree must be at least 1"));
    }
    Ok(())
}

fn with_coeffs(mut inputs: Vec<Var>, beta: Option<Var>) -> Vec<Var> {
    inputs.extend(beta);
    inputs
}

fn coeff_input<'a, T: Scalar>(inputs: &[&'a Tensor<T>], at: usize) -> &'a [T] {
    inputs.get(at).map_or(&[], |t| t.data())
}

struct GramBasisOp<T: Scalar> {
    basis: Arc<dyn Basis<T>>,
    degree: usize,
}

impl<T: Scalar> CustomOp<T> for GramBasisOp<T> {
    fn name(&self) -> &str {
        "gram_basis"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs_grad: &[bool],
    ) -> reskan_tensor::Result<Vec<Option<Tensor<T>>>> {
        let t = inputs[0];
        let coeffs = coeff_input(inputs, 1);
        let mut scratch = grad_output.data().to_vec();
        let mut gt = vec![T::zero(); t.numel()];
        let mut gc = vec![0.0f64; coeffs.len()];
        self.basis.expand_backward(t.data(), coeffs, self.degree, output.data(), &mut scratch, &mut gt, Some(&mut gc));
        let mut out = vec![needs_grad[0].then(|| Tensor::new(t.shape().to_vec(), gt)).transpose()?];
        if inputs.len() > 1 {
            out.push(needs_grad[1].then(|| Tensor::from_f64(vec![coeffs.len()], &gc)).transpose()?);
        }
        Ok(out)
    }
}

/// Stacks `G_0(t)..G_D(t)` along a new leading axis: output shape is
/// `[D + 1, ..t.shape]`. `t` is used as given (no tanh).
pub fn gram_basis<T: Scalar>(
    g: &mut Graph<T>,
    t: Var,
    beta: Option<Var>,
    degree: usize,
    basis: &Arc<dyn Basis<T>>,
) -> Result<Var> {
    check_coeffs(g, basis.as_ref(), beta, degree)?;
    let tv = g.value(t);
    let mut shape = vec![degree + 1];
    shape.extend_from_slice(tv.shape());
    let mut out = vec![T::zero(); (degree + 1) * tv.numel()];
    basis.expand(tv.data(), coeffs_of(g, beta), degree, &mut out);
    let value = Tensor::new(shape, out)?;
    let op = GramBasisOp { basis: basis.clone(), degree };
    Ok(g.custom(&with_coeffs(vec![t], beta), value, Box::new(op)))
}

struct GramActivationOp<T: Scalar> {
    basis: Arc<dyn Basis<T>>,
    degree: usize,
}

impl<T: Scalar> CustomOp<T> for GramActivationOp<T> {
    fn name(&self) -> &str {
        "gram_activation"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs_grad: &[bool],
    ) -> reskan_tensor::Result<Vec<Option<Tensor<T>>>> {
        let (x, w, wm) = (inputs[0].data(), inputs[1].data(), inputs[2].data()[0]);
        let coeffs = coeff_input(inputs, 3);
        let len = x.len();
        let d1 = self.degree + 1;
        let t: Vec<T> = x.iter().map(|v| v.tanh()).collect();
        let mut b = vec![T::zero(); d1 * len];
        self.basis.expand(&t, coeffs, self.degree, &mut b);
        let go = grad_output.data();

        let mut gw = vec![T::zero(); d1];
        let mut gb = vec![T::zero(); d1 * len];
        for k in 0..d1 {
            let bk = &b[k * len..(k + 1) * len];
            let mut acc = T::zero();
            for i in 0..len {
                acc += go[i] * bk[i];
                gb[k * len + i] = go[i] * w[k];
            }
            gw[k] = acc;
        }
        let gwm: T = x.iter().zip(go).map(|(&xi, &g)| g * silu(xi)).sum();
        let mut gt = vec![T::zero(); len];
        let mut gc = vec![0.0f64; coeffs.len()];
        self.basis.expand_backward(&t, coeffs, self.degree, &b, &mut gb, &mut gt, Some(&mut gc));
        let gx: Vec<T> =
            (0..len).map(|i| gt[i] * (T::one() - t[i] * t[i]) + go[i] * wm * silu_grad(x[i])).collect();

        let mut out = vec![
            needs_grad[0].then(|| Tensor::new(inputs[0].shape().to_vec(), gx)).transpose()?,
            needs_grad[1].then(|| Tensor::new(vec![d1], gw)).transpose()?,
            needs_grad[2].then(|| Tensor::new(inputs[2].shape().to_vec(), vec![gwm])).transpose()?,
        ];
        if inputs.len() > 3 {
            out.push(needs_grad[3].then(|| Tensor::from_f64(vec![coeffs.len()], &gc)).transpose()?);
        }
        Ok(out)
    }
}

/// One activation unit applied elementwise:
/// `sum_k w[k] * G_k(tanh x) + w_m * silu(x)`. `w` has `D + 1` entries and
/// `w_m` one.
pub fn gram_activation<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    wm: Var,
    beta: Option<Var>,
    basis: &Arc<dyn Basis<T>>,
) -> Result<Var> {
    let d1 = g.value(w).numel();
    if d1 < 2 {
        return Err(config_err!("basis weights need at least 2 entries (degree >= 1), got {d1}"));
    }
    if g.value(wm).numel() != 1 {
        return Err(config_err!("residual weight must be a single scalar"));
    }
    let degree = d1 - 1;
    check_coeffs(g, basis.as_ref(), beta, degree)?;
    let (xv, wv, wmv) = (g.value(x), g.value(w).data(), g.value(wm).data()[0]);
    let len = xv.numel();
    let t: Vec<T> = xv.data().iter().map(|v| v.tanh()).collect();
    let mut b = vec![T::zero(); d1 * len];
    basis.expand(&t, coeffs_of(g, beta), degree, &mut b);
    let data: Vec<T> = (0..len)
        .map(|i| {
            let mut acc = T::zero();
            for k in 0..d1 {
                acc += wv[k] * b[k * len + i];
            }
            acc + wmv * silu(xv.data()[i])
        })
        .collect();
    let value = Tensor::new(xv.shape().to_vec(), data)?;
    let op = GramActivationOp { basis: basis.clone(), degree };
    Ok(g.custom(&with_coeffs(vec![x, w, wm], beta), value, Box::new(op)))
}

struct ExpandOp<T: Scalar> {
    basis: Arc<dyn Basis<T>>,
    degree: usize,
}

impl<T: Scalar> CustomOp<T> for ExpandOp<T> {
    fn name(&self) -> &str {
        "expand_basis"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs_grad: &[bool],
    ) -> reskan_tensor::Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let coeffs = coeff_input(inputs, 1);
        let [n, c, h, w] = x.dims4()?;
        let (hw, d1) = (h * w, self.degree + 1);
        let mut gx = vec![T::zero(); x.numel()];
        let mut gc = vec![0.0f64; coeffs.len()];
        let mut scratch = vec![T::zero(); d1 * hw];
        let mut t = vec![T::zero(); hw];
        for p in 0..n * c {
            let xp = &x.data()[p * hw..(p + 1) * hw];
            for (ti, &xi) in t.iter_mut().zip(xp) {
                *ti = xi.tanh();
            }
            let block = p * d1 * hw..(p + 1) * d1 * hw;
            scratch.copy_from_slice(&grad_output.data()[block.clone()]);
            let gt = &mut gx[p * hw..(p + 1) * hw];
            self.basis.expand_backward(&t, coeffs, self.degree, &output.data()[block], &mut scratch, gt, Some(&mut gc));
            for (g, &ti) in gt.iter_mut().zip(&t) {
                *g *= T::one() - ti * ti;
            }
        }
        let mut out = vec![needs_grad[0].then(|| Tensor::new(x.shape().to_vec(), gx)).transpose()?];
        if inputs.len() > 1 {
            out.push(needs_grad[1].then(|| Tensor::from_f64(vec![coeffs.len()], &gc)).transpose()?);
        }
        Ok(out)
    }
}

/// Expands `x [N, C, H, W]` into `[N, C * (D + 1), H, W]`, channel
/// `c * (D + 1) + k` holding `G_k(tanh x[:, c])`.
pub fn expand_basis<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    beta: Option<Var>,
    degree: usize,
    basis: &Arc<dyn Basis<T>>,
) -> Result<Var> {
    check_coeffs(g, basis.as_ref(), beta, degree)?;
    let xv = g.value(x);
    let [n, c, h, w] = xv.dims4()?;
    let (hw, d1) = (h * w, degree + 1);
    let coeffs = coeffs_of(g, beta);
    let mut out = vec![T::zero(); n * c * d1 * hw];
    let mut t = vec![T::zero(); hw];
    for p in 0..n * c {
        for (ti, &xi) in t.iter_mut().zip(&xv.data()[p * hw..(p + 1) * hw]) {
            *ti = xi.tanh();
        }
        basis.expand(&t, coeffs, degree, &mut out[p * d1 * hw..(p + 1) * d1 * hw]);
    }
    let value = Tensor::new(vec![n, c * d1, h, w], out)?;
    let op = ExpandOp { basis: basis.clone(), degree };
    Ok(g.custom(&with_coeffs(vec![x], beta), value, Box::new(op)))
}
