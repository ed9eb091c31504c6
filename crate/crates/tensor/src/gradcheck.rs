//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over all
    /// checked elements whose absolute error exceeds the floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Compares tape gradients of the scalar `f(inputs)` with central
/// differences of step `h`. Differences below `abs_floor` are treated as
/// exact (near-zero gradients).
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64, abs_floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        g.value(root).item()
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].data()[i];
            let abs = (a - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > abs_floor {
                report.max_rel_err = report.max_rel_err.max(abs / a.abs().max(numeric.abs()));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
