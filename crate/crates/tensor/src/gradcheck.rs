//! Finite-difference verification of analytic gradients.

use std::fmt;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator.
const DENOM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the check could not be evaluated (error or non-finite value).
    pub diagnostic: Option<String>,
}

impl GradReport {
    fn failed(op_name: &str, tolerance: f64, why: String) -> Self {
        Self {
            op_name: op_name.to_string(),
            max_relative_error: f64::INFINITY,
            tolerance,
            passed: false,
            diagnostic: Some(why),
        }
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err={:<12.3e} tol={:<8.0e} {}",
            self.op_name,
            self.max_relative_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )?;
        if let Some(d) = &self.diagnostic {
            write!(f, " ({d})")?;
        }
        Ok(())
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares backward-pass gradients of the scalar function `f` against
/// central differences with step [`FD_STEP`] on every input element.
///
/// The relative error of one element is `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check<F>(op_name: &str, f: F, inputs: &[Tensor<f64>], tol: f64) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = match f(&mut g, &vars) {
        Ok(v) => v,
        Err(e) => return GradReport::failed(op_name, tol, format!("forward failed: {e}")),
    };
    if !g.value(out).is_scalar() {
        return GradReport::failed(op_name, tol, format!("output shape {:?} is not scalar", g.shape(out)));
    }
    if !g.value(out).item().is_finite() {
        return GradReport::failed(op_name, tol, "non-finite output".into());
    }
    if let Err(e) = g.backward(out) {
        return GradReport::failed(op_name, tol, format!("backward failed: {e}"));
    }

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).expect("param leaves always receive a gradient").clone();
        for j in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[j];
            probe[k].data_mut()[j] = x0 + FD_STEP;
            let fp = eval(&f, &probe);
            probe[k].data_mut()[j] = x0 - FD_STEP;
            let fm = eval(&f, &probe);
            probe[k].data_mut()[j] = x0;
            let (fp, fm) = match (fp, fm) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => {
                    return GradReport::failed(op_name, tol, format!("perturbed forward failed: {e}"))
                }
            };
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return GradReport::failed(
                    op_name,
                    tol,
                    format!("non-finite gradient at input {k}, element {j}"),
                );
            }
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    GradReport {
        op_name: op_name.to_string(),
        max_relative_error: worst,
        tolerance: tol,
        passed: worst <= tol,
        diagnostic: None,
    }
}
