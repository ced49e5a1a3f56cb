//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_err: f64,
    /// Flat index into the concatenation of all inputs.
    pub worst_index: usize,
    pub passed: bool,
}

/// An operation under test: maps input variables to an output variable.
pub type CheckedOp<'a> = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'a;

/// Pins a closure to the higher-ranked signature expected by [`grad_check`].
pub fn checked_op<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

fn scalarize<'t>(tape: &'t Tape, out: Var<'t>) -> Result<Var<'t>> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    if n == 1 {
        return Ok(out);
    }
    // A fixed random projection keeps every output coordinate in play.
    let mut rng = SeededRng::new(0x9e37_79b9);
    let w = Tensor::new(shape, rng.normals(n, 1.0))?;
    out.mul(tape.constant(w))?.sum()
}

fn evaluate(op: &CheckedOp<'_>, inputs: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = scalarize(&tape, op(&tape, &vars)?)?;
    Ok(out.value().item())
}

/// Compares the tape gradient of `op` with central differences at every input
/// coordinate. Relative error is `|a − f| / max(1e-12, |a| + |f|)`.
pub fn grad_check(
    name: &str,
    op: &CheckedOp<'_>,
    inputs: &[Tensor],
    fd_step: f64,
    tol: f64,
) -> Result<GradReport> {
    if !(fd_step > 0.0) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric(format!("{name}: non-finite input")));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = scalarize(&tape, op(&tape, &vars)?)?;
        if !out.value().is_finite() {
            return Err(Error::Numeric(format!("{name}: non-finite output")));
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let mut work = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    let mut flat = 0usize;
    for (i, g) in analytic.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "{name}: non-finite analytic gradient"
            )));
        }
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + fd_step;
            let plus = evaluate(op, &work)?;
            work[i].data_mut()[j] = orig - fd_step;
            let minus = evaluate(op, &work)?;
            work[i].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "{name}: non-finite perturbed output"
                )));
            }
            let fd = (plus - minus) / (2.0 * fd_step);
            let a = g.data()[j];
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
                worst = flat;
            }
            flat += 1;
        }
    }
    Ok(GradReport {
        op_name: name.to_string(),
        max_rel_err: max_rel,
        worst_index: worst,
        passed: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero() {
        let op = checked_op(|_, v| v[0].sigmoid());
        let r = grad_check(
            "sigmoid",
            &op,
            &[Tensor::scalar(0.0)],
            DEFAULT_FD_STEP,
            1e-8,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Wrong;
        impl crate::autodiff::CustomOp for Wrong {
            fn name(&self) -> &'static str {
                "wrong"
            }
            fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
                vec![Some(g.scale(3.0))]
            }
        }
        let op = checked_op(|tape, v| {
            let y = v[0].value().scale(2.0);
            Ok(tape.custom(&[v[0]], y, Box::new(Wrong)))
        });
        let r = grad_check(
            "wrong",
            &op,
            &[Tensor::row_vector(vec![1.0, 2.0])],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let op = checked_op(|_, v| v[0].sigmoid());
        assert!(grad_check("s", &op, &[Tensor::scalar(f64::NAN)], 1e-5, 1e-4).is_err());
    }
}
