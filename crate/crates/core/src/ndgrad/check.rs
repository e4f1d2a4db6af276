//! Central finite-difference checks of tape gradients in f64.

use alloc::vec::Vec;
use num_traits::Float;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Relative errors below this magnitude of gradient are measured against it
/// instead, so entries that are zero up to rounding do not blow up.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

fn eval(inputs: &[Tensor<f64>], f: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new().with_finite_checks(false);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(contract("gradient check needs a scalar function"));
    }
    Ok(v[0])
}

/// Compares the tape gradient of the scalar function `f` with central
/// differences of step `h`, entry by entry over every input.
pub fn gradient_check(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    h: f64,
) -> Result<GradCheck> {
    let params: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().into_param()).collect();
    let mut tape = Tape::new().with_finite_checks(false);
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let zeros = alloc::vec![0.0; params[k].len()];
        let analytic = tape.grad(var).unwrap_or(&zeros);
        for (j, &a) in analytic.iter().enumerate() {
            let x = inputs[k].data()[j];
            probe[k].data_mut()[j] = x + h;
            let up = eval(&probe, &f)?;
            probe[k].data_mut()[j] = x - h;
            let down = eval(&probe, &f)?;
            probe[k].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let abs = Float::abs(a - numeric);
            let scale = Float::abs(a).max(Float::abs(numeric)).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(abs / scale);
            report.entries += 1;
        }
    }
    Ok(report)
}
