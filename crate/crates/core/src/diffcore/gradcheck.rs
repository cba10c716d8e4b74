// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference checks for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor relative to `max(1, |f|)`, below which round-off in `f`
/// swamps the central difference.
pub const FD_FLOOR: f64 = 1e-4;

/// Relative disagreement `|a − n| / max(|a|, |n|, FD_FLOOR · max(1, |f|))`.
pub fn relative_error(analytic: f64, numeric: f64, value: f64) -> f64 {
    let floor = FD_FLOOR * value.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst per-entry [`relative_error`] between the tape gradient and the
/// central difference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares ∂f/∂inputs from the tape against central differences with step
/// `step`. `f` must build a scalar from the given input vars.
pub fn check_gradients<F>(f: F, inputs: &[Tensor2], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor2]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut probe: Vec<Tensor2> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k], input);
        for e in 0..input.data().len() {
            let orig = input.data()[e];
            probe[k].data_mut()[e] = orig + step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[e] = orig - step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[e], numeric, value));
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        entries,
    })
}
