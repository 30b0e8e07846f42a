//! Central finite differences against tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Kink distance recorded while building the unperturbed tape.
    pub kink_margin: f64,
}

/// Compares the tape gradient of the scalar `f` at `inputs` with central
/// differences, perturbing every coordinate of every input.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let kink_margin = tape.kink_margin();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let r = f(&mut t, &vs)?;
        let v = t.value(r);
        if v.len() != 1 {
            return Err(Error::Usage(format!("function output must be scalar, got {:?}", v.shape)));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::Numeric {
                op: "finite_diff_check".into(),
                detail: "function is non-finite at a perturbed point".into(),
            });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for j in 0..inputs[i].len() {
            let orig = work[i].data[j];
            work[i].data[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(FdReport {
        max_rel_error: worst,
        kink_margin,
    })
}
