//! Central finite-difference validation of recorded gradients.

use super::{ops::sum_all, Tensor};
use crate::error::{Error, Result};

/// Outcome of one gradient check. The comparison passes when the largest
/// relative error over all checked elements stays within `tol`.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compare the recorded gradient of `sum(f(inputs))` against central finite
/// differences, perturbing every element of every grad-requiring input.
/// `f` must be a pure function of the input values.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let out = f(inputs)?;
        out.check_finite("grad_check")?;
        Ok(out.data().iter().sum())
    };

    for t in inputs {
        t.zero_grad();
    }
    let out = f(inputs)?;
    out.check_finite("grad_check")?;
    let loss = sum_all(&out);
    loss.backward();

    let analytic: Vec<Option<Vec<f64>>> = inputs
        .iter()
        .map(|t| {
            if t.requires_grad() {
                Some(t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            } else {
                None
            }
        })
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut per_input = vec![0.0f64; inputs.len()];
    for (i, t) in inputs.iter().enumerate() {
        let Some(grads) = &analytic[i] else { continue };
        for e in 0..t.numel() {
            let orig = t.data()[e];
            t.set_data(|d| d[e] = orig + eps);
            let plus = eval(inputs)?;
            t.set_data(|d| d[e] = orig - eps);
            let minus = eval(inputs)?;
            t.set_data(|d| d[e] = orig);
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let r = rel_err(grads[e], numeric);
            per_input[i] = per_input[i].max(r);
            max_rel = max_rel.max(r);
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        tol,
        checked,
        per_input,
    })
}
