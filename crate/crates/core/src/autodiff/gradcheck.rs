//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{contract_err, Error, Result};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// `max_i |a_i − n_i| / max(1, |a_i| + |n_i|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

/// Compares `analytic` against central differences of `f` around `x`.
pub fn compare_with_central_differences<F>(
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    mut f: F,
) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(contract_err!(
            "finite-difference step {eps} outside [1e-7, 1e-4]"
        ));
    }
    if x.len() != analytic.len() {
        return Err(contract_err!(
            "{} analytic entries for {} coordinates",
            analytic.len(),
            x.len()
        ));
    }
    let mut probe = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    let (mut worst, mut worst_index) = (0.0, 0);
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("objective not finite at probe {i}")));
        }
        let n = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[i], n);
        if err > worst {
            worst = err;
            worst_index = i;
        }
        numeric.push(n);
    }
    Ok(GradReport {
        max_rel_error: worst,
        worst_index,
        analytic: analytic.to_vec(),
        numeric,
    })
}

/// Checks the reverse-mode gradient of a scalar function of one tensor.
pub fn grad_check_report<F>(f: F, x: &Tensor, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = tape.grad(leaf).expect("leaf requires grad").to_vec();
    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(x.shape().to_vec(), data.to_vec())?);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };
    compare_with_central_differences(x.data(), &analytic, eps, eval)
}

/// Maximum relative error between analytic and central-difference gradients.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_report(f, x, eps).map(|r| r.max_rel_error)
}
