//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Checks an analytic gradient against central differences.
///
/// `eval` maps a candidate tensor to the scalar loss; `analytic` is the
/// gradient w.r.t. `x` produced by a backward pass. Returns the maximum over
/// coordinates of |analytic − numeric| / max(1e-8, |analytic| + |numeric|),
/// with numeric = (f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps).
pub fn grad_check(
    mut eval: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    analytic: &Tensor,
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::domain("grad_check: eps must be positive"));
    }
    if x.shape() != analytic.shape() {
        return Err(Error::shape(
            "grad_check",
            format!("x {:?} vs analytic {:?}", x.shape(), analytic.shape()),
        ));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss near coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / 1e-8f64.max(a.abs() + numeric.abs());
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
