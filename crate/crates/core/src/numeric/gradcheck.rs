use crate::error::{Error, Result};
use crate::numeric::ParamSet;

/// A scalar function of a [`ParamSet`] with an analytic gradient.
pub trait Objective {
    fn value(&mut self, params: &ParamSet) -> Result<f64>;

    /// Value plus gradient, with the gradient keyed by the same names as `params`.
    fn value_and_grad(&mut self, params: &ParamSet) -> Result<(f64, ParamSet)>;
}

/// Compare the analytic gradient with central differences of step `h`.
///
/// Returns `max |analytic - fd| / max(|analytic|, |fd|, GRAD_FLOOR)` over every
/// scalar parameter.
pub const GRAD_FLOOR: f64 = 1e-8;

pub fn grad_check(f: &mut impl Objective, params: &ParamSet, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let (v0, grads) = f.value_and_grad(params)?;
    if !v0.is_finite() {
        return Err(Error::ObjectiveNotFinite);
    }
    let base = params.flatten();
    let analytic = {
        let mut flat = Vec::with_capacity(base.len());
        for name in params.names() {
            flat.extend_from_slice(grads.require(name)?.data());
        }
        flat
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut point = base.clone();
    for j in 0..base.len() {
        point[j] = base[j] + h;
        probe.assign_flat(&point)?;
        let plus = f.value(&probe)?;
        point[j] = base[j] - h;
        probe.assign_flat(&point)?;
        let minus = f.value(&probe)?;
        point[j] = base[j];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::ObjectiveNotFinite);
        }
        let fd = (plus - minus) / (2.0 * h);
        let err = (analytic[j] - fd).abs() / fd.abs().max(analytic[j].abs()).max(GRAD_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
