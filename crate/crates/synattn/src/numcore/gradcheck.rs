//! Central-difference verification of tape gradients.

use super::tape::{Tape, VarId};
use super::tensor::{NumError, Tensor};

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate. Returns the maximum
/// relative error, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, NumError>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId, NumError>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = f(&mut tape, xv)?;
    if !tape.value(out).is_scalar() {
        return Err(NumError::NonScalarOutput(tape.value(out).shape().to_vec()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zero(xv, x.shape());

    let eval = |pt: &Tensor| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let xv = tape.input(pt.clone());
        let out = f(&mut tape, xv)?;
        Ok(tape.value(out).item())
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    Ok(max_rel)
}
