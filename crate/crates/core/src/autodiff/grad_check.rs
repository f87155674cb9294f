use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Compare the tape gradient of a scalar function against central finite
/// differences at `point`. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` receives a fresh tape and the leaf holding the (possibly perturbed)
/// point, and must return a scalar node.
pub fn grad_check<F>(mut f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-8..=1e-3).contains(&step) {
        return Err(Error::Invalid(alloc::format!("finite-difference step {step} outside [1e-8, 1e-3]")));
    }
    let mut eval = |p: &Tensor, want_grad: bool| -> Result<(f64, Option<alloc::vec::Vec<f64>>)> {
        let mut tape = Tape::new();
        let x = tape.param(p.clone());
        let y = f(&mut tape, x)?;
        let out = tape.value(y);
        if out.len() != 1 {
            return Err(shape_err("grad_check", "function is not scalar-valued"));
        }
        let v = out.data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check function value"));
        }
        let g = if want_grad {
            let mut grads = tape.backward(y)?;
            Some(grads.take(x).unwrap_or_else(|| alloc::vec![0.0; p.len()]))
        } else {
            None
        };
        Ok((v, g))
    };

    let (_, analytic) = eval(point, true)?;
    let analytic = analytic.unwrap_or_default();
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let (plus, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig - step;
        let (minus, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::NonFinite("grad_check difference"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
