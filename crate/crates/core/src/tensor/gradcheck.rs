//! Central finite-difference checks of tape gradients.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative gradient error over all `inputs`.
///
/// `f` records a scalar loss on a fresh tape from (possibly perturbed)
/// inputs and returns it together with the variable holding each input.
/// Per input the error is `max|analytic − numeric| / max(|analytic|, |numeric|)`,
/// the maxima running over that input's elements. Every element is perturbed
/// by `±step`, using the step actually representable in `T`.
pub fn gradient_error<T, F>(inputs: &[Tensor<T>], step: f64, f: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Tensor<T>]) -> Result<(Var, Vec<Var>)>,
{
    let mut tape = Tape::new();
    let (loss, vars) = f(&mut tape, inputs)?;
    if vars.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!("{} inputs but {} variables", inputs.len(), vars.len())));
    }
    let grads = tape.backward(loss)?;
    let eval = |k: usize, i: usize, v: T| -> Result<f64> {
        let mut p = inputs.to_vec();
        p[k].data_mut()[i] = v;
        let mut t = Tape::new();
        let (l, _) = f(&mut t, &p)?;
        Ok(t.value(l).data()[0].as_f64())
    };
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .ok_or_else(|| Error::InvalidArgument(format!("input {k} received no gradient")))?;
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for (i, &x) in input.data().iter().enumerate() {
            let hi = x + T::from_f64(step);
            let lo = x - T::from_f64(step);
            let numeric = (eval(k, i, hi)? - eval(k, i, lo)?) / (hi - lo).as_f64();
            let a = analytic.data()[i].as_f64();
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}
