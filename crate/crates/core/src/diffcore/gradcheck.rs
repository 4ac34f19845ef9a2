use std::fmt::Display;

use super::{DiffError, NdArray, Tape, Var};

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// central differences with step `h`, measured as
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F, E>(f: F, x: &NdArray, h: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: Display,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(DiffError::StepSize(h));
    }
    let eval = |point: &NdArray| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let leaf = tape.constant(point.clone());
        let out = f(&mut tape, leaf).map_err(|e| DiffError::Eval(e.to_string()))?;
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: value.shape().to_vec(),
            });
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(DiffError::NonFinite {
                what: "objective".into(),
                index: 0,
            });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf).map_err(|e| DiffError::Eval(e.to_string()))?;
    tape.value(out).check_finite("objective")?;
    tape.backward(out)?;
    let analytic = tape.grad(leaf).cloned().unwrap_or_else(|| NdArray::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
