use super::{Tape, Tensor, Var};
use crate::error::{Result, TspmError};

/// Compare tape gradients of a scalar function against central differences.
///
/// `f` builds the function on a fresh tape from the recorded input `x`.
/// Returns the max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe);
        let y = f(&mut tape, v)?;
        let out = tape.value(y);
        if out.numel() != 1 {
            return Err(TspmError::Contract("gradient check needs a scalar function".into()));
        }
        Ok(out.data()[0] as f64)
    };

    let mut worst = 0f32;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        // Use the actually representable step, not the nominal h.
        let step = plus.data()[i] as f64 - minus.data()[i] as f64;
        let numeric = (eval(plus)? - eval(minus)?) / step;
        let a = analytic[i] as f64;
        let err = ((a - numeric).abs() / a.abs().max(1.0)) as f32;
        worst = worst.max(err);
    }
    Ok(worst)
}
