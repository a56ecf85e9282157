//! Central-difference gradient checking for taped scalar functions.

use super::{Scalar, Tape, Tensor, ValueId};
use crate::{Error, Result};

/// Compare tape gradients of `f` at `point` against central finite
/// differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh tape and the id of the input leaf and must return a
/// scalar output id; any randomness inside `f` must be internally seeded so
/// repeated evaluations see identical draws. Returns the maximum
/// per-coordinate deviation relative to the larger of the two gradients'
/// max-norms (0 when both gradients vanish).
pub fn check_gradients<S: Scalar>(
    f: impl Fn(&mut Tape<S>, ValueId) -> Result<ValueId>,
    point: &Tensor<S>,
    h: f64,
) -> Result<f64> {
    let eval = |t: &Tensor<S>| -> Result<S> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone());
        let y = f(&mut tape, x)?;
        tape.value(y).item()
    };

    // analytic
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::Shape("check_gradients needs a scalar function".into()));
    }
    let grads = tape.backward(y)?;
    let analytic: Vec<f64> = match grads.wrt(x) {
        Some(g) => g.data().iter().map(|v| v.to_f64()).collect(),
        None => vec![0.0; point.numel()],
    };

    // numeric
    let mut numeric = vec![0.0f64; point.numel()];
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + S::from_f64(h);
        let up = eval(&probe)?.to_f64();
        probe.data_mut()[i] = orig - S::from_f64(h);
        let down = eval(&probe)?.to_f64();
        probe.data_mut()[i] = orig;
        numeric[i] = (up - down) / (2.0 * h);
    }

    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok(0.0);
    }
    let max_dev = analytic
        .iter()
        .zip(numeric.iter())
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    Ok(max_dev / scale)
}
