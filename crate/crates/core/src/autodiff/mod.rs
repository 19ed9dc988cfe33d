//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Training runs in `f32`; the same graph code instantiates with `f64` for
//! verification, where gradients can be compared against central finite
//! differences at tight tolerances.

mod tape;
mod tensor;

use std::fmt::{Debug, Display};

use num_traits::Float;

use crate::error::{Error, Result};

pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

/// Scalar type of the numerical core.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Central finite differences `(f(x+h) - f(x-h)) / 2h` for every
/// component of every listed leaf, in listing order. The tape is replayed
/// per perturbation and restored afterwards.
pub fn numeric_gradients<S: Real>(
    tape: &mut Tape<S>,
    loss: Var,
    params: &[Var],
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    if h <= 0.0 {
        return Err(Error::Domain(format!("step size {h} must be positive")));
    }
    let mut out = Vec::with_capacity(params.len());
    for &p in params {
        let n = tape.value(p).len();
        let mut grads = Vec::with_capacity(n);
        for idx in 0..n {
            tape.nudge_leaf(p, idx, h);
            tape.replay()?;
            let f_plus = tape.value(loss).item().as_f64();
            tape.nudge_leaf(p, idx, -2.0 * h);
            tape.replay()?;
            let f_minus = tape.value(loss).item().as_f64();
            tape.nudge_leaf(p, idx, h);
            grads.push((f_plus - f_minus) / (2.0 * h));
        }
        out.push(grads);
    }
    tape.replay()?;
    Ok(out)
}

/// Largest componentwise deviation between two gradient sets, where the
/// error for one component is `|a - n| / max(|a|, |n|, floor)`: relative
/// for well-scaled gradients, absolute at `floor` for components too small
/// for finite differences to resolve. Pick `floor` around `1e-3` times
/// the typical gradient magnitude.
pub fn max_gradient_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> f64 {
    let mut max_err = 0.0f64;
    for (arow, nrow) in analytic.iter().zip(numeric) {
        for (&a, &n) in arow.iter().zip(nrow) {
            let denom = a.abs().max(n.abs()).max(floor);
            let err = (a - n).abs() / denom;
            if err > max_err {
                max_err = err;
            }
        }
    }
    max_err
}

/// Compares the tape's analytic gradients against central finite
/// differences and returns the largest relative error (see
/// [`max_gradient_error`] for the exact definition).
pub fn finite_difference_check<S: Real>(
    tape: &mut Tape<S>,
    loss: Var,
    params: &[Var],
    h: f64,
    floor: f64,
) -> Result<f64> {
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&p| {
            tape.grad(p)
                .map(|g| g.data().iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; tape.value(p).len()])
        })
        .collect();
    let numeric = numeric_gradients(tape, loss, params, h)?;
    Ok(max_gradient_error(&analytic, &numeric, floor))
}
