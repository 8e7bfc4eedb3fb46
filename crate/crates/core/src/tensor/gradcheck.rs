//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker is deliberately independent of the backward implementation:
//! it re-runs the forward closure on a fresh tape for every perturbed
//! coordinate and compares central differences against the analytic
//! gradients from one backward pass.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Compare analytic gradients of a scalar-valued computation against
/// central finite differences.
///
/// `build` must construct the same computation every time it is called:
/// it receives a fresh tape plus ids for `inputs` (in order) and returns
/// the scalar output id. All inputs are treated as differentiable.
///
/// Returns the maximum over all input coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// `eps` outside `[1e-6, 1e-3]` is rejected: larger steps lose truncation
/// accuracy, smaller ones drown in f64 rounding error.
pub fn check_gradients<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "gradient check step {eps:e} outside supported range [1e-6, 1e-3]"
        )));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let out = build(&mut tape, &ids);
    if tape.data(out).len() != 1 {
        return Err(Error::Config(format!(
            "gradient check requires a scalar output, got shape {:?}",
            tape.shape(out)
        )));
    }
    let f0 = tape.data(out)[0];
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            context: "gradient check: forward value".into(),
        });
    }
    tape.backward(out);
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            tape.grad(id)
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    // Numeric pass: one forward per perturbed coordinate and sign.
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|t| tape.leaf(t, false)).collect();
        let out = build(&mut tape, &ids);
        let v = tape.data(out)[0];
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "gradient check: perturbed forward value".into(),
            });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
