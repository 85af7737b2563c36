//! Central-difference gradient checking utilities.
//!
//! These exist to validate the tape's reverse sweep against an independent
//! numerical estimate; they are slow by construction and meant for tests.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::math;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Numerically estimates `d f / d x` one coordinate at a time using central
/// differences `(f(x + h e_i) - f(x - h e_i)) / (2h)`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "finite difference step must be positive and finite, got {step}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = original - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = original;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}

/// Norm-based relative error between two tensors of identical shape:
/// `|a - b| / max(|a|, |b|, floor)` with a small floor so that two
/// near-zero gradients compare as equal.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "relative_error: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let denom = math::sqrt(na).max(math::sqrt(nb)).max(1e-8);
    Ok(math::sqrt(diff) / denom)
}

/// Compares the tape's analytic gradients against central differences for
/// every declared input and returns the worst per-input relative error.
pub fn tape_gradient_error(
    tape: &Tape,
    bindings: &BTreeMap<String, Tensor>,
    output: NodeId,
    step: f64,
) -> Result<f64> {
    let analytic = tape.gradient(bindings, output)?;
    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        let base = bindings
            .get(name)
            .ok_or_else(|| Error::MissingInput(name.clone()))?;
        let mut scratch = bindings.clone();
        let numeric = finite_difference_gradient(
            |probe: &Tensor| {
                scratch.insert(name.clone(), probe.clone());
                let eval = tape.evaluate(&scratch)?;
                eval.value(output).scalar_value()
            },
            base,
            step,
        )?;
        worst = worst.max(relative_error(grad, &numeric)?);
    }
    Ok(worst)
}
