//! Plain stochastic gradient descent over named parameter collections.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// In-place SGD update: `p <- p - lr * g` for every named parameter.
///
/// The gradient map must contain exactly the same keys as the parameter map,
/// with matching shapes; any mismatch is rejected before any parameter is
/// touched.
pub fn sgd_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    learning_rate: f64,
) -> Result<()> {
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive and finite, got {learning_rate}"
        )));
    }
    for name in params.keys() {
        if !grads.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "no gradient supplied for parameter {name:?}"
            )));
        }
    }
    for (name, grad) in grads {
        let Some(param) = params.get(name) else {
            return Err(Error::InvalidArgument(format!(
                "gradient {name:?} has no matching parameter"
            )));
        };
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name:?} has shape {:?} but gradient has shape {:?}",
                param.shape(),
                grad.shape()
            )));
        }
    }
    for (name, grad) in grads {
        let param = params.get_mut(name).expect("validated above");
        for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
            *p -= learning_rate * g;
        }
    }
    Ok(())
}
