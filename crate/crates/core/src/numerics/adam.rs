use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::{Scalar, Tensor};

/// First/second moment estimates for every parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update of every parameter from its gradient buffer; gradients
/// are zeroed afterwards.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::TrainingState(format!("parameter `{name}` has no gradient")));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let step_size = T::of(state.lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(state.epsilon);
    for (name, p) in params.iter_mut() {
        let grad = p.grad.as_mut().expect("checked above");
        let (m, v) = state.moments.entry(name.to_string()).or_insert_with(|| {
            (
                Tensor::zeros(p.value.shape().to_vec()),
                Tensor::zeros(p.value.shape().to_vec()),
            )
        });
        if m.shape() != p.value.shape() {
            return Err(Error::TrainingState(format!("moment shape mismatch for `{name}`")));
        }
        let g = grad.data();
        for (((w, mi), vi), &gi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g)
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
        grad.fill(T::zero());
    }
    Ok(())
}
