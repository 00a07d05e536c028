use super::params::{Grads, ParamId, ParamStore};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Adam moments for a fixed subset of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Parameters this state updates, in order.
    pub params: Vec<ParamId>,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, params: Vec<ParamId>) -> Self {
        Self::with_hyper(store, params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(
        store: &ParamStore<T>,
        params: Vec<ParamId>,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Self {
        let zeros: Vec<Vec<T>> = params
            .iter()
            .map(|&id| vec![T::zero(); store.get(id).values.len()])
            .collect();
        Self {
            step_count: 0,
            beta1,
            beta2,
            epsilon,
            params,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One bias-corrected Adam update of the parameters tracked by `state`.
/// Parameters outside `state.params` are left untouched.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Grads<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for &id in &state.params {
        let g = grads.get(id);
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at element {pos}",
                store.get(id).name
            )));
        }
        if g.len() != store.get(id).values.len() {
            return Err(Error::shape("adam_step", store.get(id).name.clone()));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let b1 = T::lit(state.beta1);
    let b2 = T::lit(state.beta2);
    let one = T::one();
    let bc1 = T::lit(1.0 - state.beta1.powi(t));
    let bc2 = T::lit(1.0 - state.beta2.powi(t));
    let eps = T::lit(state.epsilon);
    let lr = T::lit(lr);
    for (slot, &id) in state.params.iter().enumerate() {
        let g = grads.get(id);
        let m = &mut state.first_moment[slot];
        let v = &mut state.second_moment[slot];
        let p = &mut store.get_mut(id).values;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
