use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias correction and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_hyper(store, 0.9, 0.999, 1e-8, 0.01)
    }

    pub fn with_hyper(
        store: &ParamStore,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        weight_decay: f64,
    ) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamState {
            step: 0,
            beta1,
            beta2,
            epsilon,
            weight_decay,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }
}

/// One Adam update of every parameter in `store` from its accumulated gradient.
///
/// Gradients are validated before anything is touched, so a NaN leaves both
/// the parameters and the optimizer state unchanged.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be >= 0")));
    }
    if state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (_, p) in store.iter() {
        if p.grad.data().iter().any(|g| g.is_nan()) {
            return Err(Error::NonFinite(format!("NaN gradient in parameter {}", p.name)));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.epsilon, state.weight_decay);

    for (i, p) in store.params_mut().iter_mut().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let decay = if p.kind.decays() { wd } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let values = p.value.data_mut();
        for (j, &g0) in p.grad.data().iter().enumerate() {
            let g = g0 + decay * values[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
