//! Adam with bias correction.

use crate::model::ModelParameters;
use crate::tensor::Tensor;
use indexmap::IndexMap;

pub const ADAM_EPS: f64 = 1e-8;

/// Gradient per parameter name.
pub type GradMap = IndexMap<String, Tensor<f32>>;

/// First/second moment estimates, allocated lazily per parameter.
#[derive(Debug, Default)]
pub struct AdamState {
    step: u64,
    m: IndexMap<String, Tensor<f32>>,
    v: IndexMap<String, Tensor<f32>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. Parameters without a gradient entry (frozen groups)
/// are left untouched.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &GradMap,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (beta1 as f32).powi(t);
    let bc2 = 1.0 - (beta2 as f32).powi(t);
    let (b1, b2) = (beta1 as f32, beta2 as f32);
    let (lr, eps) = (lr as f32, eps as f32);

    for (name, g) in grads {
        let p = match params.get_mut(name) {
            Some(p) => p,
            None => continue,
        };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
