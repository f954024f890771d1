//! Adam updates over the parameter tensors.

use ndarray::{Array1, Array2};

use super::Gradients;
use crate::error::{Error, Result};
use crate::model::ModelParams;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment accumulators mirroring every parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m_user: Array2<f64>,
    v_user: Array2<f64>,
    m_weights: Vec<Array2<f64>>,
    v_weights: Vec<Array2<f64>>,
    m_biases: Vec<Array1<f64>>,
    v_biases: Vec<Array1<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m_user: Array2::zeros(params.user_embeddings.raw_dim()),
            v_user: Array2::zeros(params.user_embeddings.raw_dim()),
            m_weights: params.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            v_weights: params.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            m_biases: params.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            v_biases: params.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam step. Rejects non-finite gradients before
/// touching any state.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ModelParams,
    grads: &Gradients,
    lr: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite gradient at step {}",
            state.step + 1
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);

    update_tensor(
        params.user_embeddings.as_slice_mut().expect("contiguous"),
        grads.user_embeddings.as_slice().expect("contiguous"),
        state.m_user.as_slice_mut().expect("contiguous"),
        state.v_user.as_slice_mut().expect("contiguous"),
        lr,
        bc1,
        bc2,
    );
    for m in 0..params.weights.len() {
        update_tensor(
            params.weights[m].as_slice_mut().expect("contiguous"),
            grads.weights[m].as_slice().expect("contiguous"),
            state.m_weights[m].as_slice_mut().expect("contiguous"),
            state.v_weights[m].as_slice_mut().expect("contiguous"),
            lr,
            bc1,
            bc2,
        );
        update_tensor(
            params.biases[m].as_slice_mut().expect("contiguous"),
            grads.biases[m].as_slice().expect("contiguous"),
            state.m_biases[m].as_slice_mut().expect("contiguous"),
            state.v_biases[m].as_slice_mut().expect("contiguous"),
            lr,
            bc1,
            bc2,
        );
    }
    Ok(())
}

fn update_tensor(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
}
