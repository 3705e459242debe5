//! Adam optimizer with bias correction. Moments are kept in f64 regardless
//! of the parameter precision; frozen parameters are never touched.

use crate::error::{DparnError, Result};
use crate::tensor::{ParamSet, Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Debug)]
pub struct AdamState {
    config: AdamConfig,
    /// First/second moment per parameter, allocated lazily at first use.
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    step: usize,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &ParamSet<T>, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update over all trainable parameters. `grads[i]` is the gradient
    /// for parameter i (None means no gradient flowed: treated as zero).
    /// Non-finite gradients abort with the offending parameter name.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.config.beta1.powi(t);
        let bc2 = 1.0 - self.config.beta2.powi(t);
        let ids: Vec<usize> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let name = params.get(id).name.clone();
            let n = params.get(id).value.numel();
            let grad: Vec<f64> = match &grads[id] {
                Some(g) => {
                    if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
                        return Err(DparnError::Divergence {
                            step: self.step,
                            what: format!("non-finite gradient {bad} in parameter '{name}'"),
                        });
                    }
                    g.data().iter().map(|v| v.to_f64()).collect()
                }
                None => vec![0.0; n],
            };
            let m = self.m[id].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id].get_or_insert_with(|| vec![0.0; n]);
            let mut new_value = Vec::with_capacity(n);
            let old = params.get(id).value.data();
            for i in 0..n {
                m[i] = self.config.beta1 * m[i] + (1.0 - self.config.beta1) * grad[i];
                v[i] = self.config.beta2 * v[i] + (1.0 - self.config.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let update = lr * m_hat / (v_hat.sqrt() + self.config.eps);
                new_value.push(T::from_f64(old[i].to_f64() - update));
            }
            let shape = params.get(id).value.shape().to_vec();
            params.set_value(id, Tensor::from_vec(shape, new_value)?);
        }
        Ok(())
    }
}

/// Global L2-norm gradient clipping: returns the scale factor applied.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for v in g.data() {
            sq += v.to_f64() * v.to_f64();
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut().flatten() {
        *g = g.map(|v| v * T::from_f64(scale));
    }
    scale
}
