//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers for a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'s>(config: AdamConfig, shapes: impl IntoIterator<Item = &'s [usize]>) -> Self {
        let first: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        let second = first.clone();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// Applies one update to `params` in place. `params` and `grads` must be
    /// in the same order, with the shapes given at construction.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
    ) -> Result<(), NumericsError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(NumericsError::Shape {
                op: "adam_step",
                detail: format!(
                    "{} moment buffers, {} params, {} grads",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != self.first[i].shape() {
                return Err(NumericsError::Shape {
                    op: "adam_step",
                    detail: format!(
                        "parameter {i}: moments {:?}, param {:?}, grad {:?}",
                        self.first[i].shape(),
                        p.shape(),
                        g.shape()
                    ),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gr), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * gr;
                *v = beta2 * *v + (1.0 - beta2) * gr * gr;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
