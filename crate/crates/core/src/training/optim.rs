//! AdamW with decoupled weight decay and linear warmup.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// `lr · min(1, (step + 1) / warmup)`; flat once warm.
pub fn lr_at(base_lr: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        return base_lr;
    }
    base_lr * ((step + 1) as f64 / warmup as f64).min(1.0)
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new<F: Scalar>(config: AdamWConfig, params: &[&Tensor<F>]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every parameter; moments are kept in 64-bit.
    pub fn step<F: Scalar>(
        &mut self,
        params: &mut [&mut Tensor<F>],
        grads: &[&Tensor<F>],
        lr: f64,
    ) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TrainError::Optimizer(format!(
                "expected {} parameter/gradient pairs, got {}/{}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(TrainError::Optimizer(format!(
                    "shape mismatch for parameter {i}: {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &gr), (mj, vj)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gr = gr.as_f64();
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gr;
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gr * gr;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                let mut x = w.as_f64();
                x -= lr * c.weight_decay * x;
                x -= lr * mhat / (vhat.sqrt() + c.eps);
                *w = F::from_f64_lossy(x);
            }
        }
        Ok(())
    }
}
