use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 2e-5, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update with decoupled weight decay:
    /// `p ← p − lr·(m̂/(√v̂ + eps) + wd·p)`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(
                "adamw_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::contract("adamw_step", "parameter count changed between steps"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || m.len() != p.numel() {
                return Err(Error::contract(
                    "adamw_step",
                    format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }

        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let one = T::one();
        let correct1 = one - b1.powi(self.step);
        let correct2 = one - b2.powi(self.step);
        let (lr, wd, eps) = (T::of(c.lr), T::of(c.weight_decay), T::of(c.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / correct1;
                let v_hat = v[j] / correct2;
                *w = *w - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }
}
