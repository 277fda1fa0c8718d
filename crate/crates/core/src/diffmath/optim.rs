//! AdamW: Adam with weight decay applied to the parameters directly rather
//! than folded into the gradient moments.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 5e-5,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    shapes: Vec<Vec<usize>>,
    initialized: bool,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            shapes: Vec::new(),
            initialized: false,
        }
    }

    /// Allocates zeroed moment buffers matching `params`.
    pub fn init(&mut self, params: &[Tensor<T>]) {
        self.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        self.second = self.first.clone();
        self.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
        self.step = 0;
        self.initialized = true;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if !self.initialized {
            return Err(Error::Optimizer("state not initialized".into()));
        }
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(Error::Optimizer(format!(
                "expected {} parameters, got {} params and {} grads",
                self.shapes.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.shapes[i] || g.shape() != self.shapes[i] {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: self.shapes[i].clone(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let f = T::from_f64_lossy;
        let (b1, b2) = (f(c.betas.0), f(c.betas.1));
        let lr = f(c.learning_rate);
        let decay = f(c.learning_rate * c.weight_decay);
        let bc1 = f(1.0 - c.betas.0.powi(self.step as i32));
        let bc2 = f(1.0 - c.betas.1.powi(self.step as i32));
        let eps = f(c.epsilon);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *w = *w - decay * *w;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
