//! Adaptive-moment optimizer with decoupled weight decay and a linear warmup
//! followed by a constant rate.

use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            warmup_steps: 100,
            total_steps: 5000,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push("optimizer.learning_rate must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("optimizer.{name} must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            out.push("optimizer.weight_decay must be non-negative".into());
        }
        if !(self.eps > 0.0) {
            out.push("optimizer.eps must be positive".into());
        }
        if self.total_steps < self.warmup_steps {
            out.push(format!(
                "optimizer.total_steps {} must be at least optimizer.warmup_steps {}",
                self.total_steps, self.warmup_steps
            ));
        }
        out
    }

    /// Learning rate for 1-based update number `step`.
    pub fn rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimizerConfig,
    step: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update from the accumulated gradients in `params`.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.rate_at(self.step);
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let decay = if p.decay { lr * c.weight_decay } else { 0.0 };
            let grads = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bias1) / ((*v / bias2).sqrt() + c.eps);
                let x = w.as_f64();
                *w = T::of(x - decay * x - lr * update);
            }
        }
    }
}
