use serde::{Deserialize, Serialize};

use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the learning rate ramps linearly up from zero.
    pub warmup_steps: usize,
    /// Global gradient-norm limit; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            max_grad_norm: Some(1.0),
        }
    }
}

/// Adam over a fixed list of tensors. Moments are kept in 64-bit.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
    updates: u64,
}

impl Adam {
    pub fn new<F: Scalar>(config: AdamConfig, params: &[Tensor<F>]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: vec![0; params.len()],
            updates: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Learning rate for the next update.
    pub fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps as f64;
        if w == 0.0 {
            self.config.lr
        } else {
            self.config.lr * ((self.updates + 1) as f64 / w).min(1.0)
        }
    }

    /// Applies one update. `grads[i]` is `None` or ignored when tensor `i` is
    /// not in `active`. Returns the pre-clip gradient norm over active tensors.
    pub fn step<F: Scalar>(&mut self, params: &mut [Tensor<F>], grads: &[Option<Vec<f64>>], active: &[bool]) -> f64 {
        assert_eq!(params.len(), self.m.len(), "parameter list changed");
        assert_eq!(grads.len(), params.len());
        assert_eq!(active.len(), params.len());
        let norm = grads
            .iter()
            .zip(active)
            .filter(|(_, &a)| a)
            .filter_map(|(g, _)| g.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let scale = match self.config.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let lr = self.current_lr();
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        for i in 0..params.len() {
            if !active[i] {
                continue;
            }
            let Some(grad) = grads[i].as_ref() else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in params[i].values_mut().iter_mut().enumerate() {
                let gj = grad[j] * scale;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let upd = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                *p = F::of(p.f64() - upd);
            }
        }
        self.updates += 1;
        norm
    }
}
