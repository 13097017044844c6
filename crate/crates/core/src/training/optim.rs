use serde::{Deserialize, Serialize};

use crate::model::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to parameters flagged for it (never
    /// biases or norm gains).
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            ));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(format!("grad clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Moment buffers are created lazily for
/// the parameters that receive gradients.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips `grads` in place if configured and returns the pre-clip norm.
    pub fn clip(&self, grads: &mut Grads) -> f64 {
        let norm = grads.global_norm();
        if let Some(max) = self.cfg.grad_clip {
            if norm > max {
                grads.scale(max / norm);
            }
        }
        norm
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads.iter() {
            let idx = id.0;
            if self.moments.len() <= idx {
                self.moments.resize_with(idx + 1, || None);
            }
            let (m, v) =
                self.moments[idx].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let decay = if p.decay { lr * c.weight_decay } else { 0.0 };
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= decay * p.data[i] + lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    LinearDecay,
    Constant,
}

impl Schedule {
    /// Rate for the update at 0-based `step` of `total`: linear decay starts
    /// at `base` and reaches exactly 0 at `step == total`.
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::LinearDecay => {
                if total == 0 || step >= total {
                    0.0
                } else {
                    base * (total - step) as f64 / total as f64
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TransformerModel};

    #[test]
    fn linear_schedule_endpoints() {
        let s = Schedule::LinearDecay;
        assert_eq!(s.lr_at(6.25e-5, 0, 100), 6.25e-5);
        assert_eq!(s.lr_at(6.25e-5, 100, 100), 0.0);
        assert!((s.lr_at(1.0, 50, 100) - 0.5).abs() < 1e-15);
        assert_eq!(Schedule::Constant.lr_at(1e-4, 99, 100), 1e-4);
    }

    fn tiny() -> TransformerModel {
        TransformerModel::new(ModelConfig {
            vocab_size: 16,
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            n_segments: 3,
            dropout: 0.0,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut model = tiny();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            grad_clip: None,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        let mut grads = Grads::for_trainable(model.params());
        let id = model.params().id("heads.mc.bias").unwrap();
        grads.raw_mut(id).unwrap()[0] = 3.0;
        let before = model.params().get(id).data[0];
        opt.update(model.params_mut(), &grads, 0.01);
        let after = model.params().get(id).data[0];
        assert!((before - after - 0.01).abs() < 1e-9);
    }

    #[test]
    fn decay_skips_biases_and_frozen_parameters() {
        let mut model = tiny();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        let grads = Grads::for_trainable(model.params());
        let w = model
            .params()
            .id("backbone.blocks.0.mlp.fc.weight")
            .unwrap();
        let b = model.params().id("backbone.blocks.0.ln1.bias").unwrap();
        let w0 = model.params().get(w).data.clone();
        let b0 = model.params().get(b).data.clone();
        opt.update(model.params_mut(), &grads, 0.1);
        let w1 = &model.params().get(w).data;
        assert!((w1[0] - w0[0] * 0.95).abs() < 1e-12);
        assert_eq!(model.params().get(b).data, b0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let model = tiny();
        let opt = AdamW::new(AdamWConfig::default());
        let mut grads = Grads::for_trainable(model.params());
        let id = model.params().id("heads.mc.bias").unwrap();
        grads.raw_mut(id).unwrap()[0] = 10.0;
        assert_eq!(opt.clip(&mut grads), 10.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
