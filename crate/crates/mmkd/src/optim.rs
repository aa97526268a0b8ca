//! Adam with decoupled weight decay and a linear-warmup, polynomial-decay
//! learning-rate schedule. Optimizer moments are plain named tensors so a
//! checkpoint can resume the exact trajectory.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{MmkdError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub poly_exponent: f64,
}

impl OptimConfig {
    pub fn new(lr: f64, warmup_steps: u64, total_steps: u64) -> OptimConfig {
        OptimConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps,
            total_steps,
            poly_exponent: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.total_steps == 0 {
            return Err(MmkdError::Config(
                "lr must be > 0 and total_steps >= 1".into(),
            ));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(MmkdError::Config(
                "warmup_steps must be < total_steps".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate for 0-based step: linear ramp over the warmup window,
    /// then lr·(1 - progress)^exponent over the remainder.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr * (1.0 - progress).powf(self.poly_exponent)
    }
}

pub struct AdamW {
    pub config: OptimConfig,
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Result<AdamW> {
        config.validate()?;
        Ok(AdamW {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    /// One update over every parameter with a gradient; missing gradients
    /// leave the parameter (and its moments) untouched.
    pub fn apply(
        &mut self,
        params: &mut BTreeMap<String, ArrayD<f64>>,
        grads: &BTreeMap<String, ArrayD<f64>>,
    ) -> Result<()> {
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(MmkdError::Contract(format!(
                    "gradient shape mismatch for parameter {name}"
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                // decoupled decay: applied directly to the weights, not the
                // gradient moments
                *pv -= lr
                    * (m_hat / (v_hat.sqrt() + self.config.eps) + self.config.weight_decay * *pv);
            }
        }
        Ok(())
    }
}
