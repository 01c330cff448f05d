use alloc::vec;
use alloc::vec::Vec;

use super::params::ParamStore;
use super::tensor::Tensor;

/// AdamW hyperparameters with linear learning-rate warmup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl AdamWConfig {
    /// Full-scale settings (lr 4.5e-4, betas 0.9/0.96, 5000 warmup steps).
    pub fn paper() -> Self {
        Self {
            lr: 4.5e-4,
            beta1: 0.9,
            beta2: 0.96,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 5000,
        }
    }

    /// Scaled-down settings for small CPU runs.
    pub fn desk() -> Self {
        Self {
            lr: 2e-3,
            warmup_steps: 100,
            ..Self::paper()
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One decoupled-weight-decay Adam update; `grads` follow parameter order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        let c = self.config;
        let lr = c.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let update = (*mv / bc1) / (libm::sqrt(*vv / bc2) + c.eps);
                *pv -= lr * (update + c.weight_decay * *pv);
            }
        }
    }

    /// Clears moment estimates for one parameter row (used after codebook re-seeding).
    pub fn reset_row(&mut self, param_index: usize, row: usize, width: usize) {
        for buf in [&mut self.m[param_index], &mut self.v[param_index]] {
            buf[row * width..(row + 1) * width].iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Flags a run whose loss stays above `factor` times the first observed loss
/// for `patience` consecutive steps.
#[derive(Clone, Copy, Debug)]
pub struct DivergenceGuard {
    factor: f64,
    patience: usize,
    initial: Option<f64>,
    above: usize,
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self {
            factor: 10.0,
            patience: 100,
            initial: None,
            above: 0,
        }
    }
}

impl DivergenceGuard {
    pub fn observe(&mut self, step: usize, loss: f64) -> crate::Result<()> {
        if !loss.is_finite() {
            return Err(crate::Error::NanLoss { t: step });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > self.factor * initial.abs() {
            self.above += 1;
            if self.above >= self.patience {
                return Err(crate::Error::Diverged { step, loss, initial });
            }
        } else {
            self.above = 0;
        }
        Ok(())
    }
}
