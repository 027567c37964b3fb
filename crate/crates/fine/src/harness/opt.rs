//! Gradient-descent optimizer with adaptive per-parameter moments and
//! decoupled weight decay, plus the linear-warmup schedule.

use crate::numcore::{Scalar, Tensor};

pub struct AdamW<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    params: Vec<Tensor<S>>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: Vec<Tensor<S>>, lr: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        let v = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            params,
            m,
            v,
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One update over all owned parameters. `lr_scale` is the schedule
    /// multiplier (warmup), applied to both the step and the decay.
    pub fn step(&mut self, lr_scale: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.beta2);
        let bc1 = S::from_f64(1.0 - self.beta1.powf(t));
        let bc2 = S::from_f64(1.0 - self.beta2.powf(t));
        let eps = S::from_f64(self.eps);
        let lr = S::from_f64(self.lr * lr_scale);
        let decay = S::from_f64(1.0 - self.lr * lr_scale * self.weight_decay);

        for (i, p) in self.params.iter().enumerate() {
            let grad = p.grad();
            let mut data = p.to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.set_data(data);
        }
    }

    /// Optimizer state for checkpointing: (step count, first and second
    /// moments per parameter, as f64).
    pub fn state(&self) -> (u64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m = self
            .m
            .iter()
            .map(|v| v.iter().map(|x| x.as_f64()).collect())
            .collect();
        let v = self
            .v
            .iter()
            .map(|v| v.iter().map(|x| x.as_f64()).collect())
            .collect();
        (self.step_count, m, v)
    }

    pub fn restore(&mut self, step_count: u64, m: &[Vec<f64>], v: &[Vec<f64>]) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.step_count = step_count;
        for (dst, src) in self.m.iter_mut().zip(m.iter()) {
            *dst = src.iter().map(|&x| S::from_f64(x)).collect();
        }
        for (dst, src) in self.v.iter_mut().zip(v.iter()) {
            *dst = src.iter().map(|&x| S::from_f64(x)).collect();
        }
    }
}

/// Linear warmup to 1.0 over `warmup_steps`, constant afterwards.
pub fn warmup_scale(step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        1.0
    } else {
        (step + 1) as f64 / warmup_steps as f64
    }
}
