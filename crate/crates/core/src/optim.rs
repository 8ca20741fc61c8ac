//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use ndarray::Zip;

use crate::graph::Tensor;
use crate::nn::Parameters;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    /// Learning rate for the zero-based `step`: linear warmup to `base_lr`, then
    /// cosine decay reaching `min_lr` at the last step.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps + 1);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every tensor of `params` in place; `grads` follows the
    /// [`Parameters`] visiting order. Single-row tensors (biases, norm affine,
    /// tokens) are not decayed.
    pub fn update(&mut self, params: &mut dyn Parameters, grads: &[Tensor], lr: f64) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            let g = &grads[i];
            assert_eq!(p.dim(), g.dim(), "gradient shape mismatch at parameter {i}");
            ms[i].zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            vs[i].zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let decay = if p.nrows() > 1 { lr * wd } else { 0.0 };
            Zip::from(p).and(&ms[i]).and(&vs[i]).for_each(|p, &m, &v| {
                *p -= decay * *p + lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
            i += 1;
        });
        assert_eq!(i, grads.len(), "one gradient per parameter");
    }
}
