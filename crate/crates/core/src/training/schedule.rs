use crate::numerics::{Array, Scalar};

/// Step schedule: linear warmup over `warmup_steps`, then
/// `base * decay^k` with `k` the number of milestones
/// `start, start + step, ...` at or before `epoch`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub start: usize,
    pub step: usize,
    pub decay: f64,
}

impl LrSchedule {
    pub fn milestones_passed(&self, epoch: usize) -> usize {
        if epoch < self.start {
            0
        } else if self.step == 0 {
            1
        } else {
            (epoch - self.start) / self.step + 1
        }
    }

    pub fn lr_at(&self, step: usize, epoch: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        };
        self.base * warm * self.decay.powi(self.milestones_passed(epoch) as i32)
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array<T>>,
    v: Vec<Array<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(shapes: &[Vec<usize>], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|s| Array::zeros(s)).collect(),
            v: shapes.iter().map(|s| Array::zeros(s)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place from `grads` (same order as construction).
    pub fn step(&mut self, params: &mut [&mut Array<T>], grads: &[Array<T>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
        let (one, eps) = (T::one(), T::from_f64(self.eps));
        let (lr_t, c1, c2) = (T::from_f64(lr), T::from_f64(c1), T::from_f64(c2));
        let wd = T::from_f64(lr * self.weight_decay);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (self.m[k].data_mut(), self.v[k].data_mut(), grads[k].data());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = tb1 * m[i] + (one - tb1) * g[i];
                v[i] = tb2 * v[i] + (one - tb2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w = *w - wd * *w - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
