use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::AutodiffError;

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter with a gradient in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<(), AutodiffError> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| AutodiffError::UnknownParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            for (((w, &gk), mk), vk) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mk = b1 * *mk + (1.0 - b1) * gk;
                *vk = b2 * *vk + (1.0 - b2) * gk * gk;
                let mhat = *mk / c1;
                let vhat = *vk / c2;
                *w -= lr * wd * *w;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_start` at epoch 0 to `lr_end` at `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.total_epochs == 0 || epoch >= self.total_epochs {
            return if epoch == 0 && self.total_epochs == 0 { self.lr_start } else { self.lr_end };
        }
        let c = (PI * epoch as f64 / self.total_epochs as f64).cos();
        self.lr_end + (self.lr_start - self.lr_end) * (1.0 + c) / 2.0
    }
}

/// Linear ramp from `start` to `end` over `warm_epochs`, flat afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearWarmup {
    pub start: f64,
    pub end: f64,
    pub warm_epochs: usize,
}

impl LinearWarmup {
    pub fn value(&self, epoch: usize) -> f64 {
        if self.warm_epochs == 0 || epoch >= self.warm_epochs {
            return self.end;
        }
        self.start + (self.end - self.start) * epoch as f64 / self.warm_epochs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParamStore {
        [(name.to_string(), Tensor::vector(vec![v]))].into_iter().collect()
    }

    fn grad(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::vector(vec![v]))])
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = one("w", 1.5);
        let mut opt = Adam::new(0.0);
        opt.step(&mut p, &grad("w", 0.0), 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one("w", 0.0);
        let mut opt = Adam::new(0.0);
        opt.step(&mut p, &grad("w", 1.0), 0.1).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let (lr, g, wd) = (0.01, 0.3, 0.1);
        let mut p = one("w", 2.0);
        let mut opt = Adam::new(wd);
        opt.step(&mut p, &grad("w", g), lr).unwrap();
        opt.step(&mut p, &grad("w", g), lr).unwrap();

        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= lr * wd * w;
            w -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert_eq!(p.get("w").unwrap().data()[0], w);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = one("w", 0.0);
        let g = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        assert!(matches!(Adam::new(0.0).step(&mut p, &g, 0.1), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule { lr_start: 2e-4, lr_end: 1e-6, total_epochs: 60 };
        assert!((s.lr(0) - 2e-4).abs() < 1e-12);
        assert_eq!(s.lr(60), 1e-6);
        assert!((s.lr(30) - (1e-6 + (2e-4 - 1e-6) / 2.0)).abs() < 1e-15);
        assert!(s.lr(10) > s.lr(11));
    }

    #[test]
    fn warmup_is_flat_after_ramp() {
        let b = LinearWarmup { start: 0.0, end: 1.0, warm_epochs: 15 };
        assert_eq!(b.value(0), 0.0);
        assert_eq!(b.value(15), 1.0);
        assert_eq!(b.value(40), 1.0);
        assert!((b.value(5) - 1.0 / 3.0).abs() < 1e-15);
    }
}
