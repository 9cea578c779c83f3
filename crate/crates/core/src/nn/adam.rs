//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use super::{c, GradMap, Scalar};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment slots are created lazily per parameter name, so the
/// optimizer can be checkpointed and restored by name.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub cfg: AdamConfig,
    pub step_count: u64,
    slots: BTreeMap<String, (ArrayD<F>, ArrayD<F>)>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step_count: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter; call once per optimization step,
    /// before the per-tensor updates.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }

    /// Update one parameter in place. `lr_scale` carries the schedule.
    pub fn update(
        &mut self,
        name: &str,
        param: &mut ArrayViewMutD<'_, F>,
        grad: &ArrayD<F>,
        lr_scale: f64,
    ) {
        debug_assert_eq!(param.shape(), grad.shape(), "grad shape for {name}");
        let (m, v) = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim())));
        let b1 = c::<F>(self.cfg.beta1);
        let b2 = c::<F>(self.cfg.beta2);
        let one = F::one();
        let t = self.step_count.max(1) as i32;
        let bias1 = c::<F>(1.0 - self.cfg.beta1.powi(t));
        let bias2 = c::<F>(1.0 - self.cfg.beta2.powi(t));
        let lr = c::<F>(self.cfg.lr * lr_scale);
        let wd = c::<F>(self.cfg.weight_decay);
        let eps = c::<F>(self.cfg.eps);

        ndarray::Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p = *p - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            });
    }

    /// Step every trainable tensor that received a gradient.
    pub fn step<'a>(
        &mut self,
        tensors: impl Iterator<Item = (String, ArrayViewMutD<'a, F>)>,
        grads: &GradMap<F>,
        lr_scale: f64,
    ) {
        self.begin_step();
        for (name, mut view) in tensors {
            if let Some(g) = grads.get(&name) {
                self.update(&name, &mut view, g, lr_scale);
            }
        }
    }

    /// Optimizer state for checkpointing: (name, moment1, moment2).
    pub fn state(&self) -> impl Iterator<Item = (&String, &ArrayD<F>, &ArrayD<F>)> {
        self.slots.iter().map(|(k, (m, v))| (k, m, v))
    }

    pub fn restore_slot(&mut self, name: String, m: ArrayD<F>, v: ArrayD<F>) {
        self.slots.insert(name, (m, v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn first_step_moves_param_by_about_lr() {
        // with bias correction, |delta| ~= lr for any nonzero grad
        let mut opt = AdamW::<f64>::new(AdamConfig {
            lr: 0.01,
            ..Default::default()
        });
        let mut p = ArrayD::from_elem(vec![3], 1.0f64);
        let g = ArrayD::from_elem(vec![3], 0.5f64);
        opt.begin_step();
        opt.update("p", &mut p.view_mut(), &g, 1.0);
        for &v in p.iter() {
            assert!((v - (1.0 - 0.01)).abs() < 1e-6, "got {v}");
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut opt = AdamW::<f64>::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        let mut p = ArrayD::from_elem(vec![1], 2.0f64);
        let g = ArrayD::zeros(vec![1]);
        opt.begin_step();
        opt.update("p", &mut p.view_mut(), &g, 1.0);
        // zero grad: only the decay term applies, p -= lr*wd*p
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}
