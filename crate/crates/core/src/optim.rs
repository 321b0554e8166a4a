//! AdamW with decoupled weight decay and global-norm gradient clipping.

use ndarray::ArrayD;

use crate::nn::Parameterized;
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
        }
    }
}

pub struct AdamW<F: Scalar> {
    pub cfg: OptimConfig,
    step: u64,
    moments: Vec<(crate::nn::Param<F>, crate::nn::Param<F>)>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: OptimConfig) -> Self {
        Self { cfg, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Exposes moment buffers for checkpointing. Call `prime` first when
    /// restoring into a fresh optimizer.
    pub fn visit_state(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param<F>)) {
        for (m, v) in &mut self.moments {
            f(m);
            f(v);
        }
    }

    /// Allocates zeroed moment buffers matching the model without stepping,
    /// so a checkpoint can be loaded into them.
    pub fn prime(&mut self, model: &mut dyn Parameterized<F>) {
        if !self.moments.is_empty() {
            return;
        }
        let moments = &mut self.moments;
        model.visit_params(&mut |p| {
            moments.push((
                crate::nn::Param::zeros(format!("opt.m.{}", p.name), p.value.shape()),
                crate::nn::Param::zeros(format!("opt.v.{}", p.name), p.value.shape()),
            ));
        });
    }

    /// Scales gradients in place so their global L2 norm is at most
    /// `max_grad_norm`; returns the pre-clip norm.
    pub fn clip_grads(&self, model: &mut dyn Parameterized<F>) -> f64 {
        let mut sq = 0.0f64;
        model.visit_params(&mut |p| {
            for g in p.grad.iter() {
                let g = g.to_f64().unwrap_or(0.0);
                sq += g * g;
            }
        });
        let norm = sq.sqrt();
        if norm > self.cfg.max_grad_norm {
            let scale = c::<F>(self.cfg.max_grad_norm / norm);
            model.visit_params(&mut |p| p.grad.mapv_inplace(|g| g * scale));
        }
        norm
    }

    /// One update over every parameter the model exposes. Moment buffers are
    /// keyed by visit order, so the same model (or wrapper) must be passed on
    /// every call.
    pub fn update(&mut self, model: &mut dyn Parameterized<F>) {
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let (b1, b2) = (c::<F>(self.cfg.beta1), c::<F>(self.cfg.beta2));
        let (lr, eps) = (c::<F>(self.cfg.lr), c::<F>(self.cfg.eps));
        let decay = c::<F>(self.cfg.lr * self.cfg.weight_decay);
        let (ibc1, ibc2) = (c::<F>(1.0 / bc1), c::<F>(1.0 / bc2));
        let one = F::one();

        let moments = &mut self.moments;
        let mut idx = 0;
        model.visit_params(&mut |p| {
            if moments.len() == idx {
                moments.push((
                    crate::nn::Param::zeros(format!("opt.m.{}", p.name), p.value.shape()),
                    crate::nn::Param::zeros(format!("opt.v.{}", p.name), p.value.shape()),
                ));
            }
            let (m, v) = &mut moments[idx];
            assert_eq!(
                m.value.shape(),
                p.value.shape(),
                "optimizer state mismatch for {}",
                p.name
            );
            azip_update(
                &mut m.value, &mut v.value, &mut p.value, &p.grad,
                b1, b2, ibc1, ibc2, lr, eps, decay, one,
            );
            idx += 1;
        });
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update<F: Scalar>(
    m: &mut ArrayD<F>,
    v: &mut ArrayD<F>,
    value: &mut ArrayD<F>,
    grad: &ArrayD<F>,
    b1: F,
    b2: F,
    ibc1: F,
    ibc2: F,
    lr: F,
    eps: F,
    decay: F,
    one: F,
) {
    ndarray::Zip::from(value)
        .and(m)
        .and(v)
        .and(grad)
        .for_each(|w, m, v, &g| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m * ibc1;
            let vhat = *v * ibc2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps) - decay * *w;
        });
}
