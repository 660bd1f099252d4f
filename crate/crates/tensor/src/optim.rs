//! Adam / AdamW, cosine learning-rate annealing and global-norm clipping.

use std::collections::BTreeMap;

use crate::{Array, ParamSet, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decoupled weight decay (AdamW) instead of an L2 term in the gradient.
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn adam(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            decoupled: false,
        }
    }

    pub fn adamw(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            decoupled: true,
            ..Self::adam(beta1, beta2, weight_decay)
        }
    }
}

/// First and second moment estimates per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: ParamSet<T>,
    pub second: ParamSet<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: ParamSet::new(),
            second: ParamSet::new(),
        }
    }

    /// Apply one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, Array<T>>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let wd = T::lit(c.weight_decay);
        let decay = T::lit(1.0 - lr * c.weight_decay);

        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            if !self.first.contains(name) {
                self.first.insert(name.clone(), Array::zeros(p.shape()));
                self.second.insert(name.clone(), Array::zeros(p.shape()));
            }
            let m = self.first.get_mut(name).expect("moment");
            let v = self.second.get_mut(name).expect("moment");
            for (((pv, &g), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = if !c.decoupled && c.weight_decay != 0.0 { g + wd * *pv } else { g };
                *mv = b1 * *mv + one_b1 * g;
                *vv = b2 * *vv + one_b2 * g * g;
                if c.decoupled && c.weight_decay != 0.0 {
                    *pv *= decay;
                }
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Cosine interpolation from `initial` (step 0) to `last` (step `total - 1`).
pub fn cosine_lr(step: usize, total: usize, initial: f64, last: f64) -> f64 {
    if total <= 1 {
        return last;
    }
    let progress = (step.min(total - 1)) as f64 / (total - 1) as f64;
    last + 0.5 * (initial - last) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Array<T>>, max_norm: f64) -> f64 {
    let total: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let factor = T::lit(max_norm / (total + 1e-12));
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    total
}
