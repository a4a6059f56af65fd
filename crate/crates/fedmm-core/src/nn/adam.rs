//! Adaptive-moment optimizer.

use super::{Mat, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient applied as a gradient addition `l2 * w`.
    pub l2: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, l2: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2,
        }
    }
}

/// Adam state: first/second moment accumulators per parameter plus a shared
/// step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: Vec<Option<(Mat, Mat)>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all trainable parameters using the gradients
    /// accumulated in `params`. Frozen parameters keep values and moments.
    /// Gradients are left untouched; callers zero them per batch.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let t = self.step;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);

        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let grad_ok = params.grad(id).iter().all(|g| g.is_finite());
            if !grad_ok {
                return Err(Error::NonFinite {
                    context: "adam_step".into(),
                    detail: format!(
                        "gradient for parameter `{}` at step {t} is not finite",
                        params.name(id)
                    ),
                });
            }
            let g = if self.cfg.l2 != 0.0 {
                params.grad(id) + &(params.value(id) * self.cfg.l2)
            } else {
                params.grad(id).clone()
            };
            let slot = &mut self.moments[id.0];
            if slot.is_none() {
                let shape = g.raw_dim();
                *slot = Some((Mat::zeros(shape.clone()), Mat::zeros(shape)));
            }
            let (m, v) = slot.as_mut().unwrap();
            m.zip_mut_with(&g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(&g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let lr = self.cfg.lr;
            let eps = self.cfg.eps;
            let value = params.value_mut(id);
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &m, &v| {
                    let mh = m / bias1;
                    let vh = v / bias2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn setup(lr: f64) -> (ParamSet, Adam, crate::nn::ParamId) {
        let mut params = ParamSet::new();
        let id = params.add("w", array![[1.0, -2.0]]);
        (params, Adam::new(AdamConfig::new(lr, 0.0)), id)
    }

    #[test]
    fn zero_grad_zero_moments_is_identity() {
        let (mut params, mut adam, id) = setup(0.1);
        adam.step(&mut params).unwrap();
        assert_eq!(params.value(id), &array![[1.0, -2.0]]);
    }

    #[test]
    fn zero_lr_keeps_params_but_updates_moments() {
        let (mut params, mut adam, id) = setup(0.0);
        params.add_grad(id, &array![[3.0, 3.0]]);
        adam.step(&mut params).unwrap();
        assert_eq!(params.value(id), &array![[1.0, -2.0]]);
        let (m, _) = adam.moments[0].as_ref().unwrap();
        assert!(m[[0, 0]] > 0.0);
    }

    #[test]
    fn constant_gradient_update_approaches_lr() {
        // Fixed gradient g: m_hat -> g, v_hat -> g^2, so the per-coordinate
        // step magnitude tends to lr.
        let (mut params, mut adam, id) = setup(0.01);
        let g = array![[0.37, -4.2]];
        let mut prev = params.value(id).clone();
        let mut last_step = array![[0.0, 0.0]];
        for _ in 0..2000 {
            params.zero_grads();
            params.add_grad(id, &g);
            adam.step(&mut params).unwrap();
            last_step = &prev - params.value(id);
            prev = params.value(id).clone();
        }
        for d in 0..2 {
            assert!(
                (last_step[[0, d]].abs() - 0.01).abs() < 1e-6,
                "step magnitude {} should approach lr",
                last_step[[0, d]]
            );
        }
    }

    #[test]
    fn frozen_param_untouched() {
        let (mut params, mut adam, id) = setup(0.1);
        params.set_trainable(id, false);
        params.add_grad(id, &array![[1.0, 1.0]]);
        adam.step(&mut params).unwrap();
        assert_eq!(params.value(id), &array![[1.0, -2.0]]);
        assert!(adam.moments[0].is_none());
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let (mut params, mut adam, id) = setup(0.1);
        params.add_grad(id, &array![[f64::NAN, 0.0]]);
        let err = adam.step(&mut params).unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");
    }
}
