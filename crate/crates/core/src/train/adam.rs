use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a flat parameter slice at step `t >= 1`.
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    cfg: &AdamConfig,
) {
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powf(t as f64));
    let c2 = T::of(1.0 - cfg.beta2.powf(t as f64));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] = param[i] - lr * mh / (vh.sqrt() + eps);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam state keyed by full parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advance one step over every `(store, gradients)` part. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(&mut self, parts: &mut [(&mut ParamStore<T>, Vec<(ParamId, Tensor<T>)>)]) -> Result<()> {
        for (store, grads) in parts.iter() {
            for (id, g) in grads {
                let name = &store.entries()[id.index()].name;
                if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        location: format!("gradient of {name}"),
                        value: bad.as_f64(),
                    });
                }
                if g.shape() != store.get(*id).shape() {
                    return Err(Error::Shape(format!(
                        "gradient of {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        store.get(*id).shape()
                    )));
                }
            }
        }
        self.step += 1;
        let cfg = self.config;
        for (store, grads) in parts.iter_mut() {
            for (id, g) in grads.iter() {
                let name = store.entries()[id.index()].name.clone();
                let n = g.len();
                let mo = self.moments.entry(name).or_insert_with(|| Moments {
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                });
                let p = store.get_mut(*id);
                adam_update(p.data_mut(), g.data(), &mut mo.m, &mut mo.v, self.step, &cfg);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn two_hand_computed_steps() {
        let cfg = AdamConfig::new(0.1);
        let (mut p, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        adam_update(&mut p, &[0.5], &mut m, &mut v, 1, &cfg);
        // m = 0.05, v = 0.00025, m^ = 0.5, v^ = 0.25 -> step 0.1 * 0.5 / (0.5 + 1e-8)
        let p1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - p1).abs() < 1e-15);
        adam_update(&mut p, &[-1.0], &mut m, &mut v, 2, &cfg);
        let m2: f64 = 0.9 * 0.05 + 0.1 * -1.0;
        let v2: f64 = 0.999 * 0.00025 + 0.001 * 1.0;
        let mh = m2 / (1.0 - 0.81);
        let vh = v2 / (1.0 - 0.999f64 * 0.999);
        let p2 = p1 - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((p[0] - p2).abs() < 1e-14, "{} vs {p2}", p[0]);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f32>::new("s");
        let id = store.add("w", ParamKind::Trainable, Tensor::full(vec![3], 0.7));
        let mut adam = Adam::new(AdamConfig::new(1e-2));
        adam.step(&mut [(&mut store, vec![(id, Tensor::zeros(vec![3]))])]).unwrap();
        assert_eq!(store.get(id).data(), &[0.7; 3]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn constant_gradient_moves_about_lr_per_step() {
        let cfg = AdamConfig::new(1e-3);
        let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        let mut prev = 0.0;
        for t in 1..=200 {
            adam_update(&mut p, &[3.7], &mut m, &mut v, t, &cfg);
            let step = prev - p[0];
            assert!((step - 1e-3).abs() < 1e-6, "step {t}: {step}");
            prev = p[0];
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_change() {
        let mut store = ParamStore::<f32>::new("s");
        let id = store.add("w", ParamKind::Trainable, Tensor::full(vec![2], 1.0));
        let mut adam = Adam::new(AdamConfig::new(1e-2));
        let g = Tensor::new(vec![2], vec![0.1, f32::NAN]).unwrap();
        let err = adam.step(&mut [(&mut store, vec![(id, g)])]).unwrap_err();
        assert!(err.to_string().contains("s.w"));
        assert_eq!(adam.step, 0);
        assert_eq!(store.get(id).data(), &[1.0, 1.0]);
    }
}
