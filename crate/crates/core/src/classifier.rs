//! Fine-tuning head: three fully connected layers ending in `K` logits.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{scaled, BatchNorm, Linear};
use crate::params::{Ctx, Init, Initializer, Mode, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const HIDDEN: [usize; 2] = [256, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "one")]
    pub multiplier: f64,
    #[serde(default = "half")]
    pub dropout: f64,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}

impl ClassifierConfig {
    pub fn new(input_dim: usize, num_classes: usize, multiplier: f64) -> Self {
        Self {
            input_dim,
            num_classes,
            multiplier,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.num_classes, 2 | 4) {
            return Err(Error::Config(format!(
                "classifier supports 2 or 4 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("classifier input width is zero".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub config: ClassifierConfig,
    pub store: ParamStore<T>,
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
    bn2: BatchNorm,
    fc3: Linear,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        Self::with_init(config, seed, Init::Default)
    }

    pub fn with_init(config: ClassifierConfig, seed: u64, init: Init) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new("classifier");
        let mut ini = Initializer::new(seed, init);
        let h1 = scaled(HIDDEN[0], config.multiplier);
        let h2 = scaled(HIDDEN[1], config.multiplier);
        let fc1 = Linear::new(&mut store, &mut ini, "fc1", config.input_dim, h1, 2.0);
        let bn1 = BatchNorm::new(&mut store, &mut ini, "bn1", h1);
        let fc2 = Linear::new(&mut store, &mut ini, "fc2", h1, h2, 2.0);
        let bn2 = BatchNorm::new(&mut store, &mut ini, "bn2", h2);
        let fc3 = Linear::new(&mut store, &mut ini, "fc3", h2, config.num_classes, 1.0);
        Ok(Self {
            config,
            store,
            fc1,
            bn1,
            fc2,
            bn2,
            fc3,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// `[N, D] -> [N, K]`.
    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let shape = ctx.graph.value(x).shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "classifier expects [N, {}], got {shape:?}",
                self.config.input_dim
            )));
        }
        let s = &self.store;
        let p = self.config.dropout;
        let mut h = x;
        for (fc, bn) in [(&self.fc1, &self.bn1), (&self.fc2, &self.bn2)] {
            h = fc.forward(s, ctx, h);
            h = bn.forward(s, ctx, h);
            h = ctx.graph.relu(h);
            if ctx.is_train() && p > 0.0 {
                h = ctx.dropout(h, p);
            }
        }
        Ok(self.fc3.forward(s, ctx, h))
    }

    /// Logits `[N, K]` for embeddings `[N, D]`.
    pub fn classify_batch(&self, embeddings: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if !embeddings.all_finite() {
            return Err(Error::NonFinite {
                location: "classifier input".into(),
                value: f64::NAN,
            });
        }
        let mut ctx = Ctx::new(mode, 0);
        let x = ctx.input(embeddings.clone());
        let out = self.forward(&mut ctx, x)?;
        Ok(ctx.graph.value(out).clone())
    }

    pub fn classify(&self, embedding: &[T], mode: Mode) -> Result<Vec<T>> {
        let x = Tensor::new(vec![1, embedding.len()], embedding.to_vec())?;
        Ok(self.classify_batch(&x, mode)?.into_data())
    }
}

/// Index of the largest logit (first on ties).
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_width_follows_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e: Vec<f32> = (0..32).map(|_| rng.random::<f32>() - 0.5).collect();
        for k in [2, 4] {
            let c = Classifier::<f32>::new(ClassifierConfig::new(32, k, 1.0 / 8.0), 1).unwrap();
            let logits = c.classify(&e, Mode::Eval).unwrap();
            assert_eq!(logits.len(), k);
            let z: f32 = logits.iter().map(|v| v.exp()).sum();
            let total: f32 = logits.iter().map(|v| v.exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        assert!(Classifier::<f32>::new(ClassifierConfig::new(32, 3, 1.0), 0).is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let c = Classifier::<f64>::new(ClassifierConfig::new(8, 4, 1.0 / 16.0), 2).unwrap();
        let e = vec![0.3; 8];
        assert_eq!(c.classify(&e, Mode::Eval).unwrap(), c.classify(&e, Mode::Eval).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        let c = Classifier::<f64>::new(ClassifierConfig::new(8, 2, 1.0 / 16.0), 2).unwrap();
        assert!(matches!(c.classify(&[0.0; 7], Mode::Eval), Err(Error::Shape(_))));
        assert!(c.classify(&[f64::NAN; 8], Mode::Eval).is_err());
    }

    #[test]
    fn argmax_picks_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7, -1.0]), 1);
        assert_eq!(argmax(&[2.0f32]), 0);
    }
}
