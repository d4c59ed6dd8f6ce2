//! Base encoder: 1D residual convnet, `[C, M]` sample to a `D`-vector.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::MeSample;
use crate::error::{Error, Result};
use crate::layers::{scaled, BatchNorm, Conv1d, Linear};
use crate::params::{Ctx, Init, Initializer, Mode, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const STEM_KERNEL: usize = 9;
pub const BLOCK_KERNELS: [usize; 8] = [15, 15, 11, 11, 7, 3, 3, 5];
pub const BLOCK_WIDTHS: [usize; 8] = [64, 64, 128, 128, 256, 256, 512, 512];
pub const EMBED_DIM: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub timepoints: usize,
    /// Scales every width (1.0 is the full model).
    #[serde(default = "one")]
    pub multiplier: f64,
    #[serde(default = "stem_kernel")]
    pub stem_kernel: usize,
    #[serde(default = "block_kernels")]
    pub block_kernels: Vec<usize>,
    #[serde(default = "block_widths")]
    pub block_widths: Vec<usize>,
    #[serde(default = "embed_dim")]
    pub embed_dim: usize,
}

fn one() -> f64 {
    1.0
}
fn stem_kernel() -> usize {
    STEM_KERNEL
}
fn block_kernels() -> Vec<usize> {
    BLOCK_KERNELS.to_vec()
}
fn block_widths() -> Vec<usize> {
    BLOCK_WIDTHS.to_vec()
}
fn embed_dim() -> usize {
    EMBED_DIM
}

impl EncoderConfig {
    pub fn new(in_channels: usize, timepoints: usize, multiplier: f64) -> Self {
        Self {
            in_channels,
            timepoints,
            multiplier,
            stem_kernel: STEM_KERNEL,
            block_kernels: block_kernels(),
            block_widths: block_widths(),
            embed_dim: EMBED_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.timepoints < 3 {
            return Err(Error::Config(format!(
                "encoder input must be at least 1 x 3, got {} x {}",
                self.in_channels, self.timepoints
            )));
        }
        if !(self.multiplier.is_finite() && self.multiplier > 0.0) {
            return Err(Error::Config(format!(
                "width multiplier must be positive, got {}",
                self.multiplier
            )));
        }
        if self.block_kernels.len() != self.block_widths.len() || self.block_kernels.is_empty() {
            return Err(Error::Config(
                "block_kernels and block_widths must be equally long and non-empty".into(),
            ));
        }
        let kernels = std::iter::once(&self.stem_kernel).chain(&self.block_kernels);
        if let Some(k) = kernels.clone().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("kernel {k} is even; same padding needs odd kernels")));
        }
        Ok(())
    }

    /// Width of the output embedding after scaling.
    pub fn output_dim(&self) -> usize {
        scaled(self.embed_dim, self.multiplier)
    }

    pub fn conv_layers(&self) -> usize {
        1 + 2 * self.block_kernels.len()
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv1d,
    bn1: BatchNorm,
    conv2: Conv1d,
    bn2: BatchNorm,
    shortcut: Option<(Conv1d, BatchNorm)>,
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub store: ParamStore<T>,
    stem: Conv1d,
    stem_bn: BatchNorm,
    blocks: Vec<ResBlock>,
    head: Linear,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::with_init(config, seed, Init::Default)
    }

    pub fn with_init(config: EncoderConfig, seed: u64, init: Init) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new("encoder");
        let mut ini = Initializer::new(seed, init);
        let m = config.multiplier;
        let mut width = scaled(config.block_widths[0], m);
        let stem = Conv1d::new(
            &mut store,
            &mut ini,
            "stem.conv",
            config.in_channels,
            width,
            config.stem_kernel,
            1,
        );
        let stem_bn = BatchNorm::new(&mut store, &mut ini, "stem.bn", width);
        let mut blocks = Vec::with_capacity(config.block_kernels.len());
        for (i, (&k, &w)) in config.block_kernels.iter().zip(&config.block_widths).enumerate() {
            let out = scaled(w, m);
            let stride = if out != width { 2 } else { 1 };
            let name = format!("block{i}");
            let conv1 = Conv1d::new(&mut store, &mut ini, &format!("{name}.conv1"), width, out, k, stride);
            let bn1 = BatchNorm::new(&mut store, &mut ini, &format!("{name}.bn1"), out);
            let conv2 = Conv1d::new(&mut store, &mut ini, &format!("{name}.conv2"), out, out, 1, 1);
            let bn2 = BatchNorm::new(&mut store, &mut ini, &format!("{name}.bn2"), out);
            let shortcut = (out != width || stride != 1).then(|| {
                (
                    Conv1d::new(&mut store, &mut ini, &format!("{name}.down.conv"), width, out, 1, stride),
                    BatchNorm::new(&mut store, &mut ini, &format!("{name}.down.bn"), out),
                )
            });
            blocks.push(ResBlock {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            });
            width = out;
        }
        let head = Linear::new(&mut store, &mut ini, "fc", width, config.output_dim(), 1.0);
        Ok(Self {
            config,
            store,
            stem,
            stem_bn,
            blocks,
            head,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// `[N, C, M] -> [N, D]`.
    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let shape = ctx.graph.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] == 0 || shape[1] != self.config.in_channels || shape[2] != self.config.timepoints {
            return Err(Error::Shape(format!(
                "encoder expects [N, {}, {}], got {shape:?}",
                self.config.in_channels, self.config.timepoints
            )));
        }
        let s = &self.store;
        let mut h = self.stem.forward(s, ctx, x);
        h = self.stem_bn.forward(s, ctx, h);
        h = ctx.graph.relu(h);
        h = ctx.graph.max_pool1d(h, 3, 2, 1);
        for b in &self.blocks {
            let mut y = b.conv1.forward(s, ctx, h);
            y = b.bn1.forward(s, ctx, y);
            y = ctx.graph.relu(y);
            y = b.conv2.forward(s, ctx, y);
            y = b.bn2.forward(s, ctx, y);
            let skip = match &b.shortcut {
                Some((conv, bn)) => {
                    let z = conv.forward(s, ctx, h);
                    bn.forward(s, ctx, z)
                }
                None => h,
            };
            let sum = ctx.graph.add(y, skip);
            h = ctx.graph.relu(sum);
        }
        let pooled = ctx.graph.mean_time(h);
        Ok(self.head.forward(s, ctx, pooled))
    }

    /// Embeddings of a batch, `[N, D]`. Train mode normalises with batch
    /// statistics; running statistics are left untouched here.
    pub fn encode_batch(&self, samples: &[MeSample], mode: Mode) -> Result<Tensor<T>> {
        let input = stack_samples::<T>(samples)?;
        let mut ctx = Ctx::new(mode, 0);
        let x = ctx.input(input);
        let out = self.forward(&mut ctx, x)?;
        let value = ctx.graph.value(out).clone();
        if !value.all_finite() {
            return Err(Error::NonFinite {
                location: "encoder output".into(),
                value: value.data().iter().find(|v| !v.is_finite()).map_or(f64::NAN, |v| v.as_f64()),
            });
        }
        Ok(value)
    }

    pub fn encode(&self, sample: &MeSample, mode: Mode) -> Result<Vec<T>> {
        Ok(self.encode_batch(std::slice::from_ref(sample), mode)?.into_data())
    }
}

/// Stack samples into `[N, C, M]`.
pub fn stack_samples<T: Scalar>(samples: &[MeSample]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (c, m) = (first.channels(), first.timepoints());
    let mut data = Vec::with_capacity(samples.len() * c * m);
    for s in samples {
        if s.channels() != c || s.timepoints() != m {
            return Err(Error::Shape(format!(
                "batch mixes {c}x{m} and {}x{} samples",
                s.channels(),
                s.timepoints()
            )));
        }
        data.extend(s.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(vec![samples.len(), c, m], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Modality, ModalityLayout, SampleTag};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::sync::Arc;

    fn cfg() -> EncoderConfig {
        EncoderConfig::new(3, 24, 1.0 / 16.0)
    }

    fn random_sample(rng: &mut ChaCha8Rng, c: usize, m: usize, clip: usize) -> MeSample {
        let data = (0..c * m).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        MeSample::new(
            data,
            c,
            m,
            8.0,
            Arc::new(ModalityLayout::single(Modality::Eeg, c)),
            SampleTag::original(clip, 0),
        )
        .unwrap()
    }

    #[test]
    fn seventeen_convolutions_and_output_width() {
        let e = Encoder::<f32>::new(EncoderConfig::new(4, 32, 1.0), 0).unwrap();
        assert_eq!(e.config.conv_layers(), 17);
        let convs = e
            .store
            .entries()
            .iter()
            .filter(|p| p.name.contains("conv") && !p.name.contains("down"))
            .count();
        assert_eq!(convs, 17);
        assert_eq!(e.output_dim(), 512);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = random_sample(&mut rng, 4, 32, 0);
        assert_eq!(e.encode(&s, Mode::Eval).unwrap().len(), 512);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Encoder::<f32>::new(cfg(), 11).unwrap();
        let b = Encoder::<f32>::new(cfg(), 11).unwrap();
        for (x, y) in a.store.entries().iter().zip(b.store.entries()) {
            assert_eq!(x.value.data(), y.value.data(), "{}", x.name);
        }
    }

    #[test]
    fn zero_init_is_constant() {
        let e = Encoder::<f64>::with_init(cfg(), 0, Init::Zeros).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = e.encode(&random_sample(&mut rng, 3, 24, 0), Mode::Eval).unwrap();
        let b = e.encode(&random_sample(&mut rng, 3, 24, 1), Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_init_output_scale_and_non_collapse() {
        let e = Encoder::<f32>::new(cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<MeSample> = (0..8).map(|i| random_sample(&mut rng, 3, 24, i)).collect();
        let out = e.encode_batch(&batch, Mode::Train).unwrap();
        let n = out.len() as f64;
        let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (out.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(std > 0.01 && std < 100.0, "std {std}");
        assert_ne!(out.row(0), out.row(1));
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let e = Encoder::<f32>::new(cfg(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<MeSample> = (0..5).map(|i| random_sample(&mut rng, 3, 24, i)).collect();
        let all = e.encode_batch(&batch, Mode::Eval).unwrap();
        let d = e.output_dim();
        for (i, s) in batch.iter().enumerate() {
            let alone = e.encode(s, Mode::Eval).unwrap();
            for (a, b) in alone.iter().zip(all.row(i)) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "sample {i}");
            }
        }
        let rev: Vec<MeSample> = batch.iter().rev().cloned().collect();
        let out = e.encode_batch(&rev, Mode::Eval).unwrap();
        for i in 0..5 {
            for (a, b) in out.row(4 - i).iter().zip(all.row(i)) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
            }
        }
        assert_eq!(all.shape(), &[5, d]);
    }

    #[test]
    fn rejects_wrong_shape_and_empty_batch() {
        let e = Encoder::<f32>::new(cfg(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            e.encode(&random_sample(&mut rng, 2, 24, 0), Mode::Eval),
            Err(Error::Shape(_))
        ));
        assert!(e.encode_batch(&[], Mode::Eval).is_err());
        let mut bad = cfg();
        bad.block_kernels[0] = 4;
        assert!(Encoder::<f32>::new(bad, 0).is_err());
    }
}
