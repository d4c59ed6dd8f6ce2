//! Supervised fine-tuning of classifier-on-encoder.

use rand::seq::SliceRandom;

use super::adam::{Adam, AdamConfig};
use super::checkpoint::{Checkpoint, CheckpointHeader};
use super::config::{ExperimentConfig, Stage};
use super::{collect_grads, encoder_config_for, RunSink};
use crate::autograd::Var;
use crate::classifier::{Classifier, ClassifierConfig};
use crate::data::{reshape_for_finetune, FinetuneView, LabeledDataset, Split};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::eval::predict_split;
use crate::layers::BN_MOMENTUM;
use crate::params::{apply_bn_updates, Ctx, Mode};
use crate::rng::{derive, stream, Stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct FinetuneModel<T> {
    pub encoder: Encoder<T>,
    pub classifier: Classifier<T>,
}

impl<T: Scalar> FinetuneModel<T> {
    /// Logits `[N, K]` for input `[N, C, M]`.
    pub fn logits(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.encoder.forward(ctx, x)?;
        self.classifier.forward(ctx, h)
    }

    pub fn loss(&self, ctx: &mut Ctx<T>, x: Var, labels: &[usize]) -> Result<Var> {
        let logits = self.logits(ctx, x)?;
        ctx.graph.cross_entropy(logits, labels)
    }

    /// Number of scalars the optimizer updates.
    pub fn trainable_parameters(&self, freeze_encoder: bool) -> usize {
        let count = |s: &crate::params::ParamStore<T>| s.trainable_ids().map(|id| s.get(id).len()).sum::<usize>();
        count(&self.classifier.store) + if freeze_encoder { 0 } else { count(&self.encoder.store) }
    }
}

/// Starting encoder for fine-tuning.
pub enum EncoderInit<'a> {
    Pretrained(&'a Checkpoint),
    /// Freshly initialised encoder (the untrained control).
    Random,
}

pub struct FinetuneResult {
    /// Model with the best validation accuracy (last epoch if the split has
    /// no validation clips).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub last: Checkpoint,
}

/// Input tensor and targets for fine-tune samples `ks` of a view.
pub fn gather<T: Scalar>(
    view: &FinetuneView<'_>,
    ks: &[usize],
    config: &ExperimentConfig,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let ds = view.dataset();
    let (c, m) = (ds.channels(), ds.timepoints());
    let mut data = Vec::with_capacity(ks.len() * c * m);
    let mut labels = Vec::with_capacity(ks.len());
    for &k in ks {
        data.extend(view.data(k).iter().map(|&v| T::of(v as f64)));
        let l = view
            .labels(k)
            .ok_or_else(|| Error::InvalidArgument("dataset has no labels".into()))?;
        labels.push(config.task.target(&l));
    }
    Ok((Tensor::new(vec![ks.len(), c, m], data)?, labels))
}

fn snapshot(
    config: &ExperimentConfig,
    model: &FinetuneModel<f32>,
    adam: &Adam<f32>,
    epoch: usize,
    iteration: usize,
    best_val: Option<f64>,
) -> Checkpoint {
    let mut cfg = config.clone();
    cfg.stage = Stage::Finetune;
    Checkpoint {
        header: CheckpointHeader {
            config: cfg,
            encoder: model.encoder.config.clone(),
            projector: None,
            classifier: Some(model.classifier.config.clone()),
            epoch,
            iteration,
            seed: config.seed,
            adam: adam.config,
            adam_step: adam.step,
            best_val_accuracy: best_val,
        },
        encoder: model.encoder.clone(),
        projector: None,
        classifier: Some(model.classifier.clone()),
        adam: adam.clone(),
    }
}

/// Train classifier (and, unless frozen, encoder) with cross-entropy and Adam,
/// keeping the checkpoint with the best validation accuracy.
///
/// With `freeze_encoder` the encoder receives no gradient; its batch-norm
/// running statistics still follow the fine-tune data.
pub fn finetune(
    config: &ExperimentConfig,
    dataset: &LabeledDataset,
    init: EncoderInit<'_>,
    sink: &mut RunSink,
) -> Result<FinetuneResult> {
    config.validate()?;
    if !dataset.has_labels() {
        return Err(Error::InvalidArgument("fine-tuning needs a labelled dataset".into()));
    }
    let k = config.task.num_classes();
    let encoder = match init {
        EncoderInit::Pretrained(ck) => {
            if let Some(c) = &ck.classifier {
                if c.config.num_classes != k {
                    return Err(Error::Config(format!(
                        "label task {} needs {k} outputs, checkpoint classifier has {}",
                        config.task.name(),
                        c.config.num_classes
                    )));
                }
            }
            ck.encoder.clone()
        }
        EncoderInit::Random => Encoder::new(encoder_config_for(dataset, config), derive(config.seed, Stream::Init, 0))?,
    };
    if encoder.config.in_channels != dataset.channels() || encoder.config.timepoints != dataset.timepoints() {
        return Err(Error::Shape(format!(
            "encoder expects {} x {} samples, dataset has {} x {}",
            encoder.config.in_channels,
            encoder.config.timepoints,
            dataset.channels(),
            dataset.timepoints()
        )));
    }
    let classifier = match init {
        EncoderInit::Pretrained(Checkpoint {
            classifier: Some(c), ..
        }) => c.clone(),
        _ => Classifier::new(
            ClassifierConfig::new(encoder.output_dim(), k, encoder.config.multiplier),
            derive(config.seed, Stream::Init, 2),
        )?,
    };
    let mut model = FinetuneModel { encoder, classifier };
    let mut adam = Adam::new(AdamConfig::new(config.learning_rate));
    let train = reshape_for_finetune(dataset, Split::Train);
    if train.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "train split has {} samples; need at least 2",
            train.len()
        )));
    }
    let has_val = !dataset.clips_in(Split::Val).is_empty() && dataset.split.is_some();
    let mut best: Option<(Checkpoint, usize, f64)> = None;
    let mut iteration = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(config.seed, Stream::Finetune, epoch as u64));
        let (mut total, mut batches) = (0.0, 0usize);
        for ks in order.chunks(config.batch_size) {
            if ks.len() < 2 {
                continue;
            }
            let (x, labels) = gather::<f32>(&train, ks, config)?;
            let mut ctx = Ctx::new(
                Mode::Train,
                derive(config.seed, Stream::Dropout, (1 << 40) | iteration as u64),
            );
            if config.freeze_encoder {
                ctx.freeze(model.encoder.store.prefix());
            }
            let xv = ctx.input(x);
            let loss = model.loss(&mut ctx, xv, &labels)
                .map_err(|e| super::diverged(e, epoch, iteration))?;
            let value = ctx.graph.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {value} at epoch {epoch}, iteration {iteration}"
                )));
            }
            let mut grads = ctx.graph.backward(loss);
            let ge = collect_grads(&ctx, &mut grads, &model.encoder.store);
            let gc = collect_grads(&ctx, &mut grads, &model.classifier.store);
            adam.step(&mut [(&mut model.encoder.store, ge), (&mut model.classifier.store, gc)])
                .map_err(|e| Error::Diverged(format!("epoch {epoch}, iteration {iteration}: {e}")))?;
            let updates = ctx.take_bn_updates();
            apply_bn_updates(&mut model.encoder.store, &updates, BN_MOMENTUM);
            apply_bn_updates(&mut model.classifier.store, &updates, BN_MOMENTUM);
            total += value;
            batches += 1;
            iteration += 1;
        }
        let mean_loss = if batches > 0 { total / batches as f64 } else { f64::NAN };
        let val_acc = if has_val {
            let (pred, truth) = predict_split(&model.encoder, &model.classifier, dataset, Split::Val, config.task, config.batch_size)?;
            Some(pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
        } else {
            None
        };
        sink.telemetry.log("finetune", epoch, iteration, mean_loss, val_acc)?;
        let improved = match (&best, val_acc) {
            (None, _) => true,
            (Some((_, _, b)), Some(a)) => a > *b,
            (Some(_), None) => true,
        };
        if improved {
            best = Some((
                snapshot(config, &model, &adam, epoch + 1, iteration, val_acc),
                epoch,
                val_acc.unwrap_or(f64::NAN),
            ));
        }
        if let Some(dir) = &sink.checkpoint_dir {
            let done = epoch + 1;
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.epochs {
                snapshot(config, &model, &adam, done, iteration, val_acc).save(dir.join(format!("epoch_{done:05}.ckpt")))?;
            }
        }
    }
    let (best_ck, best_epoch, best_acc) = best.expect("at least one epoch");
    let last = snapshot(config, &model, &adam, config.epochs, iteration, None);
    if let Some(dir) = &sink.checkpoint_dir {
        best_ck.save(dir.join("best.ckpt"))?;
        last.save(dir.join("last.ckpt"))?;
    }
    Ok(FinetuneResult {
        best: best_ck,
        best_epoch,
        best_val_accuracy: has_val.then_some(best_acc),
        last,
    })
}
