//! Group-contrastive pre-training of the encoder and projector.

use super::adam::{Adam, AdamConfig};
use super::checkpoint::{Checkpoint, CheckpointHeader};
use super::config::{ExperimentConfig, Stage};
use super::{collect_grads, encoder_config_for, RunSink};
use crate::autograd::Var;
use crate::data::LabeledDataset;
use crate::encoder::{stack_samples, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::layers::BN_MOMENTUM;
use crate::meiosis::{meiosis_batch, AugmentedBatch, SplitPosition};
use crate::params::{apply_bn_updates, Ctx, Init, Mode};
use crate::projector::{Projector, ProjectorConfig};
use crate::rng::{derive, stream, Stream};
use crate::sampler::{new_epoch, SamplerConfig};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct PretrainModel<T> {
    pub encoder: Encoder<T>,
    pub projector: Projector<T>,
}

impl<T: Scalar> PretrainModel<T> {
    pub fn new(encoder: EncoderConfig, seed: u64) -> Result<Self> {
        Self::with_init(encoder, seed, Init::Default)
    }

    pub fn with_init(encoder: EncoderConfig, seed: u64, init: Init) -> Result<Self> {
        let m = encoder.multiplier;
        let encoder = Encoder::with_init(encoder, derive(seed, Stream::Init, 0), init)?;
        let projector = Projector::with_init(
            ProjectorConfig::new(encoder.output_dim(), m),
            derive(seed, Stream::Init, 1),
            init,
        )?;
        Ok(Self { encoder, projector })
    }

    /// Group representations `[2P, H]` of an augmented batch: all A-side
    /// groups in clip order, then all B-side groups.
    pub fn group_reps(&self, ctx: &mut Ctx<T>, batch: &AugmentedBatch) -> Result<Var> {
        let members = batch
            .pairs
            .first()
            .map(|p| p.group_a.len())
            .ok_or_else(|| Error::InvalidArgument("empty augmented batch".into()))?;
        let samples: Vec<_> = batch.samples_in_loss_order().cloned().collect();
        let x = ctx.input(stack_samples(&samples)?);
        let h = self.encoder.forward(ctx, x)?;
        self.projector.forward(ctx, h, members)
    }

    pub fn loss(&self, ctx: &mut Ctx<T>, batch: &AugmentedBatch, temperature: f64) -> Result<Var> {
        let reps = self.group_reps(ctx, batch)?;
        ctx.graph.contrastive_loss(reps, temperature)
    }
}

fn check_dataset(config: &ExperimentConfig, dataset: &LabeledDataset) -> Result<()> {
    if dataset.timepoints() < 4 {
        return Err(Error::Config(format!(
            "meiosis needs at least 4 timepoints, dataset has {}",
            dataset.timepoints()
        )));
    }
    SamplerConfig {
        p: config.p,
        q: config.q,
        seed: config.seed,
    }
    .validate(dataset.subjects())
}

fn to_checkpoint(
    config: &ExperimentConfig,
    model: &PretrainModel<f32>,
    adam: &Adam<f32>,
    epoch: usize,
    iteration: usize,
) -> Checkpoint {
    Checkpoint {
        header: CheckpointHeader {
            config: config.clone(),
            encoder: model.encoder.config.clone(),
            projector: Some(model.projector.config.clone()),
            classifier: None,
            epoch,
            iteration,
            seed: config.seed,
            adam: adam.config,
            adam_step: adam.step,
            best_val_accuracy: None,
        },
        encoder: model.encoder.clone(),
        projector: Some(model.projector.clone()),
        classifier: None,
        adam: adam.clone(),
    }
}

/// Run pre-training epochs, optionally continuing from a checkpoint.
///
/// Every iteration draws one split position for the whole batch, augments,
/// encodes all `2PQ` samples, projects `2P` groups, and takes one Adam step
/// on encoder and projector. Returns the final full-state checkpoint.
pub fn pretrain(
    config: &ExperimentConfig,
    dataset: &LabeledDataset,
    resume: Option<Checkpoint>,
    sink: &mut RunSink,
) -> Result<Checkpoint> {
    config.validate()?;
    check_dataset(config, dataset)?;
    let (mut model, mut adam, start_epoch, mut iteration) = match resume {
        Some(ck) => {
            let projector = ck
                .projector
                .ok_or_else(|| Error::Config("resume checkpoint has no projector".into()))?;
            (
                PretrainModel {
                    encoder: ck.encoder,
                    projector,
                },
                ck.adam,
                ck.header.epoch,
                ck.header.iteration,
            )
        }
        None => (
            PretrainModel::<f32>::new(encoder_config_for(dataset, config), config.seed)?,
            Adam::new(AdamConfig::new(config.learning_rate)),
            0,
            0,
        ),
    };
    if model.encoder.config.in_channels != dataset.channels() || model.encoder.config.timepoints != dataset.timepoints() {
        return Err(Error::Shape(format!(
            "model expects {} x {} samples, dataset has {} x {}",
            model.encoder.config.in_channels,
            model.encoder.config.timepoints,
            dataset.channels(),
            dataset.timepoints()
        )));
    }
    let sampler = SamplerConfig {
        p: config.p,
        q: config.q,
        seed: config.seed,
    };
    for epoch in start_epoch..config.epochs {
        for batch in new_epoch(dataset, sampler, epoch as u64)? {
            let mut rng = stream(config.seed, Stream::Meiosis, iteration as u64);
            let c = SplitPosition::random(&mut rng, dataset.timepoints())?;
            let aug = meiosis_batch(&batch, c, &mut rng)?;
            let mut ctx = Ctx::new(Mode::Train, derive(config.seed, Stream::Dropout, iteration as u64));
            let loss = model.loss(&mut ctx, &aug, config.temperature)
                .map_err(|e| super::diverged(e, epoch, iteration))?;
            let value = ctx.graph.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {value} at epoch {epoch}, iteration {iteration}"
                )));
            }
            let mut grads = ctx.graph.backward(loss);
            let ge = collect_grads(&ctx, &mut grads, &model.encoder.store);
            let gp = collect_grads(&ctx, &mut grads, &model.projector.store);
            adam.step(&mut [(&mut model.encoder.store, ge), (&mut model.projector.store, gp)])
                .map_err(|e| Error::Diverged(format!("epoch {epoch}, iteration {iteration}: {e}")))?;
            let updates = ctx.take_bn_updates();
            apply_bn_updates(&mut model.encoder.store, &updates, BN_MOMENTUM);
            apply_bn_updates(&mut model.projector.store, &updates, BN_MOMENTUM);
            sink.telemetry.log("pretrain", epoch, iteration, value, None)?;
            iteration += 1;
        }
        let done = epoch + 1;
        if let Some(dir) = &sink.checkpoint_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.epochs {
                to_checkpoint(config, &model, &adam, done, iteration).save(dir.join(format!("epoch_{done:05}.ckpt")))?;
            }
        }
    }
    let mut cfg = config.clone();
    cfg.stage = Stage::Pretrain;
    let ck = to_checkpoint(&cfg, &model, &adam, config.epochs.max(start_epoch), iteration);
    if let Some(dir) = &sink.checkpoint_dir {
        ck.save(dir.join("last.ckpt"))?;
        ck.encoder_only().save(dir.join("pretrained.ckpt"))?;
    }
    Ok(ck)
}

impl Checkpoint {
    /// The pre-trained encoder alone; projector and optimizer state dropped.
    pub fn encoder_only(&self) -> Checkpoint {
        let mut header = self.header.clone();
        header.projector = None;
        header.classifier = None;
        header.adam_step = 0;
        Checkpoint {
            header,
            encoder: self.encoder.clone(),
            projector: None,
            classifier: None,
            adam: Adam::new(self.adam.config),
        }
    }
}
