//! Pre-training and fine-tuning loops, optimizer, checkpoints, telemetry
//! and gradient checking.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod finetune;
pub mod gradcheck;
pub mod pretrain;
pub mod telemetry;

use std::path::PathBuf;

pub use adam::{adam_update, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use config::{ExperimentConfig, Stage, PRESETS};
pub use finetune::{finetune, EncoderInit, FinetuneModel, FinetuneResult};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use pretrain::{pretrain, PretrainModel};
pub use telemetry::{read_telemetry, Telemetry, TelemetryRecord};

use crate::autograd::Gradients;
use crate::data::{split_dataset, LabeledDataset};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.15, 0.15);

/// Where a run writes its telemetry and checkpoints.
pub struct RunSink {
    pub telemetry: Telemetry,
    pub checkpoint_dir: Option<PathBuf>,
}

impl RunSink {
    pub fn in_memory() -> Self {
        Self {
            telemetry: Telemetry::in_memory(),
            checkpoint_dir: None,
        }
    }
}

/// Apply the standard clip split unless the dataset already has one.
pub fn ensure_split(dataset: LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    if dataset.split.is_some() {
        Ok(dataset)
    } else {
        split_dataset(dataset, SPLIT_RATIOS, seed)
    }
}

pub fn encoder_config_for(dataset: &LabeledDataset, config: &ExperimentConfig) -> EncoderConfig {
    EncoderConfig::new(dataset.channels(), dataset.timepoints(), config.multiplier)
}

/// Gradients of every parameter of `store` that was bound as trainable.
pub fn collect_grads<T: Scalar>(
    ctx: &Ctx<T>,
    grads: &mut Gradients<T>,
    store: &ParamStore<T>,
) -> Vec<(ParamId, Tensor<T>)> {
    store
        .trainable_ids()
        .filter_map(|id| {
            let v = ctx.bound(store, id)?;
            grads.take(v).map(|g| (id, g))
        })
        .collect()
}

/// Non-finite values during a training step become a divergence report that
/// names the step.
pub(crate) fn diverged(e: Error, epoch: usize, iteration: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged(format!("epoch {epoch}, iteration {iteration}: {e}")),
        e => e,
    }
}
