//! Accuracy and confusion reports, repeated fine-tuning, embedding export.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, Classifier};
use crate::data::{reshape_for_finetune, LabelTask, LabeledDataset, Split};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::params::{Ctx, Mode};
use crate::tensor::Tensor;
use crate::train::finetune::gather;
use crate::train::{finetune, Checkpoint, EncoderInit, ExperimentConfig, RunSink};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: LabelTask,
    pub split: Split,
    pub accuracy: f64,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub n_samples: usize,
    pub checkpoint_id: String,
}

impl EvalReport {
    pub fn from_predictions(
        task: LabelTask,
        split: Split,
        predicted: &[usize],
        truth: &[usize],
        checkpoint_id: impl Into<String>,
    ) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::InvalidArgument(format!("{} split is empty", split.name())));
        }
        let k = task.num_classes();
        let mut confusion = vec![vec![0usize; k]; k];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= k || t >= k {
                return Err(Error::InvalidArgument(format!("class index outside 0..{k}")));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        Ok(Self {
            task,
            split,
            accuracy: correct as f64 / truth.len() as f64,
            confusion,
            n_samples: truth.len(),
            checkpoint_id: checkpoint_id.into(),
        })
    }
}

/// Eval-mode predictions and targets over one split.
pub fn predict_split(
    encoder: &Encoder<f32>,
    classifier: &Classifier<f32>,
    dataset: &LabeledDataset,
    split: Split,
    task: LabelTask,
    batch_size: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if classifier.num_classes() != task.num_classes() {
        return Err(Error::Config(format!(
            "task {} needs {} outputs, classifier has {}",
            task.name(),
            task.num_classes(),
            classifier.num_classes()
        )));
    }
    let view = reshape_for_finetune(dataset, split);
    if view.is_empty() {
        return Err(Error::InvalidArgument(format!("{} split is empty", split.name())));
    }
    let cfg = ExperimentConfig {
        task,
        ..ExperimentConfig::default()
    };
    let idx: Vec<usize> = (0..view.len()).collect();
    let (mut pred, mut truth) = (Vec::with_capacity(view.len()), Vec::with_capacity(view.len()));
    for ks in idx.chunks(batch_size.max(1)) {
        let (x, labels) = gather::<f32>(&view, ks, &cfg)?;
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let xv = ctx.input(x);
        let h = encoder.forward(&mut ctx, xv)?;
        let logits = classifier.forward(&mut ctx, h)?;
        let lv = ctx.graph.value(logits);
        pred.extend((0..ks.len()).map(|i| argmax(lv.row(i))));
        truth.extend(labels);
    }
    Ok((pred, truth))
}

/// Short content hash identifying a checkpoint.
pub fn checkpoint_id(ck: &Checkpoint) -> String {
    let bytes = ck.to_bytes();
    format!("{:016x}", u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes")))
}

pub fn evaluate(ck: &Checkpoint, dataset: &LabeledDataset, split: Split, task: LabelTask) -> Result<EvalReport> {
    let classifier = ck
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint has no classifier; fine-tune it first".into()))?;
    let (pred, truth) = predict_split(&ck.encoder, classifier, dataset, split, task, 256)?;
    EvalReport::from_predictions(task, split, &pred, &truth, checkpoint_id(ck))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub std: f64,
    pub runs: Vec<RepeatRun>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `n` fine-tunes with seeds `config.seed + i`, each evaluated on the test
/// split with its best-validation checkpoint.
pub fn repeat_finetune_eval(
    pretrained: Option<&Checkpoint>,
    config: &ExperimentConfig,
    dataset: &LabeledDataset,
    n: usize,
    mut on_run: impl FnMut(usize, &RunSink, &Checkpoint),
) -> Result<RepeatReport> {
    if n == 0 {
        return Err(Error::InvalidArgument("repeat count must be at least 1".into()));
    }
    let mut runs = Vec::with_capacity(n);
    for i in 0..n {
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(i as u64);
        let mut sink = RunSink::in_memory();
        let init = match pretrained {
            Some(ck) => EncoderInit::Pretrained(ck),
            None => EncoderInit::Random,
        };
        let res = finetune(&cfg, dataset, init, &mut sink)?;
        let report = evaluate(&res.best, dataset, Split::Test, cfg.task)?;
        on_run(i, &sink, &res.best);
        runs.push(RepeatRun {
            seed: cfg.seed,
            best_epoch: res.best_epoch,
            best_val_accuracy: res.best_val_accuracy,
            report,
        });
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.report.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(RepeatReport { mean, std, runs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportStage {
    /// Encoder output per sample.
    Encoder,
    /// Projector MLP output per sample (what attention and pooling consume).
    ProjectorInput,
    /// Group representation per clip, all subjects of the clip as members.
    Group,
}

impl std::str::FromStr for ExportStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Self::Encoder),
            "projector_input" => Ok(Self::ProjectorInput),
            "group" => Ok(Self::Group),
            _ => Err(Error::InvalidArgument(format!(
                "unknown stage {s:?}; expected encoder, projector_input or group"
            ))),
        }
    }
}

pub const EXPORT_ID_COLUMNS: [&str; 5] = ["clip_id", "subject_id", "valence_high", "arousal_high", "four_class"];

struct Row {
    clip: usize,
    subject: Option<usize>,
    labels: Option<(bool, bool, u8)>,
    features: Vec<f32>,
}

fn majority_labels(dataset: &LabeledDataset, clip: usize) -> Option<(bool, bool, u8)> {
    let mut counts = [0usize; 4];
    for s in 0..dataset.subjects() {
        counts[dataset.labels(clip, s)?.four_class as usize] += 1;
    }
    let best = (0..4).max_by_key(|&k| (counts[k], std::cmp::Reverse(k)))?;
    Some((best & 1 == 1, best & 2 == 2, best as u8))
}

/// Write features of one split to CSV and return the number of rows.
///
/// Columns: `clip_id, subject_id, valence_high, arousal_high, four_class,
/// f0 .. f{W-1}`. Group rows leave `subject_id` empty and carry the clip's
/// majority four-class label; unlabelled datasets leave label columns empty.
pub fn export_embeddings(
    ck: &Checkpoint,
    dataset: &LabeledDataset,
    split: Split,
    stage: ExportStage,
    out: impl Write,
) -> Result<usize> {
    let clips = dataset.clips_in(split);
    let s = dataset.subjects();
    let mut rows = Vec::new();
    for &clip in &clips {
        let samples: Vec<_> = (0..s).map(|j| dataset.sample(clip, j)).collect();
        let emb = ck.encoder.encode_batch(&samples, Mode::Eval)?;
        let features: Tensor<f32> = match stage {
            ExportStage::Encoder => emb,
            ExportStage::ProjectorInput | ExportStage::Group => {
                let p = ck.projector.as_ref().ok_or_else(|| {
                    Error::Config("checkpoint has no projector; use a pre-training checkpoint".into())
                })?;
                let mut ctx = Ctx::new(Mode::Eval, 0);
                let x = ctx.input(emb);
                let v = if stage == ExportStage::Group {
                    p.forward(&mut ctx, x, s)?
                } else {
                    p.lift(&mut ctx, x)?
                };
                ctx.graph.value(v).clone()
            }
        };
        if stage == ExportStage::Group {
            rows.push(Row {
                clip,
                subject: None,
                labels: majority_labels(dataset, clip),
                features: features.into_data(),
            });
        } else {
            for j in 0..s {
                rows.push(Row {
                    clip,
                    subject: Some(j),
                    labels: dataset
                        .labels(clip, j)
                        .map(|l| (l.valence_high, l.arousal_high, l.four_class)),
                    features: features.row(j).to_vec(),
                });
            }
        }
    }
    let width = rows.first().map_or(0, |r| r.features.len());
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = EXPORT_ID_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..width).map(|i| format!("f{i}")))
        .collect();
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in &rows {
        let mut rec = vec![
            r.clip.to_string(),
            r.subject.map_or(String::new(), |s| s.to_string()),
        ];
        match r.labels {
            Some((v, a, f)) => rec.extend([(v as u8).to_string(), (a as u8).to_string(), f.to_string()]),
            None => rec.extend([String::new(), String::new(), String::new()]),
        }
        rec.extend(r.features.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(rows.len())
}

pub fn export_embeddings_to_file(
    ck: &Checkpoint,
    dataset: &LabeledDataset,
    split: Split,
    stage: ExportStage,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    export_embeddings(ck, dataset, split, stage, std::io::BufWriter::new(f))
}

/// Outcome of one pretrain-then-finetune run against its untrained control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningSignal {
    pub seed: u64,
    /// Mean pre-training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub pretrained_accuracy: f64,
    /// Test accuracy of a classifier trained on a frozen, randomly
    /// initialised encoder.
    pub control_accuracy: f64,
}

impl LearningSignal {
    pub fn min_epoch_loss(&self) -> f64 {
        self.epoch_losses.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// First epoch (0-based) whose mean loss is below `target`.
    pub fn first_epoch_below(&self, target: f64) -> Option<usize> {
        self.epoch_losses.iter().position(|&l| l < target)
    }
}

/// Generate data from `spec`, pre-train, fine-tune on top of the result,
/// and fine-tune a control on a frozen random encoder; both evaluated on the
/// test split. Every seed (data, split, training) is set to `seed`.
pub fn learning_signal(
    spec: &crate::synth::SynthSpec,
    pretrain_cfg: &ExperimentConfig,
    finetune_cfg: &ExperimentConfig,
    seed: u64,
) -> Result<LearningSignal> {
    let spec = crate::synth::SynthSpec { seed, ..spec.clone() };
    let ds = crate::train::ensure_split(crate::synth::generate(&spec)?, seed)?;
    let pre = ExperimentConfig {
        seed,
        split_seed: seed,
        ..pretrain_cfg.clone()
    };
    let mut sink = RunSink::in_memory();
    let ck = crate::train::pretrain(&pre, &ds, None, &mut sink)?;
    let mut epoch_losses = vec![(0.0, 0usize); pre.epochs];
    for r in sink.telemetry.records() {
        let e = &mut epoch_losses[r.epoch];
        e.0 += r.loss;
        e.1 += 1;
    }
    let epoch_losses = epoch_losses.into_iter().map(|(s, n)| s / n.max(1) as f64).collect();
    let ft = ExperimentConfig {
        seed,
        split_seed: seed,
        ..finetune_cfg.clone()
    };
    let run = |init: EncoderInit<'_>, freeze: bool| -> Result<f64> {
        let cfg = ExperimentConfig {
            freeze_encoder: freeze,
            ..ft.clone()
        };
        let res = finetune(&cfg, &ds, init, &mut RunSink::in_memory())?;
        Ok(evaluate(&res.best, &ds, Split::Test, cfg.task)?.accuracy)
    };
    Ok(LearningSignal {
        seed,
        epoch_losses,
        pretrained_accuracy: run(EncoderInit::Pretrained(&ck), ft.freeze_encoder)?,
        control_accuracy: run(EncoderInit::Random, true)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_predictor_on_balanced_split() {
        let truth: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let pred = vec![0; 40];
        let r = EvalReport::from_predictions(LabelTask::FourClass, Split::Test, &pred, &truth, "x").unwrap();
        assert_eq!(r.accuracy, 0.25);
        for t in 0..4 {
            assert_eq!(r.confusion[t][0], 10);
            assert_eq!(r.confusion[t].iter().sum::<usize>(), 10);
        }
    }

    #[test]
    fn perfect_predictor_is_diagonal() {
        let truth = vec![0, 1, 1, 0, 1];
        let r = EvalReport::from_predictions(LabelTask::Valence, Split::Val, &truth, &truth, "x").unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![2, 0], vec![0, 3]]);
        let total: usize = r.confusion.iter().flatten().sum();
        assert_eq!(total, r.n_samples);
    }

    #[test]
    fn empty_split_and_bad_labels() {
        assert!(EvalReport::from_predictions(LabelTask::Valence, Split::Val, &[], &[], "x").is_err());
        assert!(EvalReport::from_predictions(LabelTask::Valence, Split::Val, &[2], &[0], "x").is_err());
    }

    #[test]
    fn mean_std_single_and_many() {
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
