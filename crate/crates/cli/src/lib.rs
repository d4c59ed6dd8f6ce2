//! `me-mhacl` command line: synthetic data, container checks, pre-training,
//! fine-tuning, evaluation, augmentation, embedding export and gradient
//! checks. Every command except `check` writes a run directory holding a
//! `manifest.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use me_mhacl::data::{load_container, save_container, LabelTask, LabeledDataset, Split};
use me_mhacl::eval::{evaluate, export_embeddings_to_file, repeat_finetune_eval, ExportStage};
use me_mhacl::meiosis::{check_batch, meiosis_batch, SplitPosition};
use me_mhacl::rng::{stream, Stream};
use me_mhacl::sampler::{new_epoch, SamplerConfig};
use me_mhacl::synth::{generate, self_check, SynthSpec};
use me_mhacl::train::gradcheck::reduced_model_checks;
use me_mhacl::train::{
    ensure_split, finetune, pretrain, Checkpoint, EncoderInit, ExperimentConfig, GradCheckOptions, RunSink, Stage,
    Telemetry,
};
use me_mhacl::Error;
use serde::{Deserialize, Serialize};

pub const HOME_VAR: &str = "ME_MHACL_HOME";

#[derive(Debug, Parser)]
#[command(name = "me-mhacl", version, about = "Meiosis group-contrastive pre-training for physiological signals")]
pub struct Cli {
    /// Worker threads for data generation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded reference mode for exact replays.
    #[arg(long, global = true)]
    pub reference: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled dataset container.
    Synth(SynthArgs),
    /// Validate a dataset container and print its summary.
    Check {
        #[arg(long)]
        data: PathBuf,
    },
    /// Group-contrastive pre-training.
    Pretrain(TrainArgs),
    /// Supervised fine-tuning (optionally repeated) and test evaluation.
    Finetune(TrainArgs),
    /// Evaluate a fine-tuned checkpoint on one split.
    Eval(EvalArgs),
    /// Apply meiosis to one sampled batch and verify conservation.
    Augment(AugmentArgs),
    /// Write embeddings of one split to CSV.
    Export(ExportArgs),
    /// Finite-difference gradient check of the reduced float64 model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub clips: usize,
    #[arg(long, default_value_t = 8)]
    pub subjects: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 64)]
    pub timepoints: usize,
    /// Signal-to-noise power ratio ("inf" for noiseless).
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub subject_noise: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in preset (deap_pretrain, mahnob_finetune, desk_pretrain, ...).
    #[arg(long)]
    pub preset: Option<String>,
    /// Dataset container directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// valence, arousal or four.
    #[arg(long)]
    pub task: Option<LabelTask>,
    #[arg(long)]
    pub freeze_encoder: bool,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pre-training: continue from this full checkpoint.
    /// Fine-tuning: start from this pre-trained encoder.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Defaults to the task stored in the checkpoint.
    #[arg(long)]
    pub task: Option<LabelTask>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Split position; random when omitted.
    #[arg(long)]
    pub c: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub p: usize,
    #[arg(long, default_value_t = 2)]
    pub q: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// encoder, projector_input or group.
    #[arg(long, default_value = "encoder")]
    pub stage: ExportStage,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Provenance record written into every run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ExperimentConfig>,
    pub seed: u64,
    pub git_describe: String,
    pub threads: usize,
    pub started: String,
    pub finished: String,
    pub artifacts: Vec<PathBuf>,
}

/// Failure with a category that selects the exit code.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub code: u8,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (category, code) = match &e {
            Error::Config(_) | Error::InvalidArgument(_) => ("config", 2),
            Error::Metadata { .. } | Error::Shape(_) | Error::NonFinite { .. } => ("data", 3),
            Error::CheckpointNotFound(_) | Error::CheckpointVersion { .. } | Error::CheckpointCorrupt(_) => {
                ("checkpoint", 4)
            }
            Error::Diverged(_) => ("diverged", 5),
            Error::Io { .. } => ("io", 1),
        };
        CliError {
            category,
            code,
            message: e.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error[{}]: {}", self.category, self.message)
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    Error::io(path, e).into()
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Run root: `$ME_MHACL_HOME/runs`, else `./runs`.
pub fn run_root() -> PathBuf {
    std::env::var_os(HOME_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
        .join("runs")
}

fn run_dir(out: Option<&Path>, command: &str) -> CliResult<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => run_root().join(format!("{command}-{}", chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ"))),
    };
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Resolve the experiment config: flag > config file > preset > default.
pub fn resolve_config(args: &ConfigArgs, stage: Stage) -> CliResult<ExperimentConfig> {
    let text = match &args.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| io_err(p, e))?),
        None => None,
    };
    let mut cfg = ExperimentConfig::resolve(args.preset.as_deref(), text.as_deref())?;
    if args.preset.is_none() && text.is_none() {
        cfg.stage = stage;
    }
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.task {
        cfg.task = t;
    }
    if args.freeze_encoder {
        cfg.freeze_encoder = true;
    }
    if let Some(r) = args.repeats {
        cfg.repeats = r;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "config is for stage {:?} but the command runs {:?}",
            cfg.stage, stage
        ))
        .into());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(cfg: &ExperimentConfig) -> CliResult<LabeledDataset> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set `data` in the config".into()))?;
    let mut ds = load_container(path)?;
    if let Some(layout) = &cfg.layout {
        ds = ds.with_layout(layout.clone())?;
    }
    Ok(ensure_split(ds, cfg.split_seed)?)
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(dir: PathBuf, command: &str, config: Option<ExperimentConfig>, seed: u64, threads: usize) -> Self {
        Run {
            dir,
            manifest: RunManifest {
                command: command.into(),
                args: std::env::args().skip(1).collect(),
                config,
                seed,
                git_describe: env!("ME_MHACL_GIT_DESCRIBE").into(),
                threads,
                started: now(),
                finished: String::new(),
                artifacts: Vec::new(),
            },
        }
    }

    fn artifact(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        if !self.manifest.artifacts.iter().any(|a| a == Path::new(name)) {
            self.manifest.artifacts.push(name.into());
        }
        p
    }

    fn finish(mut self) -> CliResult<PathBuf> {
        self.manifest.finished = now();
        if let Some(text) = self.manifest.config.as_ref().map(|c| c.to_toml_string()) {
            let p = self.artifact("config.toml");
            fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        }
        write_json(&self.dir.join("manifest.json"), &self.manifest)?;
        Ok(self.dir)
    }

    fn sink(&mut self) -> CliResult<RunSink> {
        let path = self.artifact("telemetry.jsonl");
        Ok(RunSink {
            telemetry: Telemetry::to_file(path)?,
            checkpoint_dir: Some(self.dir.clone()),
        })
    }
}

pub fn run(cli: Cli, stdout: &mut impl Write) -> CliResult<()> {
    let threads = if cli.reference { 1 } else { cli.threads.unwrap_or(0) };
    if threads > 0 {
        // ignore "already initialised" when called twice in one process (tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let threads = rayon::current_num_threads();
    let mut say = |s: String| {
        let _ = writeln!(stdout, "{s}");
    };
    match cli.command {
        Command::Synth(a) => {
            let mut spec = SynthSpec::new(a.clips, a.subjects, a.channels, a.timepoints, a.seed);
            if let Some(snr) = a.snr {
                spec.snr = snr;
            }
            if let Some(n) = a.subject_noise {
                spec.subject_noise = n;
            }
            let ds = generate(&spec)?;
            let check = self_check(&spec, &ds);
            let mut run = Run::start(run_dir(a.out.as_deref(), "synth")?, "synth", None, a.seed, threads);
            save_container(&ds, &run.dir)?;
            run.artifact("metadata.json");
            run.artifact("samples.bin");
            write_json(&run.artifact("synth_spec.json"), &spec)?;
            write_json(&run.artifact("self_check.json"), &check)?;
            let dir = run.finish()?;
            say(format!(
                "wrote {} ({} clips x {} subjects x {} channels x {} timepoints); probe accuracy {:.3} (chance {:.3}), self-check {}",
                dir.display(),
                spec.clips,
                spec.subjects,
                spec.channels,
                spec.timepoints,
                check.probe_accuracy,
                check.chance,
                if check.passed() { "passed" } else { "FAILED" }
            ));
            if !check.passed() {
                return Err(Error::InvalidArgument("generated data failed its self-check".into()).into());
            }
        }
        Command::Check { data } => {
            let ds = load_container(&data)?;
            let [v, s, _, c, m] = ds.dims();
            say(format!("container {}: ok", data.display()));
            say(format!("  clips {v}, subjects {s}, channels {c}, timepoints {m}, sample rate {} Hz", ds.sample_rate));
            let layout: Vec<String> = ds
                .layout
                .entries
                .iter()
                .map(|e| format!("{:?} x{}", e.modality, e.channels))
                .collect();
            say(format!("  layout {}", layout.join(", ")));
            match ds.class_balance() {
                Some(b) => say(format!(
                    "  four-class balance LVLA {:.3}, HVLA {:.3}, LVHA {:.3}, HVHA {:.3}",
                    b[0], b[1], b[2], b[3]
                )),
                None => say("  unlabelled".into()),
            }
            if v >= 3 {
                let ds = ensure_split(ds, 0)?;
                say(format!(
                    "  split (0.7/0.15/0.15): train {}, test {}, val {} clips",
                    ds.clips_in(Split::Train).len(),
                    ds.clips_in(Split::Test).len(),
                    ds.clips_in(Split::Val).len()
                ));
            }
        }
        Command::Pretrain(a) => {
            let cfg = resolve_config(&a.cfg, Stage::Pretrain)?;
            let ds = load_dataset(&cfg)?;
            let resume = a.checkpoint.as_ref().map(Checkpoint::load).transpose()?;
            let mut run = Run::start(run_dir(a.out.as_deref(), "pretrain")?, "pretrain", Some(cfg.clone()), cfg.seed, threads);
            let mut sink = run.sink()?;
            let ck = pretrain(&cfg, &ds, resume, &mut sink)?;
            run.artifact("last.ckpt");
            run.artifact("pretrained.ckpt");
            if cfg.checkpoint_every > 0 {
                for e in (cfg.checkpoint_every..cfg.epochs).step_by(cfg.checkpoint_every) {
                    if run.dir.join(format!("epoch_{e:05}.ckpt")).exists() {
                        run.artifact(&format!("epoch_{e:05}.ckpt"));
                    }
                }
            }
            let last = sink.telemetry.records().last().map(|r| r.loss);
            let dir = run.finish()?;
            say(format!(
                "pre-trained {} epochs ({} iterations), final loss {}; encoder at {}",
                ck.header.epoch,
                ck.header.iteration,
                last.map_or("n/a".into(), |l| format!("{l:.4}")),
                dir.join("pretrained.ckpt").display()
            ));
        }
        Command::Finetune(a) => {
            let cfg = resolve_config(&a.cfg, Stage::Finetune)?;
            let ds = load_dataset(&cfg)?;
            let pretrained = a.checkpoint.as_ref().map(Checkpoint::load).transpose()?;
            let mut run = Run::start(run_dir(a.out.as_deref(), "finetune")?, "finetune", Some(cfg.clone()), cfg.seed, threads);
            if cfg.repeats <= 1 {
                let mut sink = run.sink()?;
                let init = match &pretrained {
                    Some(ck) => EncoderInit::Pretrained(ck),
                    None => EncoderInit::Random,
                };
                let res = finetune(&cfg, &ds, init, &mut sink)?;
                run.artifact("best.ckpt");
                run.artifact("last.ckpt");
                let report = evaluate(&res.best, &ds, Split::Test, cfg.task)?;
                write_json(&run.artifact("eval_test.json"), &report)?;
                run.finish()?;
                say(format!(
                    "best epoch {} (val accuracy {}), test accuracy {:.4} over {} samples",
                    res.best_epoch,
                    res.best_val_accuracy.map_or("n/a".into(), |v| format!("{v:.4}")),
                    report.accuracy,
                    report.n_samples
                ));
            } else {
                let mut failure = None;
                let dir = run.dir.clone();
                let mut names = Vec::new();
                let rep = repeat_finetune_eval(pretrained.as_ref(), &cfg, &ds, cfg.repeats, |i, sink, best| {
                    let sub = dir.join(format!("repeat_{i}"));
                    let res = fs::create_dir_all(&sub)
                        .map_err(|e| io_err(&sub, e))
                        .and_then(|_| best.save(sub.join("best.ckpt")).map_err(CliError::from))
                        .and_then(|_| {
                            let mut text = String::new();
                            for r in sink.telemetry.records() {
                                text.push_str(&serde_json::to_string(r).expect("serializable"));
                                text.push('\n');
                            }
                            let p = sub.join("telemetry.jsonl");
                            fs::write(&p, text).map_err(|e| io_err(&p, e))
                        });
                    if let Err(e) = res {
                        failure.get_or_insert(e);
                    }
                    names.push(format!("repeat_{i}/best.ckpt"));
                    names.push(format!("repeat_{i}/telemetry.jsonl"));
                })?;
                if let Some(e) = failure {
                    return Err(e);
                }
                for n in &names {
                    run.artifact(n);
                }
                write_json(&run.artifact("repeats.json"), &rep)?;
                run.finish()?;
                say(format!(
                    "{} fine-tunes: test accuracy mean {:.4}, std {:.4} (seeds {}..={})",
                    rep.runs.len(),
                    rep.mean,
                    rep.std,
                    cfg.seed,
                    cfg.seed + cfg.repeats as u64 - 1
                ));
            }
        }
        Command::Eval(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let cfg = &ck.header.config;
            let mut ds = load_container(&a.data)?;
            if let Some(layout) = &cfg.layout {
                ds = ds.with_layout(layout.clone())?;
            }
            let ds = ensure_split(ds, cfg.split_seed)?;
            let task = a.task.unwrap_or(cfg.task);
            let report = evaluate(&ck, &ds, a.split, task)?;
            let mut run = Run::start(run_dir(a.out.as_deref(), "eval")?, "eval", None, ck.header.seed, threads);
            write_json(&run.artifact("report.json"), &report)?;
            run.finish()?;
            say(serde_json::to_string_pretty(&report).expect("serializable"));
        }
        Command::Augment(a) => {
            let ds = load_container(&a.data)?;
            let m = ds.timepoints();
            let sampler = SamplerConfig {
                p: a.p,
                q: a.q,
                seed: a.seed,
            };
            let batch = new_epoch(&ds, sampler, 0)?
                .next()
                .ok_or_else(|| Error::InvalidArgument(format!("dataset has fewer than P = {} clips", a.p)))?;
            let mut rng = stream(a.seed, Stream::Meiosis, 0);
            let c = match a.c {
                Some(c) => SplitPosition::new(c, m)?,
                None => SplitPosition::random(&mut rng, m)?,
            };
            let aug = meiosis_batch(&batch, c, &mut rng)?;
            let report = check_batch(&batch, &aug);
            let mut run = Run::start(run_dir(a.out.as_deref(), "augment")?, "augment", None, a.seed, threads);
            let groups = AugmentFile::new(&batch, &aug, a.p, a.q, a.seed, ds.channels(), m);
            write_json(&run.artifact("groups.json"), &groups)?;
            let bin = run.artifact("samples.bin");
            let mut bytes = Vec::new();
            for s in aug.samples_in_loss_order() {
                for v in s.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            fs::write(&bin, bytes).map_err(|e| io_err(&bin, e))?;
            write_json(&run.artifact("conservation.json"), &report)?;
            let dir = run.finish()?;
            say(format!(
                "c = {}: {} groups of {}, {} pairs checked; conservation {}, involution {}, alignment {} -> {}",
                report.split_position,
                report.groups_out,
                a.q,
                report.pairs_checked,
                report.conservation_ok,
                report.involution_ok,
                report.alignment_ok,
                dir.display()
            ));
            if !report.all_ok() {
                return Err(Error::InvalidArgument("meiosis conservation check failed".into()).into());
            }
        }
        Command::Export(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let cfg = &ck.header.config;
            let mut ds = load_container(&a.data)?;
            if let Some(layout) = &cfg.layout {
                ds = ds.with_layout(layout.clone())?;
            }
            let ds = ensure_split(ds, cfg.split_seed)?;
            let mut run = Run::start(run_dir(a.out.as_deref(), "export")?, "export", None, ck.header.seed, threads);
            let name = format!("embeddings_{}_{}.csv", a.split.name(), stage_name(a.stage));
            let rows = export_embeddings_to_file(&ck, &ds, a.split, a.stage, run.artifact(&name))?;
            let dir = run.finish()?;
            say(format!("wrote {rows} rows to {}", dir.join(name).display()));
        }
        Command::Gradcheck(a) => {
            let opts = GradCheckOptions {
                samples_per_block: a.samples,
                tolerance: a.tolerance,
                seed: a.seed,
                ..GradCheckOptions::default()
            };
            let (rc, rf) = reduced_model_checks(a.seed, &opts)?;
            let mut run = Run::start(run_dir(a.out.as_deref(), "gradcheck")?, "gradcheck", None, a.seed, threads);
            write_json(&run.artifact("contrastive.json"), &rc)?;
            write_json(&run.artifact("finetune.json"), &rf)?;
            run.finish()?;
            for (name, r) in [("contrastive", &rc), ("finetune", &rf)] {
                let w = r.worst();
                say(format!(
                    "{name}: {} blocks, max relative error {:.3e} ({}) -> {}",
                    r.blocks.len(),
                    r.max_rel_error,
                    w.map_or("-", |b| b.name.as_str()),
                    if r.passed { "pass" } else { "FAIL" }
                ));
            }
            if !(rc.passed && rf.passed) {
                return Err(CliError {
                    category: "gradcheck",
                    code: 7,
                    message: format!("relative error above {}", a.tolerance),
                });
            }
        }
    }
    Ok(())
}

fn stage_name(s: ExportStage) -> &'static str {
    match s {
        ExportStage::Encoder => "encoder",
        ExportStage::ProjectorInput => "projector_input",
        ExportStage::Group => "group",
    }
}

/// `groups.json` of the `augment` command. `samples.bin` holds the same
/// groups' data as little-endian f32 `[2P, Q, C, M]`, A-side groups first.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentFile {
    pub split_position: usize,
    pub p: usize,
    pub q: usize,
    pub seed: u64,
    pub channels: usize,
    pub timepoints: usize,
    pub clip_ids: Vec<usize>,
    pub subject_ids: Vec<usize>,
    pub groups: Vec<AugmentedGroupRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentedGroupRecord {
    pub clip_id: usize,
    pub side: char,
    /// `(prefix_subject, suffix_subject)` per member.
    pub members: Vec<(usize, usize)>,
    /// `(first, second)` indices into `subject_ids` of the crossed pair.
    pub pairs: Vec<(usize, usize, bool)>,
}

impl AugmentFile {
    fn new(
        batch: &me_mhacl::sampler::GroupBatch,
        aug: &me_mhacl::meiosis::AugmentedBatch,
        p: usize,
        q: usize,
        seed: u64,
        channels: usize,
        timepoints: usize,
    ) -> Self {
        let mut groups = Vec::with_capacity(2 * p);
        for side in ['a', 'b'] {
            for ap in &aug.pairs {
                let members = if side == 'a' { &ap.group_a } else { &ap.group_b };
                groups.push(AugmentedGroupRecord {
                    clip_id: ap.clip_id,
                    side,
                    members: members.iter().map(|s| (s.tag.prefix_subject, s.tag.suffix_subject)).collect(),
                    pairs: ap.pairs.iter().map(|r| (r.first, r.second, r.first_product_to_a)).collect(),
                });
            }
        }
        AugmentFile {
            split_position: aug.split.get(),
            p,
            q,
            seed,
            channels,
            timepoints,
            clip_ids: batch.clip_ids.clone(),
            subject_ids: batch.subject_ids.clone(),
            groups,
        }
    }
}

/// Parse arguments, run, print categorized errors; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code)
        }
    }
}
