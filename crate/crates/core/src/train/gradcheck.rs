//! Central finite-difference checks of the analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::finetune::FinetuneModel;
use super::pretrain::PretrainModel;
use crate::autograd::Var;
use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::meiosis::AugmentedBatch;
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

/// A model slice with a scalar objective, evaluated in float64.
pub trait Differentiable {
    fn stores(&self) -> Vec<&ParamStore<f64>>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore<f64>>;
    fn loss(&self, ctx: &mut Ctx<f64>) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates checked per parameter block; smaller blocks are checked
    /// exhaustively.
    pub samples_per_block: usize,
    /// Skip (and replace) coordinates whose `±step` evaluations take a
    /// different ReLU or max branch than the unperturbed pass.
    pub skip_kinks: bool,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub mode: ModeName,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Train,
    Eval,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Mode {
        match m {
            ModeName::Train => Mode::Train,
            ModeName::Eval => Mode::Eval,
        }
    }
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_block: 200,
            skip_kinks: true,
            floor: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            mode: ModeName::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub name: String,
    pub size: usize,
    pub checked: usize,
    /// Coordinates passed over because a perturbation crossed a kink.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&BlockError> {
        self.blocks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval_loss<M: Differentiable>(model: &M, opts: &GradCheckOptions) -> Result<(f64, u64)> {
    let mut ctx = Ctx::new(opts.mode.into(), opts.seed);
    let l = model.loss(&mut ctx)?;
    Ok((ctx.graph.value(l).data()[0], ctx.graph.branch_signature()))
}

/// Loss and the analytic gradient of every trainable block, by name.
pub fn analytic_gradients<M: Differentiable>(
    model: &M,
    opts: &GradCheckOptions,
) -> Result<(f64, Vec<(String, Tensor<f64>)>)> {
    let mut ctx = Ctx::new(opts.mode.into(), opts.seed);
    let l = model.loss(&mut ctx)?;
    let loss = ctx.graph.value(l).data()[0];
    let mut grads = ctx.graph.backward(l);
    let mut out = Vec::new();
    for store in model.stores() {
        for id in store.trainable_ids() {
            let name = store.entries()[id.index()].name.clone();
            let g = ctx
                .bound(store, id)
                .and_then(|v| grads.take(v))
                .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
            out.push((name, g));
        }
    }
    Ok((loss, out))
}

/// Compare given analytic gradients with central differences.
pub fn compare_gradients<M: Differentiable>(
    model: &mut M,
    loss: f64,
    analytic: &[(String, Tensor<f64>)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (_, base_sig) = eval_loss(model, opts)?;
    let mut blocks = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let (si, id) = model
            .stores()
            .iter()
            .enumerate()
            .find_map(|(si, s)| s.find(name).map(|id| (si, id)))
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        let size = grad.len();
        let want = size.min(opts.samples_per_block);
        let mut order: Vec<usize> = (0..size).collect();
        if size > opts.samples_per_block {
            order.shuffle(&mut rng);
        }
        let mut block = BlockError {
            name: name.clone(),
            size,
            checked: 0,
            kinks: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &order {
            if block.checked == want {
                break;
            }
            let orig = model.stores()[si].get(id).data()[i];
            model.stores_mut()[si].get_mut(id).data_mut()[i] = orig + opts.step;
            let (plus, sig_plus) = eval_loss(model, opts)?;
            model.stores_mut()[si].get_mut(id).data_mut()[i] = orig - opts.step;
            let (minus, sig_minus) = eval_loss(model, opts)?;
            model.stores_mut()[si].get_mut(id).data_mut()[i] = orig;
            if opts.skip_kinks && (sig_plus != base_sig || sig_minus != base_sig) {
                block.kinks += 1;
                continue;
            }
            block.checked += 1;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[i];
            let err = relative_error(a, numeric, opts.floor);
            if err > block.max_rel_error || !err.is_finite() {
                block.max_rel_error = err;
                block.worst_index = i;
                block.analytic = a;
                block.numeric = numeric;
            }
        }
        blocks.push(block);
    }
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        loss,
        tolerance: opts.tolerance,
        max_rel_error,
        passed: max_rel_error < opts.tolerance,
        blocks,
    })
}

pub fn gradient_check<M: Differentiable>(model: &mut M, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (loss, analytic) = analytic_gradients(model, opts)?;
    compare_gradients(model, loss, &analytic, opts)
}

/// Encoder + projector + contrastive loss on one augmented batch.
pub struct ContrastivePath {
    pub model: PretrainModel<f64>,
    pub batch: AugmentedBatch,
    pub temperature: f64,
}

impl Differentiable for ContrastivePath {
    fn stores(&self) -> Vec<&ParamStore<f64>> {
        vec![&self.model.encoder.store, &self.model.projector.store]
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore<f64>> {
        vec![&mut self.model.encoder.store, &mut self.model.projector.store]
    }
    fn loss(&self, ctx: &mut Ctx<f64>) -> Result<Var> {
        self.model.loss(ctx, &self.batch, self.temperature)
    }
}

/// Encoder + classifier + cross-entropy on a fixed labelled batch.
pub struct FinetunePath {
    pub model: FinetuneModel<f64>,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl Differentiable for FinetunePath {
    fn stores(&self) -> Vec<&ParamStore<f64>> {
        vec![&self.model.encoder.store, &self.model.classifier.store]
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore<f64>> {
        vec![&mut self.model.encoder.store, &mut self.model.classifier.store]
    }
    fn loss(&self, ctx: &mut Ctx<f64>) -> Result<Var> {
        let x = ctx.input(self.input.clone());
        self.model.loss(ctx, x, &self.labels)
    }
}

/// Classifier alone on fixed embeddings.
pub struct ClassifierPath {
    pub classifier: Classifier<f64>,
    pub embeddings: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl Differentiable for ClassifierPath {
    fn stores(&self) -> Vec<&ParamStore<f64>> {
        vec![&self.classifier.store]
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore<f64>> {
        vec![&mut self.classifier.store]
    }
    fn loss(&self, ctx: &mut Ctx<f64>) -> Result<Var> {
        let x = ctx.input(self.embeddings.clone());
        let logits = self.classifier.forward(ctx, x)?;
        ctx.graph.cross_entropy(logits, &self.labels)
    }
}

/// Reduced float64 model used for routine checks: C=4, M=32, multiplier
/// 1/8, P=Q=2, on synthetic data.
pub const REDUCED: (usize, usize, f64, usize, usize) = (4, 32, 0.125, 2, 2);

/// Check the contrastive path (encoder, projector, loss on one augmented
/// batch) and the fine-tune path (encoder, classifier, cross-entropy on
/// eight labelled samples) of the reduced model.
pub fn reduced_model_checks(seed: u64, opts: &GradCheckOptions) -> Result<(GradCheckReport, GradCheckReport)> {
    use crate::data::{reshape_for_finetune, Split};
    use crate::encoder::{Encoder, EncoderConfig};
    use crate::classifier::ClassifierConfig;
    use crate::meiosis::{meiosis_batch, SplitPosition};
    use crate::rng::{derive, stream, Stream};
    use crate::sampler::{new_epoch, SamplerConfig};
    use crate::synth::{generate, SynthSpec};
    use crate::train::config::ExperimentConfig;
    use crate::train::finetune::gather;

    let (c, m, mult, p, q) = REDUCED;
    let ds = crate::train::ensure_split(generate(&SynthSpec::new(6, 2 * q, c, m, seed))?, seed)?;
    let batch = new_epoch(&ds, SamplerConfig { p, q, seed }, 0)?
        .next()
        .ok_or_else(|| Error::InvalidArgument("reduced dataset yields no batch".into()))?;
    let mut rng = stream(seed, Stream::Meiosis, 0);
    let split = SplitPosition::random(&mut rng, m)?;
    let mut contrastive = ContrastivePath {
        model: PretrainModel::new(EncoderConfig::new(c, m, mult), seed)?,
        batch: meiosis_batch(&batch, split, &mut rng)?,
        temperature: 0.1,
    };
    let rc = gradient_check(&mut contrastive, opts)?;
    let encoder = Encoder::new(EncoderConfig::new(c, m, mult), derive(seed, Stream::Init, 0))?;
    let classifier = Classifier::new(
        ClassifierConfig::new(encoder.output_dim(), 4, mult),
        derive(seed, Stream::Init, 2),
    )?;
    let view = reshape_for_finetune(&ds, Split::Train);
    let ks: Vec<usize> = (0..8.min(view.len())).collect();
    let (input, labels) = gather(&view, &ks, &ExperimentConfig::default())?;
    let mut finetune = FinetunePath {
        model: FinetuneModel { encoder, classifier },
        input,
        labels,
    };
    let rf = gradient_check(&mut finetune, opts)?;
    Ok((rc, rf))
}
