//! Group projector: member-wise MLP lift, multi-head self-attention over the
//! members of each group, element-wise max pooling.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{scaled, BatchNorm, Linear};
use crate::params::{Ctx, Init, Initializer, Mode, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const MLP_WIDTHS: [usize; 3] = [1024, 2048, 4096];
pub const HEADS: usize = 8;
pub const DROPOUT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    /// Encoder output width.
    pub input_dim: usize,
    #[serde(default = "one")]
    pub multiplier: f64,
    #[serde(default = "mlp_widths")]
    pub mlp_widths: Vec<usize>,
    #[serde(default = "heads")]
    pub heads: usize,
    #[serde(default = "dropout")]
    pub dropout: f64,
}

fn one() -> f64 {
    1.0
}
fn mlp_widths() -> Vec<usize> {
    MLP_WIDTHS.to_vec()
}
fn heads() -> usize {
    HEADS
}
fn dropout() -> f64 {
    DROPOUT
}

impl ProjectorConfig {
    pub fn new(input_dim: usize, multiplier: f64) -> Self {
        Self {
            input_dim,
            multiplier,
            mlp_widths: mlp_widths(),
            heads: HEADS,
            dropout: DROPOUT,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.mlp_widths.iter().map(|&w| scaled(w, self.multiplier)).collect()
    }

    /// Latent width `H` of the group representation.
    pub fn latent_dim(&self) -> usize {
        *self.widths().last().unwrap_or(&0)
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim() / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlp_widths.len() != 3 {
            return Err(Error::Config("projector needs exactly three MLP widths".into()));
        }
        if self.mlp_widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "projector widths must increase, got {:?}",
                self.mlp_widths
            )));
        }
        if self.heads == 0 || self.latent_dim() % self.heads != 0 {
            return Err(Error::Config(format!(
                "latent width {} does not split into {} heads",
                self.latent_dim(),
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("projector input width is zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Projector<T> {
    pub config: ProjectorConfig,
    pub store: ParamStore<T>,
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
    bn2: BatchNorm,
    fc3: Linear,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

/// Intermediate values of one projector pass.
pub struct ProjectorVars {
    pub lifted: Var,
    pub attended: Var,
    pub pooled: Var,
    /// The attention node; see `Graph::attention_weights`.
    pub attention: Var,
}

impl<T: Scalar> Projector<T> {
    pub fn new(config: ProjectorConfig, seed: u64) -> Result<Self> {
        Self::with_init(config, seed, Init::Default)
    }

    pub fn with_init(config: ProjectorConfig, seed: u64, init: Init) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new("projector");
        let mut ini = Initializer::new(seed, init);
        let w = config.widths();
        let h = w[2];
        let fc1 = Linear::new(&mut store, &mut ini, "fc1", config.input_dim, w[0], 2.0);
        let bn1 = BatchNorm::new(&mut store, &mut ini, "bn1", w[0]);
        let fc2 = Linear::new(&mut store, &mut ini, "fc2", w[0], w[1], 2.0);
        let bn2 = BatchNorm::new(&mut store, &mut ini, "bn2", w[1]);
        let fc3 = Linear::new(&mut store, &mut ini, "fc3", w[1], h, 2.0);
        let wq = Linear::new(&mut store, &mut ini, "attn.q", h, h, 1.0);
        let wk = Linear::new(&mut store, &mut ini, "attn.k", h, h, 1.0);
        let wv = Linear::new(&mut store, &mut ini, "attn.v", h, h, 1.0);
        let wo = Linear::new(&mut store, &mut ini, "attn.out", h, h, 1.0);
        Ok(Self {
            config,
            store,
            fc1,
            bn1,
            fc2,
            bn2,
            fc3,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    /// `[N, D] -> [N, H]`, rows independent except through train-mode batch norm.
    pub fn lift(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let shape = ctx.graph.value(x).shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "projector expects [N, {}], got {shape:?}",
                self.config.input_dim
            )));
        }
        let s = &self.store;
        let mut h = self.fc1.forward(s, ctx, x);
        h = self.bn1.forward(s, ctx, h);
        h = ctx.graph.relu(h);
        h = self.fc2.forward(s, ctx, h);
        h = self.bn2.forward(s, ctx, h);
        h = ctx.graph.relu(h);
        if ctx.is_train() && self.config.dropout > 0.0 {
            h = ctx.dropout(h, self.config.dropout);
        }
        Ok(self.fc3.forward(s, ctx, h))
    }

    /// Self-attention within consecutive blocks of `members` rows.
    /// Returns `(output, attention node)`.
    pub fn attend(&self, ctx: &mut Ctx<T>, x: Var, members: usize) -> Result<(Var, Var)> {
        let rows = ctx.graph.value(x).shape()[0];
        if members == 0 || rows % members != 0 {
            return Err(Error::Shape(format!("{rows} rows do not form groups of {members}")));
        }
        let s = &self.store;
        let q = self.wq.forward(s, ctx, x);
        let k = self.wk.forward(s, ctx, x);
        let v = self.wv.forward(s, ctx, x);
        let a = ctx.graph.attention(q, k, v, members, self.config.heads);
        let logits_ok = ctx.graph.value(a).all_finite();
        if !logits_ok {
            return Err(Error::NonFinite {
                location: "projector attention".into(),
                value: f64::NAN,
            });
        }
        Ok((self.wo.forward(s, ctx, a), a))
    }

    /// `[G·Q, D]` member embeddings (group-major) to `[G, H]`.
    pub fn forward_vars(&self, ctx: &mut Ctx<T>, x: Var, members: usize) -> Result<ProjectorVars> {
        let lifted = self.lift(ctx, x)?;
        let (attended, attention) = self.attend(ctx, lifted, members)?;
        let pooled = ctx.graph.group_max(attended, members);
        Ok(ProjectorVars {
            lifted,
            attended,
            pooled,
            attention,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var, members: usize) -> Result<Var> {
        Ok(self.forward_vars(ctx, x, members)?.pooled)
    }

    /// Group representations `[G, H]` for `[G·Q, D]` embeddings.
    pub fn project_groups(&self, embeddings: &Tensor<T>, members: usize, mode: Mode) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(mode, 0);
        let x = ctx.input(embeddings.clone());
        let out = self.forward(&mut ctx, x, members)?;
        Ok(ctx.graph.value(out).clone())
    }

    /// One group's representation from its `[Q, D]` member embeddings.
    pub fn group_project(&self, embeddings: &Tensor<T>, mode: Mode) -> Result<Vec<T>> {
        let q = embeddings.shape().first().copied().unwrap_or(0);
        if q == 0 {
            return Err(Error::InvalidArgument("empty group".into()));
        }
        Ok(self.project_groups(embeddings, q, mode)?.into_data())
    }
}

/// Element-wise maximum over the rows of `[Q, H]`.
pub fn group_pool<T: Scalar>(members: &Tensor<T>) -> Result<Vec<T>> {
    match members.shape() {
        [q, h] if *q > 0 => {
            let mut out = members.row(0).to_vec();
            for r in 1..*q {
                for (o, &v) in out.iter_mut().zip(members.row(r)) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
            debug_assert_eq!(out.len(), *h);
            Ok(out)
        }
        s => Err(Error::InvalidArgument(format!("group_pool needs a non-empty [Q, H], got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn small() -> Projector<f64> {
        Projector::new(ProjectorConfig::new(16, 1.0 / 64.0), 2).unwrap()
    }

    #[test]
    fn pool_examples() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        assert_eq!(group_pool(&m).unwrap(), vec![3.0, 5.0]);
        let one = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(group_pool(&one).unwrap(), vec![-1.0, 0.0, 2.0]);
        assert!(group_pool(&Tensor::<f64>::zeros(vec![0, 3])).is_err());
    }

    #[test]
    fn widths_and_validation() {
        let c = ProjectorConfig::new(512, 1.0);
        assert_eq!(c.widths(), vec![1024, 2048, 4096]);
        assert_eq!(c.head_dim(), 512);
        let mut bad = c.clone();
        bad.mlp_widths = vec![4096, 2048, 1024];
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.heads = 7;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lift_shape_and_member_independence_in_eval() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, vec![3, 16]);
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let xv = ctx.input(x.clone());
        let y = p.lift(&mut ctx, xv).unwrap();
        let out = ctx.graph.value(y).clone();
        assert_eq!(out.shape(), &[3, p.latent_dim()]);
        let swapped = Tensor::new(vec![3, 16], [x.row(2), x.row(0), x.row(1)].concat()).unwrap();
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let xv = ctx.input(swapped);
        let y = p.lift(&mut ctx, xv).unwrap();
        let out2 = ctx.graph.value(y);
        assert_eq!(out2.row(0), out.row(2));
        assert_eq!(out2.row(1), out.row(0));
    }

    #[test]
    fn single_member_attention_passes_value_through() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = p.latent_dim();
        let x = random(&mut rng, vec![1, h]);
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let xv = ctx.input(x);
        let (_, a) = p.attend(&mut ctx, xv, 1).unwrap();
        let w = ctx.graph.attention_weights(a).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
        let s = &p.store;
        let vv = p.wv.forward(s, &mut ctx, xv);
        assert_eq!(ctx.graph.value(a).data(), ctx.graph.value(vv).data());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, vec![8, p.latent_dim()]);
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let xv = ctx.input(x);
        let (_, a) = p.attend(&mut ctx, xv, 4).unwrap();
        let w = ctx.graph.attention_weights(a).unwrap();
        for row in w.chunks(4) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_logits_give_uniform_weights() {
        let mut p = Projector::<f64>::new(ProjectorConfig::new(16, 1.0 / 64.0), 3).unwrap();
        for id in [p.wq.weight, p.wq.bias] {
            p.store.get_mut(id).data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, vec![4, p.latent_dim()]);
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let xv = ctx.input(x);
        let (_, a) = p.attend(&mut ctx, xv, 4).unwrap();
        assert!(ctx.graph.attention_weights(a).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn group_project_permutation_invariant_and_duplicates() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, vec![4, 16]);
        let g = p.group_project(&x, Mode::Eval).unwrap();
        assert_eq!(g.len(), p.latent_dim());
        let perm = [x.row(3), x.row(1), x.row(0), x.row(2)].concat();
        let gp = p.group_project(&Tensor::new(vec![4, 16], perm).unwrap(), Mode::Eval).unwrap();
        let scale = 1.0 + g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in g.iter().zip(&gp) {
            assert!((a - b).abs() < 1e-9 * scale);
        }
        let dup = Tensor::new(vec![3, 16], x.row(0).repeat(3)).unwrap();
        let single = Tensor::new(vec![1, 16], x.row(0).to_vec()).unwrap();
        let a = p.group_project(&dup, Mode::Eval).unwrap();
        let b = p.group_project(&single, Mode::Eval).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn eval_is_deterministic_train_uses_dropout() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, vec![4, 16]);
        assert_eq!(
            p.project_groups(&x, 2, Mode::Eval).unwrap(),
            p.project_groups(&x, 2, Mode::Eval).unwrap()
        );
        let run = |seed| {
            let mut ctx = Ctx::new(Mode::Train, seed);
            let xv = ctx.input(x.clone());
            let out = p.forward(&mut ctx, xv, 2).unwrap();
            ctx.graph.value(out).clone()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let p = small();
        assert!(p.project_groups(&Tensor::zeros(vec![2, 15]), 2, Mode::Eval).is_err());
        assert!(p.project_groups(&Tensor::zeros(vec![3, 16]), 2, Mode::Eval).is_err());
    }
}
