//! Browser demo over the core crate. Each exported function takes plain
//! numbers and returns a JSON string for `www/main.js` to draw.

use me_mhacl::data::LabeledDataset;
use me_mhacl::loss::{contrastive_loss, cosine_sim};
use me_mhacl::meiosis::{meiosis_group, SplitPosition};
use me_mhacl::params::{Ctx, Mode};
use me_mhacl::projector::{Projector, ProjectorConfig};
use me_mhacl::rng::{stream, Stream};
use me_mhacl::synth::{generate, SynthSpec};
use me_mhacl::tensor::Tensor;
use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const EMBED_DIM: usize = 32;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Debug, Serialize)]
pub struct Member {
    pub prefix_subject: usize,
    pub suffix_subject: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize)]
pub struct MeiosisView {
    pub split: usize,
    pub timepoints: usize,
    pub originals: Vec<Member>,
    pub group_a: Vec<Member>,
    pub group_b: Vec<Member>,
    /// Every timepoint's multiset of values survives the crossover.
    pub conserved: bool,
}

/// One clip of `2q` synthetic single-channel subjects split at `c` and
/// recombined into two homologous groups of `q`.
pub fn meiosis_view(q: usize, timepoints: usize, c: usize, seed: u64) -> me_mhacl::Result<MeiosisView> {
    let spec = SynthSpec::new(4, 2 * q, 1, timepoints, seed);
    let ds: LabeledDataset = generate(&spec)?;
    let split = SplitPosition::new(c, timepoints)?;
    let group: Vec<_> = (0..2 * q).map(|s| ds.sample(0, s)).collect();
    let out = meiosis_group(&group, split, &mut stream(seed, Stream::Meiosis, 0))?;
    let member = |s: &me_mhacl::data::MeSample| Member {
        prefix_subject: s.tag.prefix_subject,
        suffix_subject: s.tag.suffix_subject,
        data: s.data().to_vec(),
    };
    let conserved = (0..timepoints).all(|t| {
        let mut before: Vec<u32> = group.iter().map(|s| s.data()[t].to_bits()).collect();
        let mut after: Vec<u32> = out
            .group_a
            .iter()
            .chain(&out.group_b)
            .map(|s| s.data()[t].to_bits())
            .collect();
        before.sort_unstable();
        after.sort_unstable();
        before == after
    });
    Ok(MeiosisView {
        split: c,
        timepoints,
        originals: group.iter().map(member).collect(),
        group_a: out.group_a.iter().map(member).collect(),
        group_b: out.group_b.iter().map(member).collect(),
        conserved,
    })
}

#[derive(Debug, Serialize)]
pub struct LossView {
    pub total: f64,
    pub terms: Vec<f64>,
    /// Cosine similarity of all `2p` representations, A sides first.
    pub similarity: Vec<Vec<f64>>,
    /// Loss when every representation is identical.
    pub uniform: f64,
}

/// Random `[p, h]` representations for side A; side B is
/// `alignment · A + (1 - alignment) · noise`.
pub fn loss_view(p: usize, h: usize, tau: f64, alignment: f64, seed: u64) -> me_mhacl::Result<LossView> {
    let mut rng = stream(seed, Stream::Synth, 0);
    let a: Vec<f64> = (0..p * h).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let b: Vec<f64> = a
        .iter()
        .map(|x| alignment * x + (1.0 - alignment) * (rng.random::<f64>() * 2.0 - 1.0))
        .collect();
    let l = contrastive_loss(&Tensor::new(vec![p, h], a.clone())?, &Tensor::new(vec![p, h], b.clone())?, tau)?;
    let rows: Vec<&[f64]> = a.chunks(h).chain(b.chunks(h)).collect();
    let similarity = rows
        .iter()
        .map(|u| rows.iter().map(|v| cosine_sim(u, v)).collect::<me_mhacl::Result<Vec<_>>>())
        .collect::<me_mhacl::Result<Vec<_>>>()?;
    Ok(LossView {
        total: l.total,
        terms: l.terms_a.into_iter().chain(l.terms_b).collect(),
        similarity,
        uniform: ((2 * p - 1) as f64).ln(),
    })
}

#[derive(Debug, Serialize)]
pub struct AttentionView {
    pub heads: usize,
    pub members: usize,
    /// `[heads][q][q]` for the original order and for `order`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub permuted_weights: Vec<Vec<Vec<f64>>>,
    pub representation: Vec<f64>,
    pub permuted_representation: Vec<f64>,
    pub max_abs_difference: f64,
}

/// Group projector on `q` random member embeddings, run in the given member
/// order and in the original order.
pub fn attention_view(q: usize, order: &[usize], seed: u64) -> me_mhacl::Result<AttentionView> {
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..q).collect::<Vec<_>>() {
        return Err(me_mhacl::Error::InvalidArgument(format!("{order:?} is not a permutation of 0..{q}")));
    }
    let proj = Projector::<f64>::new(ProjectorConfig::new(EMBED_DIM, 0.125), seed)?;
    let mut rng = stream(seed, Stream::Synth, 1);
    let rows: Vec<Vec<f64>> = (0..q)
        .map(|_| (0..EMBED_DIM).map(|_| rng.random::<f64>() - 0.5).collect())
        .collect();
    let heads = proj.config.heads;
    let run = |perm: &[usize]| -> me_mhacl::Result<(Vec<Vec<Vec<f64>>>, Vec<f64>)> {
        let data: Vec<f64> = perm.iter().flat_map(|&i| rows[i].clone()).collect();
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let x = ctx.input(Tensor::new(vec![q, EMBED_DIM], data)?);
        let vars = proj.forward_vars(&mut ctx, x, q)?;
        let w = ctx.graph.attention_weights(vars.attention).expect("attention node");
        let grid = w
            .chunks(q * q)
            .map(|hw| hw.chunks(q).map(<[f64]>::to_vec).collect())
            .collect();
        Ok((grid, ctx.graph.value(vars.pooled).data().to_vec()))
    };
    let identity: Vec<usize> = (0..q).collect();
    let (weights, representation) = run(&identity)?;
    let (permuted_weights, permuted_representation) = run(order)?;
    let max_abs_difference = representation
        .iter()
        .zip(&permuted_representation)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(AttentionView {
        heads,
        members: q,
        weights,
        permuted_weights,
        representation,
        permuted_representation,
        max_abs_difference,
    })
}

fn to_json<T: Serialize>(r: me_mhacl::Result<T>) -> Result<String, JsError> {
    r.map(|v| serde_json::to_string(&v).expect("serializable")).map_err(js)
}

#[wasm_bindgen(js_name = meiosisView)]
pub fn meiosis_view_js(q: usize, timepoints: usize, c: usize, seed: u32) -> Result<String, JsError> {
    to_json(meiosis_view(q, timepoints, c, seed as u64))
}

#[wasm_bindgen(js_name = lossView)]
pub fn loss_view_js(p: usize, h: usize, tau: f64, alignment: f64, seed: u32) -> Result<String, JsError> {
    to_json(loss_view(p, h, tau, alignment, seed as u64))
}

#[wasm_bindgen(js_name = attentionView)]
pub fn attention_view_js(q: usize, order: Vec<u32>, seed: u32) -> Result<String, JsError> {
    let order: Vec<usize> = order.into_iter().map(|i| i as usize).collect();
    to_json(attention_view(q, &order, seed as u64))
}
