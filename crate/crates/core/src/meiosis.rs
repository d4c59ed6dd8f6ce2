//! Meiosis augmentation: random pairing, prefix crossover, separation.
//!
//! Every group of `2Q` stimulus-aligned samples becomes two homologous
//! groups of `Q`. Members are paired by a uniform random perfect matching,
//! each pair swaps its first `c` timepoints on every channel, and the two
//! products of each pair go to opposite sides (a fair coin decides which).
//! One split position is shared by the whole minibatch.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MeSample, SampleTag};
use crate::error::{Error, Result};
use crate::sampler::GroupBatch;

/// Prefix length `c` with `1 < c < M - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPosition(usize);

impl SplitPosition {
    pub fn new(c: usize, timepoints: usize) -> Result<Self> {
        if c > 1 && c + 1 < timepoints {
            Ok(Self(c))
        } else {
            Err(Error::InvalidArgument(format!(
                "split position {c} must satisfy 1 < c < {}",
                timepoints.saturating_sub(1)
            )))
        }
    }

    /// Uniform over `{2, ..., M - 2}`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, timepoints: usize) -> Result<Self> {
        if timepoints < 4 {
            return Err(Error::InvalidArgument(format!(
                "no valid split position for {timepoints} timepoints"
            )));
        }
        Ok(Self(rng.random_range(2..=timepoints - 2)))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// `Ã = [B[:, ..c] ‖ A[:, c..]]`, `B̃ = [A[:, ..c] ‖ B[:, c..]]`.
pub fn crossover(a: &MeSample, b: &MeSample, c: SplitPosition) -> Result<(MeSample, MeSample)> {
    if a.channels() != b.channels() || a.timepoints() != b.timepoints() || a.layout != b.layout {
        return Err(Error::Shape(format!(
            "crossover of {}x{} and {}x{} samples",
            a.channels(),
            a.timepoints(),
            b.channels(),
            b.timepoints()
        )));
    }
    let m = a.timepoints();
    let c = SplitPosition::new(c.get(), m)?.get();
    let mut ta = a.data().to_vec();
    let mut tb = b.data().to_vec();
    for ch in 0..a.channels() {
        let r = ch * m..ch * m + c;
        ta[r.clone()].copy_from_slice(&b.data()[r.clone()]);
        tb[r.clone()].copy_from_slice(&a.data()[r]);
    }
    let tag_a = SampleTag {
        clip: a.tag.clip,
        prefix_subject: b.tag.prefix_subject,
        suffix_subject: a.tag.suffix_subject,
    };
    let tag_b = SampleTag {
        clip: b.tag.clip,
        prefix_subject: a.tag.prefix_subject,
        suffix_subject: b.tag.suffix_subject,
    };
    Ok((
        MeSample::from_parts_unchecked(ta, a, tag_a),
        MeSample::from_parts_unchecked(tb, b, tag_b),
    ))
}

/// One crossed pair: input indices and where the products went.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub first: usize,
    pub second: usize,
    /// `true`: `Ã` (prefix from `second`) went to side A, `B̃` to side B.
    pub first_product_to_a: bool,
}

#[derive(Clone, Debug)]
pub struct MeiosisGroup {
    pub group_a: Vec<MeSample>,
    pub group_b: Vec<MeSample>,
    /// `pairs[k]` produced `group_a[k]` and `group_b[k]`.
    pub pairs: Vec<PairRecord>,
}

pub fn meiosis_group<R: Rng + ?Sized>(
    group: &[MeSample],
    c: SplitPosition,
    rng: &mut R,
) -> Result<MeiosisGroup> {
    if group.is_empty() || group.len() % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "meiosis needs an even, non-empty group, got {} members",
            group.len()
        )));
    }
    let clip = group[0].tag.clip;
    if group.iter().any(|s| s.tag.clip != clip) {
        return Err(Error::InvalidArgument(
            "meiosis group members must share one clip".into(),
        ));
    }
    let mut order: Vec<usize> = (0..group.len()).collect();
    order.shuffle(rng);
    let q = group.len() / 2;
    let mut out = MeiosisGroup {
        group_a: Vec::with_capacity(q),
        group_b: Vec::with_capacity(q),
        pairs: Vec::with_capacity(q),
    };
    for pair in order.chunks_exact(2) {
        let (i, j) = (pair[0], pair[1]);
        let (ta, tb) = crossover(&group[i], &group[j], c)?;
        let to_a = rng.random_bool(0.5);
        if to_a {
            out.group_a.push(ta);
            out.group_b.push(tb);
        } else {
            out.group_a.push(tb);
            out.group_b.push(ta);
        }
        out.pairs.push(PairRecord {
            first: i,
            second: j,
            first_product_to_a: to_a,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub clip_id: usize,
    pub group_a: Vec<MeSample>,
    pub group_b: Vec<MeSample>,
    pub pairs: Vec<PairRecord>,
}

/// `2P` homologous groups; `pairs[i]` is the positive pair of clip `i`.
#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    pub split: SplitPosition,
    pub pairs: Vec<AugmentedPair>,
}

impl AugmentedBatch {
    pub fn group_count(&self) -> usize {
        2 * self.pairs.len()
    }

    /// Group representations ordered as all A sides, then all B sides.
    pub fn samples_in_loss_order(&self) -> impl Iterator<Item = &MeSample> {
        self.pairs
            .iter()
            .flat_map(|p| p.group_a.iter())
            .chain(self.pairs.iter().flat_map(|p| p.group_b.iter()))
    }
}

pub fn meiosis_batch<R: Rng + ?Sized>(
    batch: &GroupBatch,
    c: SplitPosition,
    rng: &mut R,
) -> Result<AugmentedBatch> {
    let pairs = batch
        .groups
        .iter()
        .zip(&batch.clip_ids)
        .map(|(g, &clip_id)| {
            let m = meiosis_group(g, c, rng)?;
            Ok(AugmentedPair {
                clip_id,
                group_a: m.group_a,
                group_b: m.group_b,
                pairs: m.pairs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AugmentedBatch { split: c, pairs })
}

/// Structural checks of one augmented batch against its source.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub split_position: usize,
    pub groups_out: usize,
    pub pairs_checked: usize,
    /// Each pair's two products hold exactly the two inputs' values,
    /// timepoint by timepoint (bitwise).
    pub conservation_ok: bool,
    /// Crossing the products again at the same `c` restores the inputs bitwise.
    pub involution_ok: bool,
    /// Every output group carries its clip's id and both sides have `Q` members.
    pub alignment_ok: bool,
}

impl ConservationReport {
    pub fn all_ok(&self) -> bool {
        self.conservation_ok && self.involution_ok && self.alignment_ok
    }
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn check_batch(batch: &GroupBatch, aug: &AugmentedBatch) -> ConservationReport {
    let c = aug.split.get();
    let mut rep = ConservationReport {
        split_position: c,
        groups_out: aug.group_count(),
        pairs_checked: 0,
        conservation_ok: true,
        involution_ok: true,
        alignment_ok: aug.pairs.len() == batch.groups.len(),
    };
    for ((group, &clip), ap) in batch.groups.iter().zip(&batch.clip_ids).zip(&aug.pairs) {
        let q = group.len() / 2;
        rep.alignment_ok &= ap.clip_id == clip
            && ap.group_a.len() == q
            && ap.group_b.len() == q
            && ap.group_a.iter().chain(&ap.group_b).all(|s| s.tag.clip == clip);
        for (k, pr) in ap.pairs.iter().enumerate() {
            rep.pairs_checked += 1;
            let (x, y) = (&group[pr.first], &group[pr.second]);
            let (mut pa, mut pb) = (&ap.group_a[k], &ap.group_b[k]);
            if !pr.first_product_to_a {
                std::mem::swap(&mut pa, &mut pb);
            }
            // pa = [y prefix | x suffix], pb = [x prefix | y suffix]
            let m = x.timepoints();
            for ch in 0..x.channels() {
                let (xs, ys) = (x.channel(ch), y.channel(ch));
                let (ps, qs) = (pa.channel(ch), pb.channel(ch));
                rep.conservation_ok &= same_bits(&ps[..c], &ys[..c])
                    && same_bits(&ps[c..m], &xs[c..m])
                    && same_bits(&qs[..c], &xs[..c])
                    && same_bits(&qs[c..m], &ys[c..m]);
            }
            match crossover(pa, pb, aug.split) {
                Ok((rx, ry)) => {
                    rep.involution_ok &= same_bits(rx.data(), x.data()) && same_bits(ry.data(), y.data());
                }
                Err(_) => rep.involution_ok = false,
            }
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Modality, ModalityLayout};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn sample(values: Vec<f32>, channels: usize, clip: usize, subject: usize) -> MeSample {
        let m = values.len() / channels;
        MeSample::new(
            values,
            channels,
            m,
            4.0,
            Arc::new(ModalityLayout::single(Modality::Eeg, channels)),
            SampleTag::original(clip, subject),
        )
        .unwrap()
    }

    #[test]
    fn crossover_example() {
        let a = sample(vec![1.0, 2.0, 3.0, 4.0], 1, 0, 0);
        let b = sample(vec![10.0, 20.0, 30.0, 40.0], 1, 0, 1);
        let c = SplitPosition::new(2, 4).unwrap();
        let (ta, tb) = crossover(&a, &b, c).unwrap();
        assert_eq!(ta.data(), &[10.0, 20.0, 3.0, 4.0]);
        assert_eq!(tb.data(), &[1.0, 2.0, 30.0, 40.0]);
        assert_eq!(ta.tag.prefix_subject, 1);
        assert_eq!(ta.tag.suffix_subject, 0);
    }

    #[test]
    fn crossover_self_and_involution() {
        let a = sample((0..12).map(|i| i as f32).collect(), 2, 0, 0);
        let b = sample((0..12).map(|i| -(i as f32)).collect(), 2, 0, 1);
        let c = SplitPosition::new(3, 6).unwrap();
        let (x, y) = crossover(&a, &a, c).unwrap();
        assert_eq!(x.data(), a.data());
        assert_eq!(y.data(), a.data());
        let (ta, tb) = crossover(&a, &b, c).unwrap();
        let (ra, rb) = crossover(&ta, &tb, c).unwrap();
        assert_eq!(ra, a);
        assert_eq!(rb, b);
    }

    #[test]
    fn split_position_bounds() {
        assert!(SplitPosition::new(1, 8).is_err());
        assert!(SplitPosition::new(7, 8).is_err());
        assert!(SplitPosition::new(2, 8).is_ok());
        assert!(SplitPosition::new(6, 8).is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [false; 9];
        for _ in 0..500 {
            seen[SplitPosition::random(&mut rng, 8).unwrap().get()] = true;
        }
        assert_eq!(seen, [false, false, true, true, true, true, true, false, false]);
        assert!(SplitPosition::random(&mut rng, 3).is_err());
    }

    #[test]
    fn crossover_rejects_shape_mismatch() {
        let a = sample(vec![0.0; 8], 2, 0, 0);
        let b = sample(vec![0.0; 8], 1, 0, 1);
        assert!(crossover(&a, &b, SplitPosition(2)).is_err());
    }

    #[test]
    fn meiosis_group_smallest_and_errors() {
        let g = vec![
            sample(vec![1.0; 6], 1, 3, 0),
            sample(vec![2.0; 6], 1, 3, 1),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = SplitPosition::new(3, 6).unwrap();
        let out = meiosis_group(&g, c, &mut rng).unwrap();
        assert_eq!(out.group_a.len(), 1);
        assert_eq!(out.group_b.len(), 1);
        let mut firsts = [out.group_a[0].data()[0], out.group_b[0].data()[0]];
        firsts.sort_by(f32::total_cmp);
        assert_eq!(firsts, [1.0, 2.0]);
        assert!(meiosis_group(&g[..1], c, &mut rng).is_err());
        let mixed = vec![g[0].clone(), sample(vec![0.0; 6], 1, 4, 1)];
        assert!(meiosis_group(&mixed, c, &mut rng).is_err());
    }

    #[test]
    fn meiosis_conserves_values_per_channel_and_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g: Vec<MeSample> = (0..6)
            .map(|s| sample((0..16).map(|_| rng.random::<f32>()).collect(), 2, 0, s))
            .collect();
        let c = SplitPosition::new(3, 8).unwrap();
        let out = meiosis_group(&g, c, &mut rng).unwrap();
        for ch in 0..2 {
            for t in 0..8 {
                let mut before: Vec<u32> = g.iter().map(|s| s.channel(ch)[t].to_bits()).collect();
                let mut after: Vec<u32> = out
                    .group_a
                    .iter()
                    .chain(&out.group_b)
                    .map(|s| s.channel(ch)[t].to_bits())
                    .collect();
                before.sort();
                after.sort();
                assert_eq!(before, after);
            }
        }
    }

    #[test]
    fn meiosis_is_reproducible() {
        let g: Vec<MeSample> = (0..4)
            .map(|s| sample((0..8).map(|i| (i * 10 + s) as f32).collect(), 1, 0, s))
            .collect();
        let c = SplitPosition::new(3, 8).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let o = meiosis_group(&g, c, &mut rng).unwrap();
            (o.group_a, o.group_b, o.pairs)
        };
        let (a1, b1, p1) = run(7);
        let (a2, b2, p2) = run(7);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(p1, p2);
    }
}
