//! Stimulus-aligned group sampling for pre-training.
//!
//! Each minibatch holds `P` distinct train clips and `2Q` distinct subjects;
//! group `i` is the `2Q` recordings of clip `i` by those subjects. Clips are
//! drawn without replacement within an epoch and the subject set is redrawn
//! for every batch. A trailing remainder of fewer than `P` clips is dropped.

use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, MeSample, Split};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Clips per minibatch.
    pub p: usize,
    /// Half-group size; each group holds `2Q` subjects.
    pub q: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self, subjects: usize) -> Result<()> {
        if self.p < 2 {
            return Err(Error::Config(format!(
                "P must be at least 2 to provide negatives, got {}",
                self.p
            )));
        }
        if self.q < 1 {
            return Err(Error::Config("Q must be at least 1".into()));
        }
        if 2 * self.q > subjects {
            return Err(Error::Config(format!(
                "2Q = {} exceeds the {subjects} subjects available",
                2 * self.q
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GroupBatch {
    pub clip_ids: Vec<usize>,
    pub subject_ids: Vec<usize>,
    /// `groups[i]` are the `2Q` samples of `clip_ids[i]`, in `subject_ids` order.
    pub groups: Vec<Vec<MeSample>>,
}

pub struct EpochIterator<'a> {
    dataset: &'a LabeledDataset,
    config: SamplerConfig,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

/// Number of full batches an epoch yields.
pub fn batches_per_epoch(train_clips: usize, p: usize) -> usize {
    if p == 0 {
        0
    } else {
        train_clips / p
    }
}

/// Start epoch `epoch` over the train split (every clip when unsplit).
pub fn new_epoch(
    dataset: &LabeledDataset,
    config: SamplerConfig,
    epoch: u64,
) -> Result<EpochIterator<'_>> {
    config.validate(dataset.subjects())?;
    let mut order = dataset.clips_in(Split::Train);
    if order.is_empty() {
        return Err(Error::InvalidArgument("train split is empty".into()));
    }
    if order.len() < config.p {
        return Err(Error::Config(format!(
            "train split has {} clips, fewer than P = {}",
            order.len(),
            config.p
        )));
    }
    let mut rng = stream(config.seed, Stream::Sampler, epoch);
    order.shuffle(&mut rng);
    Ok(EpochIterator {
        dataset,
        config,
        order,
        cursor: 0,
        rng,
    })
}

impl EpochIterator<'_> {
    pub fn remaining_batches(&self) -> usize {
        (self.order.len() - self.cursor) / self.config.p
    }

    /// Next batch, or `None` at the end of the epoch.
    pub fn next_batch(&mut self) -> Option<GroupBatch> {
        let p = self.config.p;
        if self.cursor + p > self.order.len() {
            return None;
        }
        let clip_ids = self.order[self.cursor..self.cursor + p].to_vec();
        self.cursor += p;
        let subject_ids: Vec<usize> =
            index::sample(&mut self.rng, self.dataset.subjects(), 2 * self.config.q).into_vec();
        let groups = clip_ids
            .iter()
            .map(|&c| subject_ids.iter().map(|&s| self.dataset.sample(c, s)).collect())
            .collect();
        Some(GroupBatch {
            clip_ids,
            subject_ids,
            groups,
        })
    }
}

impl Iterator for EpochIterator<'_> {
    type Item = GroupBatch;

    fn next(&mut self) -> Option<GroupBatch> {
        self.next_batch()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_clips, Modality, ModalityLayout};

    fn toy(clips: usize, subjects: usize) -> LabeledDataset {
        let m = 4;
        let data: Vec<f32> = (0..clips * subjects * m).map(|i| i as f32).collect();
        LabeledDataset::new(
            [clips, subjects, 1, m],
            4.0,
            ModalityLayout::single(Modality::Eeg, 1),
            data,
            None,
        )
        .unwrap()
    }

    #[test]
    fn smallest_configuration() {
        let ds = toy(4, 4);
        let cfg = SamplerConfig { p: 2, q: 1, seed: 0 };
        let mut it = new_epoch(&ds, cfg, 0).unwrap();
        let b = it.next_batch().unwrap();
        assert_eq!(b.groups.len(), 2);
        assert!(b.groups.iter().all(|g| g.len() == 2));
        for (g, &clip) in b.groups.iter().zip(&b.clip_ids) {
            assert!(g.iter().all(|s| s.tag.clip == clip));
        }
        assert_ne!(b.clip_ids[0], b.clip_ids[1]);
        assert_ne!(b.subject_ids[0], b.subject_ids[1]);
    }

    #[test]
    fn epoch_covers_each_clip_once() {
        let ds = toy(12, 5);
        let cfg = SamplerConfig { p: 3, q: 2, seed: 9 };
        let mut seen: Vec<usize> = new_epoch(&ds, cfg, 0).unwrap().flat_map(|b| b.clip_ids).collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn trailing_batch_is_dropped() {
        let ds = toy(10, 4);
        let cfg = SamplerConfig { p: 4, q: 1, seed: 1 };
        let it = new_epoch(&ds, cfg, 0).unwrap();
        assert_eq!(it.remaining_batches(), 2);
        assert_eq!(it.count(), 2);
    }

    #[test]
    fn p_equal_to_clips_is_one_batch() {
        let ds = toy(6, 2);
        let it = new_epoch(&ds, SamplerConfig { p: 6, q: 1, seed: 0 }, 0).unwrap();
        assert_eq!(it.count(), 1);
    }

    #[test]
    fn respects_train_split() {
        let ds = toy(20, 3);
        let split = split_clips(20, (0.7, 0.15, 0.15), 5).unwrap();
        let train = split.clips(Split::Train);
        let ds = ds.with_split(split).unwrap();
        let it = new_epoch(&ds, SamplerConfig { p: 2, q: 1, seed: 0 }, 0).unwrap();
        let mut seen: Vec<usize> = it.flat_map(|b| b.clip_ids).collect();
        seen.sort();
        assert_eq!(seen, train);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let ds = toy(16, 6);
        let ids = |seed| -> Vec<(Vec<usize>, Vec<usize>)> {
            new_epoch(&ds, SamplerConfig { p: 4, q: 2, seed }, 0)
                .unwrap()
                .map(|b| (b.clip_ids, b.subject_ids))
                .collect()
        };
        assert_eq!(ids(3), ids(3));
        let distinct = (0..20).filter(|&s| ids(s) != ids(3)).count();
        assert!(distinct >= 19, "only {distinct} of 20 seeds differ");
    }

    #[test]
    fn config_errors() {
        let ds = toy(8, 3);
        assert!(new_epoch(&ds, SamplerConfig { p: 2, q: 2, seed: 0 }, 0).is_err());
        assert!(new_epoch(&ds, SamplerConfig { p: 1, q: 1, seed: 0 }, 0).is_err());
        assert!(new_epoch(&ds, SamplerConfig { p: 9, q: 1, seed: 0 }, 0).is_err());
    }

    #[test]
    fn deap_batch_count() {
        assert_eq!(batches_per_epoch(1680, 8), 210);
    }
}
