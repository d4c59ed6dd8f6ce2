use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Labels, LabeledDataset, MeSample, ModalityLayout, RatingRecord, SampleTag, Split, SplitAssignment};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 5.0;
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.70, 0.15, 0.15);

/// One continuous recording `[channels × total_T]`: baseline then stimulus.
#[derive(Clone, Debug)]
pub struct RawTrial {
    pub data: Vec<f32>,
    pub channels: usize,
    /// Samples per second; also the window width.
    pub sample_rate: usize,
    pub layout: Arc<ModalityLayout>,
    pub clip_offset: usize,
    pub subject: usize,
}

/// Cut a trial into 1-second windows and subtract the mean baseline window.
///
/// The baseline windows are averaged element-wise into one `[C × rate]`
/// window, which is then subtracted from each of the `stimulus_seconds`
/// stimulus windows. Segment `k` is tagged with clip `clip_offset + k`.
pub fn window_and_debaseline(
    raw: &RawTrial,
    baseline_seconds: usize,
    stimulus_seconds: usize,
) -> Result<Vec<MeSample>> {
    let rate = raw.sample_rate;
    if rate == 0 {
        return Err(Error::InvalidArgument("sample rate must be positive".into()));
    }
    if baseline_seconds < 1 {
        return Err(Error::InvalidArgument(
            "at least one baseline second is required".into(),
        ));
    }
    let total = (baseline_seconds + stimulus_seconds) * rate;
    if raw.channels == 0 || raw.data.len() % raw.channels != 0 {
        return Err(Error::Shape(format!(
            "{} values cannot be split into {} channels",
            raw.data.len(),
            raw.channels
        )));
    }
    let len = raw.data.len() / raw.channels;
    if len < total {
        return Err(Error::Shape(format!(
            "trial has {len} timepoints, {baseline_seconds}s baseline + {stimulus_seconds}s stimulus at {rate} Hz needs {total}"
        )));
    }
    let c = raw.channels;
    let mut baseline = vec![0.0f64; c * rate];
    for ch in 0..c {
        let row = &raw.data[ch * len..(ch + 1) * len];
        for w in 0..baseline_seconds {
            for t in 0..rate {
                baseline[ch * rate + t] += row[w * rate + t] as f64;
            }
        }
    }
    for v in &mut baseline {
        *v /= baseline_seconds as f64;
    }
    let mut out = Vec::with_capacity(stimulus_seconds);
    for s in 0..stimulus_seconds {
        let start = (baseline_seconds + s) * rate;
        let mut seg = vec![0.0f32; c * rate];
        for ch in 0..c {
            let row = &raw.data[ch * len..(ch + 1) * len];
            for t in 0..rate {
                seg[ch * rate + t] = (row[start + t] as f64 - baseline[ch * rate + t]) as f32;
            }
        }
        out.push(MeSample::new(
            seg,
            c,
            rate,
            rate as f64,
            Arc::clone(&raw.layout),
            SampleTag::original(raw.clip_offset + s, raw.subject),
        )?);
    }
    Ok(out)
}

/// High iff the rating is strictly above the threshold.
pub fn threshold_labels(record: &RatingRecord, threshold: f64) -> Labels {
    Labels::new(record.valence > threshold, record.arousal > threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
    pub val: usize,
}

fn validate_ratios(ratios: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    Ok(())
}

/// `train = ⌊r_train·V⌋`, `test = ⌊r_test·V⌋`, `val` takes the remainder.
pub fn split_counts(clips: usize, ratios: (f64, f64, f64)) -> Result<SplitCounts> {
    validate_ratios(ratios)?;
    if clips < 3 {
        return Err(Error::InvalidArgument(format!(
            "splitting needs at least 3 clips, got {clips}"
        )));
    }
    // the epsilon absorbs products such as 0.7 * 2400 = 1679.9999...
    let floor = |r: f64| ((r * clips as f64) + 1e-9).floor() as usize;
    let train = floor(ratios.0).min(clips);
    let test = floor(ratios.1).min(clips - train);
    Ok(SplitCounts {
        train,
        test,
        val: clips - train - test,
    })
}

/// Seeded clip-level partition.
pub fn split_clips(clips: usize, ratios: (f64, f64, f64), seed: u64) -> Result<SplitAssignment> {
    let counts = split_counts(clips, ratios)?;
    let mut order: Vec<usize> = (0..clips).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut clip_split = vec![Split::Val; clips];
    for &c in &order[..counts.train] {
        clip_split[c] = Split::Train;
    }
    for &c in &order[counts.train..counts.train + counts.test] {
        clip_split[c] = Split::Test;
    }
    Ok(SplitAssignment {
        clip_split,
        seed,
        ratios,
    })
}

pub fn split_dataset(
    dataset: LabeledDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<LabeledDataset> {
    let split = split_clips(dataset.clips(), ratios, seed)?;
    dataset.with_split(split)
}

/// Flat `(samples, 1, C, M)` view of one split: sample `k` is
/// `(clips[k / S], k % S)`.
pub struct FinetuneView<'a> {
    dataset: &'a LabeledDataset,
    clips: Vec<usize>,
}

impl<'a> FinetuneView<'a> {
    pub fn len(&self) -> usize {
        self.clips.len() * self.dataset.subjects()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[samples, 1, channels, timepoints]`
    pub fn shape(&self) -> [usize; 4] {
        [self.len(), 1, self.dataset.channels(), self.dataset.timepoints()]
    }

    pub fn index(&self, k: usize) -> (usize, usize) {
        let s = self.dataset.subjects();
        (self.clips[k / s], k % s)
    }

    pub fn data(&self, k: usize) -> &'a [f32] {
        let (c, s) = self.index(k);
        self.dataset.sample_data(c, s)
    }

    pub fn labels(&self, k: usize) -> Option<Labels> {
        let (c, s) = self.index(k);
        self.dataset.labels(c, s)
    }

    pub fn dataset(&self) -> &'a LabeledDataset {
        self.dataset
    }
}

pub fn reshape_for_finetune(dataset: &LabeledDataset, split: Split) -> FinetuneView<'_> {
    FinetuneView {
        dataset,
        clips: dataset.clips_in(split),
    }
}

/// Recording protocol of a source corpus, for clip/segment arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingGeometry {
    pub trials: usize,
    pub subjects: usize,
    pub baseline_seconds: usize,
    pub stimulus_seconds: usize,
    pub sample_rate: usize,
    pub channels: usize,
}

impl RecordingGeometry {
    /// 40 one-minute videos, 32 subjects, 3 s baseline, 128 Hz.
    pub fn deap() -> Self {
        Self {
            trials: 40,
            subjects: 32,
            baseline_seconds: 3,
            stimulus_seconds: 60,
            sample_rate: 128,
            channels: 36,
        }
    }

    /// 20 labelled trials of 24 one-second windows, 25 subjects, 256 Hz.
    pub fn mahnob() -> Self {
        Self {
            trials: 20,
            subjects: 25,
            baseline_seconds: 3,
            stimulus_seconds: 24,
            sample_rate: 256,
            channels: 36,
        }
    }

    /// Number of one-second clips (the clip axis of the container).
    pub fn clips(&self) -> usize {
        self.trials * self.stimulus_seconds
    }

    pub fn clip_split(&self, ratios: (f64, f64, f64)) -> Result<SplitCounts> {
        split_counts(self.clips(), ratios)
    }

    /// Fine-tune segment counts: clip counts times subjects.
    pub fn segment_split(&self, ratios: (f64, f64, f64)) -> Result<SplitCounts> {
        let c = self.clip_split(ratios)?;
        Ok(SplitCounts {
            train: c.train * self.subjects,
            test: c.test * self.subjects,
            val: c.val * self.subjects,
        })
    }
}
