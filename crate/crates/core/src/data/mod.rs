//! Dataset types, the on-disk container and the preprocessing pipeline.

mod container;
mod preprocess;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{load_container, save_container, ContainerMetadata, CONTAINER_VERSION};
pub use preprocess::{
    reshape_for_finetune, split_clips, split_counts, split_dataset, threshold_labels,
    window_and_debaseline, FinetuneView, RawTrial, RecordingGeometry, SplitCounts,
    DEFAULT_RATIOS, DEFAULT_THRESHOLD,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "EEG")]
    Eeg,
    #[serde(rename = "GSR")]
    Gsr,
    #[serde(rename = "Resp")]
    Resp,
    #[serde(rename = "Temp")]
    Temp,
    #[serde(rename = "Other")]
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub modality: Modality,
    pub channels: usize,
}

/// Ordered partition of the channel axis into modalities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModalityLayout {
    pub entries: Vec<ModalityEntry>,
}

impl ModalityLayout {
    pub fn new(entries: Vec<(Modality, usize)>) -> Result<Self> {
        let layout = Self {
            entries: entries
                .into_iter()
                .map(|(modality, channels)| ModalityEntry { modality, channels })
                .collect(),
        };
        layout.validate()?;
        Ok(layout)
    }

    /// All channels of one modality.
    pub fn single(modality: Modality, channels: usize) -> Self {
        Self {
            entries: vec![ModalityEntry { modality, channels }],
        }
    }

    /// 32 EEG + GSR + Resp + Temp, padded with `Other` up to `total`.
    pub fn physiological(total: usize) -> Result<Self> {
        let mut entries = vec![
            (Modality::Eeg, 32),
            (Modality::Gsr, 1),
            (Modality::Resp, 1),
            (Modality::Temp, 1),
        ];
        if total < 35 {
            return Err(Error::Config(format!(
                "physiological layout needs at least 35 channels, got {total}"
            )));
        }
        if total > 35 {
            entries.push((Modality::Other, total - 35));
        }
        Self::new(entries)
    }

    pub fn total_channels(&self) -> usize {
        self.entries.iter().map(|e| e.channels).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("modality layout is empty".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.channels == 0 {
                return Err(Error::Config(format!(
                    "modality {:?} has zero channels",
                    e.modality
                )));
            }
            if self.entries[..i].iter().any(|o| o.modality == e.modality) {
                return Err(Error::Config(format!(
                    "modality {:?} listed twice",
                    e.modality
                )));
            }
        }
        Ok(())
    }
}

/// Where a (possibly crossed-over) sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleTag {
    pub clip: usize,
    /// Subject whose data fills timepoints `0..c`.
    pub prefix_subject: usize,
    /// Subject whose data fills timepoints `c..M`.
    pub suffix_subject: usize,
}

impl SampleTag {
    pub fn original(clip: usize, subject: usize) -> Self {
        Self {
            clip,
            prefix_subject: subject,
            suffix_subject: subject,
        }
    }
}

/// One windowed multimodal segment, `[channels × timepoints]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MeSample {
    data: Vec<f32>,
    channels: usize,
    timepoints: usize,
    pub sample_rate: f64,
    pub layout: Arc<ModalityLayout>,
    pub tag: SampleTag,
}

impl MeSample {
    pub fn new(
        data: Vec<f32>,
        channels: usize,
        timepoints: usize,
        sample_rate: f64,
        layout: Arc<ModalityLayout>,
        tag: SampleTag,
    ) -> Result<Self> {
        if data.len() != channels * timepoints {
            return Err(Error::Shape(format!(
                "sample data has {} values, expected {channels}x{timepoints}",
                data.len()
            )));
        }
        if timepoints <= 2 {
            return Err(Error::Shape(format!(
                "samples need more than 2 timepoints, got {timepoints}"
            )));
        }
        if layout.total_channels() != channels {
            return Err(Error::Shape(format!(
                "layout declares {} channels, sample has {channels}",
                layout.total_channels()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("channel {}, time {}", i / timepoints, i % timepoints),
                value: data[i] as f64,
            });
        }
        Ok(Self {
            data,
            channels,
            timepoints,
            sample_rate,
            layout,
            tag,
        })
    }

    pub(crate) fn from_parts_unchecked(
        data: Vec<f32>,
        template: &MeSample,
        tag: SampleTag,
    ) -> Self {
        Self {
            data,
            channels: template.channels,
            timepoints: template.timepoints,
            sample_rate: template.sample_rate,
            layout: Arc::clone(&template.layout),
            tag,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn timepoints(&self) -> usize {
        self.timepoints
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.timepoints..(c + 1) * self.timepoints]
    }
}

/// Self-reported valence/arousal for one (subject, clip) pair, both in `[1, 9]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub subject_id: usize,
    pub clip_id: usize,
    pub valence: f64,
    pub arousal: f64,
}

impl RatingRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("valence", self.valence), ("arousal", self.arousal)] {
            if !(1.0..=9.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "{name} {v} for subject {} clip {} is outside [1, 9]",
                    self.subject_id, self.clip_id
                )));
            }
        }
        Ok(())
    }
}

/// Binary labels and the derived four-class code
/// (`0 = LV/LA, 1 = HV/LA, 2 = LV/HA, 3 = HV/HA`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub valence_high: bool,
    pub arousal_high: bool,
    pub four_class: u8,
}

impl Labels {
    pub fn new(valence_high: bool, arousal_high: bool) -> Self {
        Self {
            valence_high,
            arousal_high,
            four_class: 2 * arousal_high as u8 + valence_high as u8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelTask {
    Valence,
    Arousal,
    #[serde(alias = "four")]
    FourClass,
}

impl LabelTask {
    pub fn num_classes(self) -> usize {
        match self {
            LabelTask::Valence | LabelTask::Arousal => 2,
            LabelTask::FourClass => 4,
        }
    }

    pub fn target(self, labels: &Labels) -> usize {
        match self {
            LabelTask::Valence => labels.valence_high as usize,
            LabelTask::Arousal => labels.arousal_high as usize,
            LabelTask::FourClass => labels.four_class as usize,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelTask::Valence => "valence",
            LabelTask::Arousal => "arousal",
            LabelTask::FourClass => "four_class",
        }
    }
}

impl std::str::FromStr for LabelTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valence" => Ok(LabelTask::Valence),
            "arousal" => Ok(LabelTask::Arousal),
            "four" | "four_class" | "four-class" => Ok(LabelTask::FourClass),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected valence, arousal or four)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" | "validation" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Clip-level split; the fine-tune view inherits it for every subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub clip_split: Vec<Split>,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
}

impl SplitAssignment {
    /// Clips in `split`, ascending.
    pub fn clips(&self, split: Split) -> Vec<usize> {
        self.clip_split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.clip_split.iter().filter(|s| **s == split).count()
    }
}

/// In-memory dataset: `[clips × subjects × 1 × channels × timepoints]` f32.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    clips: usize,
    subjects: usize,
    channels: usize,
    timepoints: usize,
    pub sample_rate: f64,
    pub layout: Arc<ModalityLayout>,
    samples: Arc<Vec<f32>>,
    /// Indexed by `clip * subjects + subject`.
    ratings: Option<Vec<RatingRecord>>,
    labels: Option<Vec<Labels>>,
    pub split: Option<SplitAssignment>,
}

impl LabeledDataset {
    /// Validates shape, finiteness, layout and rating coverage.
    pub fn new(
        dims: [usize; 4],
        sample_rate: f64,
        layout: ModalityLayout,
        samples: Vec<f32>,
        ratings: Option<Vec<RatingRecord>>,
    ) -> Result<Self> {
        let [clips, subjects, channels, timepoints] = dims;
        if clips == 0 || subjects == 0 || channels == 0 || timepoints <= 2 {
            return Err(Error::Shape(format!(
                "invalid dataset dims {dims:?} (need positive sizes and more than 2 timepoints)"
            )));
        }
        layout.validate()?;
        if layout.total_channels() != channels {
            return Err(Error::Shape(format!(
                "layout declares {} channels, dataset has {channels}",
                layout.total_channels()
            )));
        }
        let expected = clips * subjects * channels * timepoints;
        if samples.len() != expected {
            return Err(Error::Shape(format!(
                "payload has {} values, dims {dims:?} need {expected}",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            let per_sample = channels * timepoints;
            let (pair, within) = (i / per_sample, i % per_sample);
            return Err(Error::NonFinite {
                location: format!(
                    "index {i} (clip {}, subject {}, channel {}, time {})",
                    pair / subjects,
                    pair % subjects,
                    within / timepoints,
                    within % timepoints
                ),
                value: samples[i] as f64,
            });
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::Config(format!("invalid sample rate {sample_rate}")));
        }
        let (ratings, labels) = match ratings {
            None => (None, None),
            Some(rows) => {
                let mut table: Vec<Option<RatingRecord>> = vec![None; clips * subjects];
                for r in rows {
                    r.validate()?;
                    if r.clip_id >= clips || r.subject_id >= subjects {
                        return Err(Error::InvalidArgument(format!(
                            "rating for subject {} clip {} is outside the dataset",
                            r.subject_id, r.clip_id
                        )));
                    }
                    let slot = &mut table[r.clip_id * subjects + r.subject_id];
                    if slot.is_some() {
                        return Err(Error::InvalidArgument(format!(
                            "duplicate rating for subject {} clip {}",
                            r.subject_id, r.clip_id
                        )));
                    }
                    *slot = Some(r);
                }
                let mut complete = Vec::with_capacity(table.len());
                for (i, r) in table.into_iter().enumerate() {
                    complete.push(r.ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "missing rating for subject {} clip {}",
                            i % subjects,
                            i / subjects
                        ))
                    })?);
                }
                let labels = complete
                    .iter()
                    .map(|r| threshold_labels(r, DEFAULT_THRESHOLD))
                    .collect();
                (Some(complete), Some(labels))
            }
        };
        Ok(Self {
            clips,
            subjects,
            channels,
            timepoints,
            sample_rate,
            layout: Arc::new(layout),
            samples: Arc::new(samples),
            ratings,
            labels,
            split: None,
        })
    }

    pub fn clips(&self) -> usize {
        self.clips
    }

    pub fn subjects(&self) -> usize {
        self.subjects
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn timepoints(&self) -> usize {
        self.timepoints
    }

    /// `[V, S, 1, C, M]`
    pub fn dims(&self) -> [usize; 5] {
        [self.clips, self.subjects, 1, self.channels, self.timepoints]
    }

    pub fn raw(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_data(&self, clip: usize, subject: usize) -> &[f32] {
        let n = self.channels * self.timepoints;
        let off = (clip * self.subjects + subject) * n;
        &self.samples[off..off + n]
    }

    pub fn sample(&self, clip: usize, subject: usize) -> MeSample {
        MeSample {
            data: self.sample_data(clip, subject).to_vec(),
            channels: self.channels,
            timepoints: self.timepoints,
            sample_rate: self.sample_rate,
            layout: Arc::clone(&self.layout),
            tag: SampleTag::original(clip, subject),
        }
    }

    pub fn ratings(&self) -> Option<&[RatingRecord]> {
        self.ratings.as_deref()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn labels(&self, clip: usize, subject: usize) -> Option<Labels> {
        self.labels
            .as_ref()
            .map(|l| l[clip * self.subjects + subject])
    }

    /// Re-derive binary labels with a different threshold.
    pub fn relabel(&mut self, threshold: f64) {
        if let Some(r) = &self.ratings {
            self.labels = Some(r.iter().map(|r| threshold_labels(r, threshold)).collect());
        }
    }

    pub fn with_split(mut self, split: SplitAssignment) -> Result<Self> {
        if split.clip_split.len() != self.clips {
            return Err(Error::Shape(format!(
                "split covers {} clips, dataset has {}",
                split.clip_split.len(),
                self.clips
            )));
        }
        self.split = Some(split);
        Ok(self)
    }

    /// Replace the modality layout; the channel total must not change.
    pub fn with_layout(mut self, layout: ModalityLayout) -> Result<Self> {
        layout.validate()?;
        if layout.total_channels() != self.channels {
            return Err(Error::Shape(format!(
                "layout declares {} channels, dataset has {}",
                layout.total_channels(),
                self.channels
            )));
        }
        self.layout = Arc::new(layout);
        Ok(self)
    }

    /// Clips of a split; every clip when no split has been assigned.
    pub fn clips_in(&self, split: Split) -> Vec<usize> {
        match &self.split {
            Some(s) => s.clips(split),
            None => (0..self.clips).collect(),
        }
    }

    /// Fraction of (clip, subject) pairs per four-class code.
    pub fn class_balance(&self) -> Option<[f64; 4]> {
        let labels = self.labels.as_ref()?;
        let mut counts = [0usize; 4];
        for l in labels {
            counts[l.four_class as usize] += 1;
        }
        let n = labels.len() as f64;
        Some(counts.map(|c| c as f64 / n))
    }
}
