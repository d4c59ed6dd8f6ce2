//! Synthetic stimulus-aligned datasets.
//!
//! Each clip gets `signature_dim` latent source waveforms, every one a sum of
//! sinusoids. The clip's valence class picks the frequency band (low or
//! high) and its arousal class the amplitude. A subject sees the sources
//! through its own channel-mixing matrix (a shared base plus
//! `subject_noise` times a per-subject perturbation), plus white noise at
//! the given power SNR. Ratings are computed from the clean signature:
//! spectral centroid drives valence, RMS drives arousal.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Modality, ModalityLayout, RatingRecord};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    /// Spectral centroid (Hz) above which valence is rated high.
    pub centroid_hz: f64,
    /// Signature RMS above which arousal is rated high.
    pub rms: f64,
    /// Logistic slopes mapping distance-from-threshold to the 1..9 scale.
    pub centroid_slope: f64,
    pub rms_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub clips: usize,
    pub subjects: usize,
    pub channels: usize,
    pub timepoints: usize,
    pub sample_rate: f64,
    pub signature_dim: usize,
    pub subject_noise: f64,
    /// Signal-to-noise power ratio; `f64::INFINITY` for noiseless samples.
    pub snr: f64,
    pub label_rule: LabelRule,
    pub seed: u64,
}

const LOW_AMP: f64 = 1.0;
const HIGH_AMP: f64 = 2.0;
const TONES: usize = 3;

impl SynthSpec {
    /// Desk-scale default: 32 clips, 8 subjects, 8 channels, 64 timepoints.
    pub fn desk(seed: u64) -> Self {
        Self::new(32, 8, 8, 64, seed)
    }

    pub fn new(clips: usize, subjects: usize, channels: usize, timepoints: usize, seed: u64) -> Self {
        let sample_rate = timepoints as f64;
        Self {
            clips,
            subjects,
            channels,
            timepoints,
            sample_rate,
            signature_dim: 3,
            subject_noise: 0.5,
            snr: 4.0,
            label_rule: LabelRule::for_rate(sample_rate),
            seed,
        }
    }

    /// Frequency bands `(low, high)` in Hz for the two valence classes.
    pub fn bands(&self) -> ((f64, f64), (f64, f64)) {
        let fs = self.sample_rate;
        ((fs / 64.0, fs / 16.0), (fs / 8.0, fs / 4.0))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clips == 0 || self.subjects == 0 || self.channels == 0 || self.signature_dim == 0 {
            return bad("synthetic dimensions must be positive".into());
        }
        if self.timepoints < 4 {
            return bad(format!("need at least 4 timepoints, got {}", self.timepoints));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return bad(format!("sample_rate must be positive, got {}", self.sample_rate));
        }
        if self.snr.is_nan() || self.snr <= 0.0 {
            return bad(format!("snr must be positive, got {}", self.snr));
        }
        if !(self.subject_noise >= 0.0 && self.subject_noise.is_finite()) {
            return bad(format!("subject_noise must be non-negative, got {}", self.subject_noise));
        }
        Ok(())
    }
}

impl LabelRule {
    pub fn for_rate(sample_rate: f64) -> Self {
        let ((_, lo_top), (hi_bottom, _)) = ((sample_rate / 64.0, sample_rate / 16.0), (sample_rate / 8.0, sample_rate / 4.0));
        Self {
            centroid_hz: 0.5 * (lo_top + hi_bottom),
            rms: (LOW_AMP * HIGH_AMP).sqrt(),
            centroid_slope: 8.0 / (hi_bottom - lo_top),
            rms_slope: 8.0 / (HIGH_AMP - LOW_AMP),
        }
    }

    /// `(valence, arousal)` ratings on the 1..9 scale.
    pub fn rate(&self, centroid_hz: f64, rms: f64) -> (f64, f64) {
        let squash = |z: f64| 1.0 + 8.0 / (1.0 + (-z).exp());
        (
            squash(self.centroid_slope * (centroid_hz - self.centroid_hz)),
            squash(self.rms_slope * (rms - self.rms)),
        )
    }
}

/// Power-weighted mean frequency (Hz) of a Hann-windowed real signal, via a
/// direct DFT.
pub fn spectral_centroid(x: &[f64], sample_rate: f64) -> f64 {
    let n = x.len();
    let x: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(t, &v)| v * (0.5 - 0.5 * (2.0 * PI * t as f64 / n as f64).cos()))
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for k in 1..=n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &v) in x.iter().enumerate() {
            let a = 2.0 * PI * (k * t) as f64 / n as f64;
            re += v * a.cos();
            im -= v * a.sin();
        }
        let p = re * re + im * im;
        num += p * k as f64 * sample_rate / n as f64;
        den += p;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Clean clip signatures and intended classes, before subject effects.
pub struct Signatures {
    /// `[clip][source][time]`
    pub sources: Vec<Vec<Vec<f64>>>,
    /// Intended `(valence_high, arousal_high)` per clip.
    pub classes: Vec<(bool, bool)>,
}

pub fn signatures(spec: &SynthSpec) -> Signatures {
    let mut rng = stream(spec.seed, Stream::Synth, u64::MAX);
    let mut codes: Vec<u8> = (0..spec.clips).map(|v| (v % 4) as u8).collect();
    codes.shuffle(&mut rng);
    let classes: Vec<(bool, bool)> = codes.iter().map(|&c| (c & 1 == 1, c & 2 == 2)).collect();
    let (low, high) = spec.bands();
    let m = spec.timepoints;
    let sources = classes
        .iter()
        .enumerate()
        .map(|(v, &(val, aro))| {
            let mut rng = stream(spec.seed, Stream::Synth, v as u64);
            let (f0, f1) = if val { high } else { low };
            let amp = if aro { HIGH_AMP } else { LOW_AMP };
            (0..spec.signature_dim)
                .map(|_| {
                    let tones: Vec<(f64, f64)> = (0..TONES)
                        .map(|_| (rng.random_range(f0..f1), rng.random_range(0.0..2.0 * PI)))
                        .collect();
                    (0..m)
                        .map(|t| {
                            let time = t as f64 / spec.sample_rate;
                            tones
                                .iter()
                                .map(|&(f, ph)| (2.0 * PI * f * time + ph).sin())
                                .sum::<f64>()
                                * amp
                                * (2.0 / TONES as f64).sqrt()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Signatures { sources, classes }
}

fn mixing(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let (c, k) = (spec.channels, spec.signature_dim);
    let scale = 1.0 / (k as f64).sqrt();
    let normal = Normal::new(0.0, scale).expect("finite std");
    let mut base_rng = stream(spec.seed, Stream::Synth, u64::MAX - 1);
    let base: Vec<f64> = (0..c * k).map(|_| normal.sample(&mut base_rng)).collect();
    (0..spec.subjects)
        .map(|s| {
            let mut rng = stream(spec.seed, Stream::Synth, u64::MAX - 2 - s as u64);
            base.iter()
                .map(|&b| b + spec.subject_noise * normal.sample(&mut rng))
                .collect()
        })
        .collect()
}

/// Generate a labelled dataset; identical specs give identical bytes.
pub fn generate(spec: &SynthSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let sig = signatures(spec);
    let mix = mixing(spec);
    let (v_n, s_n, c_n, m) = (spec.clips, spec.subjects, spec.channels, spec.timepoints);
    let k = spec.signature_dim;
    let per_clip = |v: usize| -> Vec<f32> {
        let mut rng = stream(spec.seed, Stream::Synth, (1 << 40) | v as u64);
        let mut out = Vec::with_capacity(s_n * c_n * m);
        for mx in &mix {
            let mut clean = vec![0.0f64; c_n * m];
            for ch in 0..c_n {
                for src in 0..k {
                    let w = mx[ch * k + src];
                    for (o, &x) in clean[ch * m..(ch + 1) * m].iter_mut().zip(&sig.sources[v][src]) {
                        *o += w * x;
                    }
                }
            }
            let power = clean.iter().map(|x| x * x).sum::<f64>() / clean.len() as f64;
            let std = if spec.snr.is_infinite() { 0.0 } else { (power / spec.snr).sqrt() };
            if std > 0.0 {
                let noise = Normal::new(0.0, std).expect("finite std");
                for o in &mut clean {
                    *o += noise.sample(&mut rng);
                }
            }
            out.extend(clean.iter().map(|&x| x as f32));
        }
        out
    };
    #[cfg(feature = "parallel")]
    let blocks: Vec<Vec<f32>> = {
        use rayon::prelude::*;
        (0..v_n).into_par_iter().map(per_clip).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let blocks: Vec<Vec<f32>> = (0..v_n).map(per_clip).collect();
    let data: Vec<f32> = blocks.concat();
    let mut ratings = Vec::with_capacity(v_n * s_n);
    for v in 0..v_n {
        let sum: Vec<f64> = (0..m).map(|t| sig.sources[v].iter().map(|s| s[t]).sum()).collect();
        let r = (0..k).map(|i| rms(&sig.sources[v][i])).sum::<f64>() / k as f64;
        let (valence, arousal) = spec.label_rule.rate(spectral_centroid(&sum, spec.sample_rate), r);
        for s in 0..s_n {
            ratings.push(RatingRecord {
                subject_id: s,
                clip_id: v,
                valence,
                arousal,
            });
        }
    }
    LabeledDataset::new(
        [v_n, s_n, c_n, m],
        spec.sample_rate,
        ModalityLayout::single(Modality::Eeg, c_n),
        data,
        Some(ratings),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    /// Leave-half-subjects-out nearest-centroid clip identification accuracy.
    pub probe_accuracy: f64,
    pub chance: f64,
    pub within_clip_correlation: f64,
    pub between_clip_correlation: f64,
    /// Prevalence of each four-class code.
    pub class_balance: [f64; 4],
    /// Fraction of clips whose rated class equals the intended class.
    pub label_agreement: f64,
}

impl SelfCheck {
    pub fn passed(&self) -> bool {
        self.probe_accuracy > self.chance
            && self.within_clip_correlation > self.between_clip_correlation
            && self.class_balance.iter().all(|&p| p >= 0.1)
    }
}

fn correlation(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Statistical checks that the generated data carries stimulus structure.
pub fn self_check(spec: &SynthSpec, dataset: &LabeledDataset) -> SelfCheck {
    let (v_n, s_n) = (dataset.clips(), dataset.subjects());
    let fit = s_n.div_ceil(2).min(s_n.saturating_sub(1)).max(1);
    let len = dataset.channels() * dataset.timepoints();
    let centroids: Vec<Vec<f64>> = (0..v_n)
        .map(|v| {
            let mut c = vec![0.0; len];
            for s in 0..fit {
                for (o, &x) in c.iter_mut().zip(dataset.sample_data(v, s)) {
                    *o += x as f64 / fit as f64;
                }
            }
            c
        })
        .collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for v in 0..v_n {
        for s in fit..s_n {
            let x = dataset.sample_data(v, s);
            let nearest = (0..v_n)
                .min_by(|&a, &b| {
                    let d = |c: &Vec<f64>| c.iter().zip(x).map(|(p, &q)| (p - q as f64).powi(2)).sum::<f64>();
                    d(&centroids[a]).total_cmp(&d(&centroids[b]))
                })
                .unwrap_or(0);
            hits += (nearest == v) as usize;
            total += 1;
        }
    }
    let (mut within, mut wn, mut between, mut bn) = (0.0, 0usize, 0.0, 0usize);
    for v in 0..v_n {
        for s in 0..s_n {
            for t in (s + 1)..s_n {
                within += correlation(dataset.sample_data(v, s), dataset.sample_data(v, t));
                wn += 1;
            }
            let u = (v + 1) % v_n;
            if u != v {
                between += correlation(dataset.sample_data(v, s), dataset.sample_data(u, s));
                bn += 1;
            }
        }
    }
    let sig = signatures(spec);
    let agree = (0..v_n)
        .filter(|&v| {
            let l = dataset.labels(v, 0).expect("synthetic data is labelled");
            (l.valence_high, l.arousal_high) == sig.classes[v]
        })
        .count();
    SelfCheck {
        probe_accuracy: if total > 0 { hits as f64 / total as f64 } else { 0.0 },
        chance: 1.0 / v_n as f64,
        within_clip_correlation: if wn > 0 { within / wn as f64 } else { 0.0 },
        between_clip_correlation: if bn > 0 { between / bn as f64 } else { 0.0 },
        class_balance: dataset.class_balance().unwrap_or([0.0; 4]),
        label_agreement: agree as f64 / v_n as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_limit_makes_subjects_identical() {
        let mut spec = SynthSpec::new(4, 3, 2, 16, 1);
        spec.snr = f64::INFINITY;
        spec.subject_noise = 0.0;
        let ds = generate(&spec).unwrap();
        for v in 0..4 {
            assert_eq!(ds.sample_data(v, 0), ds.sample_data(v, 1));
            assert_eq!(ds.sample_data(v, 0), ds.sample_data(v, 2));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec::new(6, 3, 2, 16, 5);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.raw(), b.raw());
        assert_eq!(a.ratings(), b.ratings());
        let c = generate(&SynthSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a.raw(), c.raw());
    }

    #[test]
    fn desk_spec_self_check() {
        let spec = SynthSpec::desk(0);
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.dims(), [32, 8, 1, 8, 64]);
        let chk = self_check(&spec, &ds);
        assert!(chk.passed(), "{chk:?}");
        assert_eq!(chk.label_agreement, 1.0, "{chk:?}");
    }

    #[test]
    fn centroid_and_rms_of_pure_tone() {
        let fs = 64.0;
        let x: Vec<f64> = (0..64).map(|t| (2.0 * PI * 8.0 * t as f64 / fs).sin()).collect();
        assert!((spectral_centroid(&x, fs) - 8.0).abs() < 1e-9);
        assert!((rms(&x) - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs() {
        let mut s = SynthSpec::desk(0);
        s.snr = 0.0;
        assert!(generate(&s).is_err());
        let mut s = SynthSpec::desk(0);
        s.timepoints = 3;
        assert!(generate(&s).is_err());
    }
}
