//! Synthetic digit-string corpus with known ground truth, manifests,
//! enrollment lists and trial lists.
//!
//! A synthetic frame is `state mean + speaker offset + channel offset +
//! noise`: every digit has latent state means, every speaker a per-digit
//! offset, every utterance a channel offset. Channel offsets live in a
//! fixed low-dimensional subspace of the feature space, so they are
//! separable from speaker variability by within-class compensation.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{AudioBuffer, FeatureMatrix};
use crate::hmm::Alignment;
use crate::scoring::{digits_to_string, label_to_str, parse_digits, parse_label, Trial};

/// Manifest path marker for utterances stored only as features.
pub const SYNTHETIC_PATH: &str = "-";
pub const AUDIO_SAMPLE_RATE: u32 = 16000;
const AUDIO_SAMPLES_PER_FRAME: usize = 160;
const AUDIO_PADDING_FRAMES: usize = 20;

/// Independent RNG stream for `(seed, label)`; stable across platforms and
/// thread schedules.
pub fn derived_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Leading utterances of every speaker that contain all ten digits once,
    /// in random order; used for enrollment.
    pub enroll_utts_per_speaker: usize,
    pub digits_per_utt: usize,
    pub feature_dim: usize,
    pub states_per_digit: usize,
    pub frames_per_state_mean: usize,
    /// Durations are uniform in `mean ± jitter`, at least one frame.
    pub frames_per_state_jitter: usize,
    pub state_mean_scale: f64,
    pub speaker_offset_scale: f64,
    pub channel_offset_scale: f64,
    /// Dimension of the channel subspace; 0 or ≥ `feature_dim` makes channel
    /// offsets isotropic.
    pub channel_rank: usize,
    pub noise_scale: f64,
    pub background_fraction: f64,
    pub development_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 40,
            utts_per_speaker: 8,
            enroll_utts_per_speaker: 3,
            digits_per_utt: 5,
            feature_dim: 10,
            states_per_digit: 4,
            frames_per_state_mean: 8,
            frames_per_state_jitter: 2,
            state_mean_scale: 10.0,
            speaker_offset_scale: 5.0,
            channel_offset_scale: 0.0,
            channel_rank: 2,
            noise_scale: 1.0,
            background_fraction: 0.5,
            development_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_speakers", self.n_speakers),
            ("utts_per_speaker", self.utts_per_speaker),
            ("digits_per_utt", self.digits_per_utt),
            ("feature_dim", self.feature_dim),
            ("states_per_digit", self.states_per_digit),
            ("frames_per_state_mean", self.frames_per_state_mean),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.enroll_utts_per_speaker > self.utts_per_speaker {
            return Err(Error::Config("enroll_utts_per_speaker exceeds utts_per_speaker".into()));
        }
        let scales = [
            ("state_mean_scale", self.state_mean_scale),
            ("speaker_offset_scale", self.speaker_offset_scale),
            ("channel_offset_scale", self.channel_offset_scale),
            ("noise_scale", self.noise_scale),
        ];
        if let Some((name, v)) = scales.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
        }
        let (b, d) = (self.background_fraction, self.development_fraction);
        if !(b > 0.0 && d >= 0.0 && b + d < 1.0) {
            return Err(Error::Config(format!("split fractions {b} + {d} leave no evaluation speakers")));
        }
        Ok(())
    }

    fn split_sizes(&self) -> (usize, usize) {
        let n = self.n_speakers as f64;
        let bg = ((n * self.background_fraction).round() as usize).max(1);
        let dev = (n * self.development_fraction).round() as usize;
        let dev = dev.min(self.n_speakers.saturating_sub(bg + 1));
        (bg, dev)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Background,
    Development,
    Evaluation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Background => "background",
            Self::Development => "development",
            Self::Evaluation => "evaluation",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "background" => Ok(Self::Background),
            "development" => Ok(Self::Development),
            "evaluation" => Ok(Self::Evaluation),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub gender: String,
    pub split: Split,
    pub digits: Vec<u8>,
    /// Audio path, or [`SYNTHETIC_PATH`] for feature-only utterances.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// `utt_id speaker_id gender split digit_string path` per line.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                format!(
                    "{} {} {} {} {} {}\n",
                    e.utt_id,
                    e.speaker_id,
                    e.gender,
                    e.split,
                    digits_to_string(&e.digits),
                    e.path
                )
            })
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", f.len())));
            }
            entries.push(ManifestEntry {
                utt_id: f[0].to_string(),
                speaker_id: f[1].to_string(),
                gender: f[2].to_string(),
                split: f[3].parse().map_err(|_| err(format!("unknown split `{}`", f[3])))?,
                digits: parse_digits(f[4]).ok_or_else(|| err(format!("bad digit string `{}`", f[4])))?,
                path: f[5].to_string(),
            });
        }
        let manifest = Self { entries };
        manifest.check()?;
        Ok(manifest)
    }

    /// Unique utterance ids, one gender and one split per speaker.
    pub fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut speakers: BTreeMap<&str, (&str, Split)> = BTreeMap::new();
        for e in &self.entries {
            if !seen.insert(e.utt_id.as_str()) {
                return Err(Error::Config(format!("duplicate utterance id {}", e.utt_id)));
            }
            let prev = *speakers.entry(e.speaker_id.as_str()).or_insert((e.gender.as_str(), e.split));
            if prev.1 != e.split {
                return Err(Error::Config(format!("speaker {} appears in splits {} and {}", e.speaker_id, prev.1, e.split)));
            }
            if prev.0 != e.gender {
                return Err(Error::Config(format!("speaker {} has genders {} and {}", e.speaker_id, prev.0, e.gender)));
            }
        }
        Ok(())
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, utt_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utt_id == utt_id)
    }

    pub fn speakers(&self, split: Split) -> BTreeSet<&str> {
        self.in_split(split).map(|e| e.speaker_id.as_str()).collect()
    }

    /// Gender tag of every speaker.
    pub fn genders(&self) -> BTreeMap<String, String> {
        self.entries.iter().map(|e| (e.speaker_id.clone(), e.gender.clone())).collect()
    }
}

/// A speaker model and the utterances it is enrolled from.
#[derive(Debug, Clone, PartialEq)]
pub struct Enrollment {
    pub model_id: String,
    pub speaker_id: String,
    pub utterances: Vec<String>,
}

/// `model_id speaker_id utt...` per line.
pub fn format_enrollments(enrollments: &[Enrollment]) -> String {
    enrollments
        .iter()
        .map(|e| format!("{} {} {}\n", e.model_id, e.speaker_id, e.utterances.join(" ")))
        .collect()
}

pub fn parse_enrollments(text: &str) -> Result<Vec<Enrollment>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 3 {
            return Err(Error::Parse { line: i + 1, msg: "expected a model id, a speaker id and at least one utterance".into() });
        }
        out.push(Enrollment {
            model_id: f[0].to_string(),
            speaker_id: f[1].to_string(),
            utterances: f[2..].iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(out)
}

/// `enroll_model_id test_utt_id digit_string [target|nontarget]` per line.
pub fn format_trial_list(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        out.push_str(&format!("{} {} {}", t.enroll, t.test, digits_to_string(&t.digits)));
        if let Some(l) = t.label {
            out.push(' ');
            out.push_str(label_to_str(l));
        }
        out.push('\n');
    }
    out
}

pub fn parse_trial_list(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 && f.len() != 4 {
            return Err(err(format!("expected 3 or 4 fields, found {}", f.len())));
        }
        out.push(Trial {
            enroll: f[0].to_string(),
            test: f[1].to_string(),
            digits: parse_digits(f[2]).ok_or_else(|| err(format!("bad digit string `{}`", f[2])))?,
            label: match f.get(3) {
                Some(l) => Some(parse_label(l).ok_or_else(|| err(format!("bad label `{l}`")))?),
                None => None,
            },
        });
    }
    if out.is_empty() {
        log::warn!("trial list is empty");
    }
    Ok(out)
}

/// Target and nontarget counts of a trial list.
pub fn trial_counts(trials: &[Trial]) -> (usize, usize) {
    let targets = trials.iter().filter(|t| t.label == Some(true)).count();
    let nontargets = trials.iter().filter(|t| t.label == Some(false)).count();
    (targets, nontargets)
}

/// Full cross product of models and test utterances, labelled by speaker.
pub fn generate_trials(
    enrollments: &[Enrollment],
    tests: &[&ManifestEntry],
    genders: &BTreeMap<String, String>,
    same_gender_only: bool,
) -> Vec<Trial> {
    let mut out = Vec::new();
    for e in enrollments {
        for t in tests {
            if same_gender_only && genders.get(&e.speaker_id) != Some(&t.gender) {
                continue;
            }
            out.push(Trial {
                enroll: e.model_id.clone(),
                test: t.utt_id.clone(),
                digits: t.digits.clone(),
                label: Some(e.speaker_id == t.speaker_id),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Per digit, `states_per_digit` latent means.
    pub state_means: BTreeMap<u8, Vec<Vec<f64>>>,
    pub speaker_offsets: BTreeMap<String, BTreeMap<u8, Vec<f64>>>,
    pub channel_offsets: BTreeMap<String, Vec<f64>>,
    pub alignments: BTreeMap<String, Alignment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub manifest: Manifest,
    pub features: Vec<FeatureMatrix>,
    pub enrollments: Vec<Enrollment>,
    pub truth: GroundTruth,
}

impl SyntheticCorpus {
    /// Non-enrollment utterances of a split.
    pub fn test_utterances(&self, split: Split) -> Vec<&ManifestEntry> {
        let enrolled: BTreeSet<&str> =
            self.enrollments.iter().flat_map(|e| e.utterances.iter().map(String::as_str)).collect();
        self.manifest.in_split(split).filter(|e| !enrolled.contains(e.utt_id.as_str())).collect()
    }

    /// Enrollments whose speaker belongs to `split`.
    pub fn enrollments_in(&self, split: Split) -> Vec<Enrollment> {
        let speakers = self.manifest.speakers(split);
        self.enrollments.iter().filter(|e| speakers.contains(e.speaker_id.as_str())).cloned().collect()
    }

    pub fn trials(&self, split: Split, same_gender_only: bool) -> Vec<Trial> {
        generate_trials(&self.enrollments_in(split), &self.test_utterances(split), &self.manifest.genders(), same_gender_only)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Unit-norm basis vectors of the channel subspace; empty for isotropic
/// channels.
fn channel_basis(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    if cfg.channel_rank == 0 || cfg.channel_rank >= cfg.feature_dim {
        return Vec::new();
    }
    let mut rng = derived_rng(cfg.seed, "channel-basis");
    (0..cfg.channel_rank)
        .map(|_| {
            let v = gaussian_vec(&mut rng, cfg.feature_dim, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn channel_offset(basis: &[Vec<f64>], rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    if basis.is_empty() {
        return gaussian_vec(rng, dim, scale);
    }
    let z = gaussian_vec(rng, basis.len(), scale);
    (0..dim).map(|j| basis.iter().zip(&z).map(|(b, zk)| b[j] * zk).sum()).collect()
}

fn speaker_id(i: usize) -> String {
    format!("spk{i:03}")
}

fn utt_id(speaker: usize, u: usize) -> String {
    format!("spk{speaker:03}_u{u:02}")
}

struct UttPlan {
    entry: ManifestEntry,
    speaker_index: usize,
    /// Frames per (digit occurrence, state).
    durations: Vec<Vec<usize>>,
}

fn plan_utterance(cfg: &SynthConfig, speaker: usize, u: usize, split: Split, gender: &str, rng: &mut ChaCha8Rng) -> UttPlan {
    let digits: Vec<u8> = if u < cfg.enroll_utts_per_speaker {
        let mut all: Vec<u8> = (0..10).collect();
        all.shuffle(rng);
        all
    } else if cfg.digits_per_utt <= 10 {
        let mut all: Vec<u8> = (0..10).collect();
        all.shuffle(rng);
        all.truncate(cfg.digits_per_utt);
        all
    } else {
        (0..cfg.digits_per_utt).map(|_| rng.random_range(0..10u8)).collect()
    };
    let lo = cfg.frames_per_state_mean.saturating_sub(cfg.frames_per_state_jitter).max(1);
    let hi = cfg.frames_per_state_mean + cfg.frames_per_state_jitter;
    let durations = digits
        .iter()
        .map(|_| (0..cfg.states_per_digit).map(|_| rng.random_range(lo..=hi)).collect())
        .collect();
    UttPlan {
        entry: ManifestEntry {
            utt_id: utt_id(speaker, u),
            speaker_id: speaker_id(speaker),
            gender: gender.to_string(),
            split,
            digits,
            path: SYNTHETIC_PATH.to_string(),
        },
        speaker_index: speaker,
        durations,
    }
}

fn speaker_split(cfg: &SynthConfig, i: usize) -> Split {
    let (bg, dev) = cfg.split_sizes();
    if i < bg {
        Split::Background
    } else if i < bg + dev {
        Split::Development
    } else {
        Split::Evaluation
    }
}

fn speaker_gender(i: usize) -> &'static str {
    if i % 2 == 0 {
        "m"
    } else {
        "f"
    }
}

/// Deterministic corpus for a configuration; parallel generation uses one
/// RNG stream per utterance, so the thread count does not matter.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let dim = cfg.feature_dim;
    let mut digit_rng = derived_rng(cfg.seed, "digit-states");
    let state_means: BTreeMap<u8, Vec<Vec<f64>>> = (0..10u8)
        .map(|d| (d, (0..cfg.states_per_digit).map(|_| gaussian_vec(&mut digit_rng, dim, cfg.state_mean_scale)).collect()))
        .collect();
    let speaker_offsets: BTreeMap<String, BTreeMap<u8, Vec<f64>>> = (0..cfg.n_speakers)
        .map(|s| {
            let id = speaker_id(s);
            let mut rng = derived_rng(cfg.seed, &format!("speaker:{id}"));
            let offsets = (0..10u8).map(|d| (d, gaussian_vec(&mut rng, dim, cfg.speaker_offset_scale))).collect();
            (id, offsets)
        })
        .collect();

    let channel_basis = channel_basis(cfg);

    let plans: Vec<(usize, usize)> =
        (0..cfg.n_speakers).flat_map(|s| (0..cfg.utts_per_speaker).map(move |u| (s, u))).collect();
    let generated: Vec<(UttPlan, FeatureMatrix, Vec<f64>, Alignment)> = plans
        .par_iter()
        .map(|&(s, u)| {
            let mut rng = derived_rng(cfg.seed, &format!("utterance:{}", utt_id(s, u)));
            let plan = plan_utterance(cfg, s, u, speaker_split(cfg, s), speaker_gender(s), &mut rng);
            let channel = channel_offset(&channel_basis, &mut rng, dim, cfg.channel_offset_scale);
            let offsets = &speaker_offsets[&plan.entry.speaker_id];
            let (mut frames, mut digit_index, mut states) = (Vec::new(), Vec::new(), Vec::new());
            for (pos, (&d, durs)) in plan.entry.digits.iter().zip(&plan.durations).enumerate() {
                for (st, &n) in durs.iter().enumerate() {
                    for _ in 0..n {
                        let noise = gaussian_vec(&mut rng, dim, cfg.noise_scale);
                        let frame: Vec<f64> = (0..dim)
                            .map(|j| state_means[&d][st][j] + offsets[&d][j] + channel[j] + noise[j])
                            .collect();
                        frames.push(frame);
                        digit_index.push(pos);
                        states.push(st);
                    }
                }
            }
            let alignment = Alignment::from_labels(&plan.entry.utt_id, plan.entry.digits.clone(), digit_index, states);
            let features = FeatureMatrix::new(plan.entry.utt_id.clone(), plan.entry.digits.clone(), frames);
            (plan, features, channel, alignment)
        })
        .collect();

    let mut manifest = Manifest::default();
    let mut features = Vec::with_capacity(generated.len());
    let mut channel_offsets = BTreeMap::new();
    let mut alignments = BTreeMap::new();
    let mut enroll_utts: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (plan, feats, channel, alignment) in generated {
        let id = plan.entry.utt_id.clone();
        if is_enrollment_utterance(cfg, &id) {
            enroll_utts.entry(plan.speaker_index).or_default().push(id.clone());
        }
        channel_offsets.insert(id.clone(), channel);
        alignments.insert(id, alignment);
        manifest.entries.push(plan.entry);
        features.push(feats);
    }
    let enrollments = enroll_utts
        .into_iter()
        .filter(|(s, _)| speaker_split(cfg, *s) != Split::Background)
        .map(|(s, utterances)| Enrollment { model_id: speaker_id(s), speaker_id: speaker_id(s), utterances })
        .collect();
    Ok(SyntheticCorpus {
        manifest,
        features,
        enrollments,
        truth: GroundTruth { state_means, speaker_offsets, channel_offsets, alignments },
    })
}

fn is_enrollment_utterance(cfg: &SynthConfig, utt: &str) -> bool {
    utt.rsplit_once("_u")
        .and_then(|(_, n)| n.parse::<usize>().ok())
        .is_some_and(|u| u < cfg.enroll_utts_per_speaker)
}

/// Tone-complex rendering of an utterance for exercising the acoustic
/// front-end: each (digit, state) has three partials whose frequencies are
/// warped per speaker and digit; the channel is a random gain. Every
/// ground-truth frame becomes 10 ms of audio, with silence around the
/// utterance.
pub fn synthesize_audio(cfg: &SynthConfig, entry: &ManifestEntry, alignment: &Alignment) -> AudioBuffer {
    let mut tone_rng = derived_rng(cfg.seed, "digit-tones");
    let partials: BTreeMap<(u8, usize), Vec<(f64, f64)>> = (0..10u8)
        .flat_map(|d| (0..cfg.states_per_digit).map(move |s| (d, s)))
        .map(|key| {
            let p = (0..3).map(|_| (tone_rng.random_range(250.0..3500.0), tone_rng.random_range(0.05..0.25))).collect();
            (key, p)
        })
        .collect();
    let mut spk_rng = derived_rng(cfg.seed, &format!("speaker-warp:{}", entry.speaker_id));
    let warps: Vec<f64> = (0..10)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut spk_rng);
            (0.02 * cfg.speaker_offset_scale * z).clamp(-0.3, 0.3).exp()
        })
        .collect();
    let mut rng = derived_rng(cfg.seed, &format!("audio:{}", entry.utt_id));
    let gain_z: f64 = StandardNormal.sample(&mut rng);
    let gain = (0.1 * cfg.channel_offset_scale * gain_z).clamp(-1.0, 1.0).exp();
    let noise_amp = 0.002 * (1.0 + cfg.noise_scale);
    let pad = AUDIO_PADDING_FRAMES * AUDIO_SAMPLES_PER_FRAME;
    let mut samples = Vec::with_capacity(2 * pad + alignment.len() * AUDIO_SAMPLES_PER_FRAME);
    let noise = |rng: &mut ChaCha8Rng| {
        let z: f64 = StandardNormal.sample(rng);
        noise_amp * z
    };
    for _ in 0..pad {
        samples.push(noise(&mut rng));
    }
    let mut n = 0usize;
    for t in 0..alignment.len() {
        let d = alignment.digits[alignment.digit_index[t]];
        let warp = warps[d as usize];
        let tones = &partials[&(d, alignment.state[t])];
        for _ in 0..AUDIO_SAMPLES_PER_FRAME {
            let time = n as f64 / AUDIO_SAMPLE_RATE as f64;
            let s: f64 = tones.iter().map(|(f, a)| a * (2.0 * PI * f * warp * time).sin()).sum();
            samples.push(gain * s + noise(&mut rng));
            n += 1;
        }
    }
    for _ in 0..pad {
        samples.push(noise(&mut rng));
    }
    let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
    AudioBuffer { samples, sample_rate: AUDIO_SAMPLE_RATE }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract_features, FeatureConfig};
    use crate::hmm::{viterbi_align, DigitHmm, HmmSet};
    use crate::gmm::DiagGmm;

    fn small() -> SynthConfig {
        SynthConfig { n_speakers: 10, utts_per_speaker: 5, feature_dim: 3, states_per_digit: 2, seed: 3, ..Default::default() }
    }

    #[test]
    fn noiseless_frames_sit_on_the_means() {
        let cfg = SynthConfig { noise_scale: 0.0, channel_offset_scale: 1.0, ..small() };
        let c = generate_synthetic_corpus(&cfg).unwrap();
        for (entry, feats) in c.manifest.entries.iter().zip(&c.features) {
            let al = &c.truth.alignments[&entry.utt_id];
            let chan = &c.truth.channel_offsets[&entry.utt_id];
            for (t, frame) in feats.frames.iter().enumerate() {
                let d = al.digits[al.digit_index[t]];
                for j in 0..3 {
                    let expected =
                        c.truth.state_means[&d][al.state[t]][j] + c.truth.speaker_offsets[&entry.speaker_id][&d][j] + chan[j];
                    assert_eq!(frame[j], expected);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic_corpus(&small()).unwrap();
        let b = generate_synthetic_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn generation_does_not_depend_on_thread_count() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = pool.install(|| generate_synthetic_corpus(&small()).unwrap());
        assert_eq!(single, generate_synthetic_corpus(&small()).unwrap());
    }

    #[test]
    fn splits_are_speaker_disjoint_and_enrollments_complete() {
        let c = generate_synthetic_corpus(&SynthConfig { n_speakers: 40, ..small() }).unwrap();
        let bg = c.manifest.speakers(Split::Background);
        let dev = c.manifest.speakers(Split::Development);
        let ev = c.manifest.speakers(Split::Evaluation);
        assert_eq!((bg.len(), dev.len(), ev.len()), (20, 8, 12));
        assert!(bg.is_disjoint(&dev) && bg.is_disjoint(&ev) && dev.is_disjoint(&ev));
        c.manifest.check().unwrap();
        assert_eq!(c.enrollments.len(), 20);
        for e in &c.enrollments {
            assert_eq!(e.utterances.len(), 3);
            for u in &e.utterances {
                let mut digits = c.manifest.get(u).unwrap().digits.clone();
                digits.sort();
                assert_eq!(digits, (0..10).collect::<Vec<u8>>());
            }
        }
    }

    #[test]
    fn manifest_and_enrollment_round_trip() {
        let c = generate_synthetic_corpus(&small()).unwrap();
        assert_eq!(Manifest::parse(&c.manifest.to_text()).unwrap(), c.manifest);
        assert_eq!(parse_enrollments(&format_enrollments(&c.enrollments)).unwrap(), c.enrollments);
        let bad = "u1 s1 m background 123 -\nu2 s1 m evaluation 45 -\n";
        assert!(matches!(Manifest::parse(bad), Err(Error::Config(_))));
    }

    #[test]
    fn trial_list_parsing() {
        let t = parse_trial_list("m1 u1 12345 target\nm1 u2 678\n").unwrap();
        assert_eq!(t[0].label, Some(true));
        assert_eq!(t[0].digits, vec![1, 2, 3, 4, 5]);
        assert_eq!(t[1].label, None);
        assert!(parse_trial_list("").unwrap().is_empty());
        match parse_trial_list("m1 u1 12 target\nm1 u1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_trial_list("m1 u1 1x2"), Err(Error::Parse { line: 1, .. })));
        assert_eq!(parse_trial_list(&format_trial_list(&t)).unwrap(), t);
    }

    #[test]
    fn balanced_cross_product() {
        let enrollments: Vec<Enrollment> = (0..10)
            .map(|i| Enrollment { model_id: format!("m{i}"), speaker_id: format!("s{i}"), utterances: vec!["x".into()] })
            .collect();
        let tests: Vec<ManifestEntry> = (0..20)
            .map(|i| ManifestEntry {
                utt_id: format!("t{i}"),
                speaker_id: format!("s{}", i % 10),
                gender: "m".into(),
                split: Split::Evaluation,
                digits: vec![1, 2],
                path: SYNTHETIC_PATH.into(),
            })
            .collect();
        let refs: Vec<&ManifestEntry> = tests.iter().collect();
        let trials = generate_trials(&enrollments, &refs, &BTreeMap::new(), false);
        assert_eq!(trials.len(), 200);
        assert_eq!(trial_counts(&trials), (20, 180));
    }

    #[test]
    fn noiseless_truth_is_recovered_by_alignment() {
        let cfg = SynthConfig { noise_scale: 0.0, speaker_offset_scale: 0.0, state_mean_scale: 5.0, ..small() };
        let c = generate_synthetic_corpus(&cfg).unwrap();
        let hmms = (0..10u8)
            .map(|d| {
                let states = c.truth.state_means[&d].iter().map(|m| DiagGmm::single(m.clone(), vec![1.0; 3])).collect();
                (d, DigitHmm { digit: d, states, self_loop: vec![0.8, 0.8], occupancy: vec![1.0, 1.0] })
            })
            .collect();
        let set = HmmSet { hmms, var_floor: vec![1e-3; 3] };
        for f in &c.features {
            let al = viterbi_align(&f.utterance_id, &f.frames, &f.digits, &set).unwrap();
            let truth = &c.truth.alignments[&f.utterance_id];
            assert_eq!((&al.digit_index, &al.state), (&truth.digit_index, &truth.state));
        }
    }

    #[test]
    fn audio_mode_feeds_the_front_end() {
        let cfg = SynthConfig { n_speakers: 2, utts_per_speaker: 1, enroll_utts_per_speaker: 1, ..small() };
        let c = generate_synthetic_corpus(&cfg).unwrap();
        let entry = &c.manifest.entries[0];
        let audio = synthesize_audio(&cfg, entry, &c.truth.alignments[&entry.utt_id]);
        let feats = extract_features(&audio, &FeatureConfig::default(), &entry.utt_id, entry.digits.clone()).unwrap();
        assert_eq!(feats.dim(), 60);
        let frames = c.truth.alignments[&entry.utt_id].len();
        assert!(feats.num_voiced() > frames / 2 && feats.num_voiced() <= feats.len());
        assert_eq!(synthesize_audio(&cfg, entry, &c.truth.alignments[&entry.utt_id]), audio);
    }
}
