//! Cepstral front-end: framing, MFCC, deltas, energy VAD and CMVN.
//!
//! The pipeline turns a mono PCM buffer into a [`FeatureMatrix`] of
//! `3 × num_cepstra` dimensional frames (static + Δ + ΔΔ). With the default
//! configuration that is 20 static coefficients (c0..c19) and 60 dims total.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Frame energies below this level count as digital silence.
const ENERGY_FLOOR: f64 = 1e-10;
const LOG_FLOOR: f64 = 1e-10;
const CMVN_VAR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Reads a 16-bit mono PCM WAV file, scaling samples to [-1, 1).
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Config(format!(
                "expected 16-bit mono PCM, got {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub num_mel_filters: usize,
    /// Static coefficients kept per frame, c0 included when `include_c0`.
    pub num_cepstra: usize,
    pub include_c0: bool,
    pub delta_window: usize,
    pub pre_emphasis: f64,
    /// Voiced frames have log-energy above this fraction of the utterance mean.
    pub vad_energy_fraction: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame_len_ms: 25.0,
            frame_shift_ms: 10.0,
            num_mel_filters: 24,
            num_cepstra: 20,
            include_c0: true,
            delta_window: 2,
            pre_emphasis: 0.97,
            vad_energy_fraction: 0.5,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_len_ms > 0.0 && self.frame_shift_ms > 0.0) {
            return Err(Error::Config("frame length and shift must be positive".into()));
        }
        if self.frame_shift_ms >= self.frame_len_ms {
            return Err(Error::Config("frame shift must be shorter than the frame length".into()));
        }
        if self.num_cepstra == 0 || self.num_mel_filters == 0 {
            return Err(Error::Config("need at least one mel filter and one cepstrum".into()));
        }
        let needed = self.num_cepstra + usize::from(!self.include_c0);
        if self.num_cepstra > self.num_mel_filters || needed > self.num_mel_filters {
            return Err(Error::Config(format!(
                "{} cepstra requested from {} mel filters",
                self.num_cepstra, self.num_mel_filters
            )));
        }
        if self.delta_window == 0 {
            return Err(Error::Config("delta window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn frame_len_samples(&self, sample_rate: u32) -> usize {
        (self.frame_len_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift_samples(&self, sample_rate: u32) -> usize {
        (self.frame_shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn output_dim(&self) -> usize {
        3 * self.num_cepstra
    }
}

/// Per-utterance feature sequence. Row `t` is the observation `o_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    pub digits: Vec<u8>,
    pub frames: Vec<Vec<f64>>,
    pub voiced: Vec<bool>,
}

impl FeatureMatrix {
    pub fn new(utterance_id: impl Into<String>, digits: Vec<u8>, frames: Vec<Vec<f64>>) -> Self {
        let voiced = vec![true; frames.len()];
        Self { utterance_id: utterance_id.into(), digits, frames, voiced }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn num_voiced(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }

    pub fn voiced_frames(&self) -> Vec<Vec<f64>> {
        self.frames
            .iter()
            .zip(&self.voiced)
            .filter(|(_, &v)| v)
            .map(|(f, _)| f.clone())
            .collect()
    }
}

/// Splits audio into pre-emphasized, Hamming-windowed frames.
pub fn frame_signal(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<Vec<Vec<f64>>> {
    let frame_len = cfg.frame_len_samples(audio.sample_rate);
    let shift = cfg.frame_shift_samples(audio.sample_rate);
    if frame_len == 0 || shift == 0 {
        return Err(Error::Config("frame length rounds to zero samples".into()));
    }
    if audio.samples.len() < frame_len {
        return Err(Error::EmptyUtterance(format!(
            "{} samples is shorter than one {frame_len}-sample frame",
            audio.samples.len()
        )));
    }
    let emphasized: Vec<f64> = audio
        .samples
        .iter()
        .enumerate()
        .map(|(i, &x)| if i == 0 { x } else { x - cfg.pre_emphasis * audio.samples[i - 1] })
        .collect();
    let window: Vec<f64> = (0..frame_len)
        .map(|n| {
            if frame_len == 1 {
                1.0
            } else {
                0.54 - 0.46 * (2.0 * PI * n as f64 / (frame_len - 1) as f64).cos()
            }
        })
        .collect();
    let count = (emphasized.len() - frame_len) / shift + 1;
    Ok((0..count)
        .map(|i| {
            let start = i * shift;
            emphasized[start..start + frame_len].iter().zip(&window).map(|(x, w)| x * w).collect()
        })
        .collect())
}

/// Log frame energy measured above the digital-silence floor, `ln(1 + E/floor)`.
/// Silent frames map to 0 and every value is non-negative.
pub fn frame_log_energy(frames: &[Vec<f64>]) -> Vec<f64> {
    frames
        .iter()
        .map(|f| {
            let e: f64 = f.iter().map(|x| x * x).sum();
            (e / ENERGY_FLOOR).ln_1p()
        })
        .collect()
}

/// Triangular filters on the HTK mel scale, evaluated at FFT bin frequencies.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub fft_size: usize,
    pub weights: Vec<Vec<f64>>,
    pub edges_hz: Vec<f64>,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(num_filters: usize, fft_size: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let mel_hi = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..num_filters + 2)
            .map(|i| mel_to_hz(mel_hi * i as f64 / (num_filters + 1) as f64))
            .collect();
        let n_bins = fft_size / 2 + 1;
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let weights = (0..num_filters)
            .map(|m| {
                let (lo, center, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= center {
                            (f - lo) / (center - lo)
                        } else {
                            (hi - f) / (hi - center)
                        }
                    })
                    .collect()
            })
            .collect();
        Self { fft_size, weights, edges_hz }
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights.iter().map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum()).collect()
    }
}

pub fn power_spectrum(frame: &[f64], fft_size: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let fft = planner.plan_fft_forward(fft_size);
    let mut buf: Vec<Complex<f64>> = (0..fft_size)
        .map(|i| Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    fft.process(&mut buf);
    buf[..fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// Log mel energies of each frame (natural log, floored).
pub fn log_mel_energies(frames: &[Vec<f64>], cfg: &FeatureConfig, sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let frame_len = frames.first().map_or(0, Vec::len);
    if frame_len == 0 {
        return Err(Error::EmptyUtterance("no frames".into()));
    }
    let fft_size = frame_len.next_power_of_two();
    let bank = MelFilterbank::new(cfg.num_mel_filters, fft_size, sample_rate);
    let mut planner = FftPlanner::new();
    Ok(frames
        .iter()
        .map(|f| {
            let power = power_spectrum(f, fft_size, &mut planner);
            bank.apply(&power).into_iter().map(|e| e.max(LOG_FLOOR).ln()).collect()
        })
        .collect())
}

/// DCT-II of the log mel energies. `c0` is the mean log energy; higher
/// coefficients use the orthonormal `sqrt(2/M)` scaling.
pub fn dct_cepstra(log_mel: &[f64], num_cepstra: usize, include_c0: bool) -> Vec<f64> {
    let m = log_mel.len();
    let first = usize::from(!include_c0);
    (first..first + num_cepstra)
        .map(|k| {
            if k == 0 {
                log_mel.iter().sum::<f64>() / m as f64
            } else {
                let scale = (2.0 / m as f64).sqrt();
                scale
                    * log_mel
                        .iter()
                        .enumerate()
                        .map(|(j, l)| l * (PI * k as f64 * (j as f64 + 0.5) / m as f64).cos())
                        .sum::<f64>()
            }
        })
        .collect()
}

pub fn compute_cepstra(frames: &[Vec<f64>], cfg: &FeatureConfig, sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    let log_mel = log_mel_energies(frames, cfg, sample_rate)?;
    Ok(log_mel.iter().map(|l| dct_cepstra(l, cfg.num_cepstra, cfg.include_c0)).collect())
}

fn regression_deltas(x: &[Vec<f64>], window: usize) -> Vec<Vec<f64>> {
    let len = x.len() as isize;
    let dim = x.first().map_or(0, Vec::len);
    let denom = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let at = |t: isize| &x[t.clamp(0, len - 1) as usize];
    (0..len)
        .map(|t| {
            (0..dim)
                .map(|j| {
                    (1..=window as isize)
                        .map(|n| n as f64 * (at(t + n)[j] - at(t - n)[j]))
                        .sum::<f64>()
                        / denom
                })
                .collect()
        })
        .collect()
}

/// Appends regression deltas and double deltas, replicating edge frames.
pub fn append_deltas(statics: &[Vec<f64>], delta_window: usize) -> Result<Vec<Vec<f64>>> {
    if delta_window == 0 {
        return Err(Error::Config("delta window must be at least 1".into()));
    }
    if statics.len() < 2 * delta_window + 1 {
        return Err(Error::EmptyUtterance(format!(
            "{} frames, deltas need at least {}",
            statics.len(),
            2 * delta_window + 1
        )));
    }
    let d1 = regression_deltas(statics, delta_window);
    let d2 = regression_deltas(&d1, delta_window);
    Ok(statics
        .iter()
        .zip(d1.iter().zip(&d2))
        .map(|(s, (a, b))| s.iter().chain(a).chain(b).copied().collect())
        .collect())
}

/// Energy-threshold voice activity detection.
pub fn detect_voiced(log_energy: &[f64], fraction: f64) -> Result<Vec<bool>> {
    if log_energy.is_empty() {
        return Err(Error::EmptyUtterance("empty energy track".into()));
    }
    let mean = log_energy.iter().sum::<f64>() / log_energy.len() as f64;
    let threshold = fraction * mean;
    let mask: Vec<bool> = log_energy.iter().map(|&e| e > threshold).collect();
    if !mask.iter().any(|&v| v) {
        return Err(Error::EmptyUtterance("no frame above the energy threshold".into()));
    }
    Ok(mask)
}

/// Per-utterance mean and variance normalization using voiced-frame statistics.
pub fn apply_cmvn(mut features: FeatureMatrix) -> Result<FeatureMatrix> {
    let voiced = features.num_voiced();
    if voiced < 2 {
        return Err(Error::EmptyUtterance(format!(
            "{}: CMVN needs two voiced frames, got {voiced}",
            features.utterance_id
        )));
    }
    let dim = features.dim();
    let n = voiced as f64;
    let mut mean = vec![0.0; dim];
    for (f, _) in features.frames.iter().zip(&features.voiced).filter(|(_, &v)| v) {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for (f, _) in features.frames.iter().zip(&features.voiced).filter(|(_, &v)| v) {
        for j in 0..dim {
            let d = f[j] - mean[j];
            var[j] += d * d;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / n).max(CMVN_VAR_FLOOR).sqrt()).collect();
    for f in &mut features.frames {
        for j in 0..dim {
            f[j] = (f[j] - mean[j]) * inv_std[j];
        }
    }
    Ok(features)
}

/// Full front-end: frames, MFCC + deltas, energy VAD, CMVN.
pub fn extract_features(
    audio: &AudioBuffer,
    cfg: &FeatureConfig,
    utterance_id: &str,
    digits: Vec<u8>,
) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let frames = frame_signal(audio, cfg)?;
    let energy = frame_log_energy(&frames);
    let voiced = detect_voiced(&energy, cfg.vad_energy_fraction)?;
    let statics = compute_cepstra(&frames, cfg, audio.sample_rate)?;
    let full = append_deltas(&statics, cfg.delta_window)?;
    apply_cmvn(FeatureMatrix { utterance_id: utterance_id.to_string(), digits, frames: full, voiced })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, n: usize, sr: u32) -> Vec<f64> {
        (0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin()).collect()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let audio = AudioBuffer::new(vec![0.1; 16000], 16000).unwrap();
        let frames = frame_signal(&audio, &FeatureConfig::default()).unwrap();
        assert_eq!(frames.len(), (16000 - 400) / 160 + 1);
        assert_eq!(frames.len(), 98);
        assert!(frames.iter().all(|f| f.len() == 400));
    }

    #[test]
    fn exactly_one_frame_and_too_short() {
        let cfg = FeatureConfig::default();
        let audio = AudioBuffer::new(vec![0.1; 400], 16000).unwrap();
        assert_eq!(frame_signal(&audio, &cfg).unwrap().len(), 1);
        let short = AudioBuffer::new(vec![0.1; 399], 16000).unwrap();
        assert!(matches!(frame_signal(&short, &cfg), Err(Error::EmptyUtterance(_))));
    }

    #[test]
    fn zero_signal_gives_zero_frames() {
        let audio = AudioBuffer::new(vec![0.0; 2000], 16000).unwrap();
        let frames = frame_signal(&audio, &FeatureConfig::default()).unwrap();
        assert!(frames.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn frame_count_formula_holds() {
        let cfg = FeatureConfig::default();
        for len in [400usize, 401, 559, 560, 561, 4321, 16000] {
            let audio = AudioBuffer::new(vec![0.3; len], 16000).unwrap();
            assert_eq!(frame_signal(&audio, &cfg).unwrap().len(), (len - 400) / 160 + 1, "len {len}");
        }
    }

    /// Independent triangle evaluation at a single frequency.
    fn triangle_response(freq: f64, m: usize, num_filters: usize, sr: u32) -> f64 {
        let mel_hi = 2595.0 * (1.0 + (sr as f64 / 2.0) / 700.0).log10();
        let edge = |i: usize| 700.0 * (10f64.powf(mel_hi * i as f64 / (num_filters + 1) as f64 / 2595.0) - 1.0);
        let (a, b, c) = (edge(m), edge(m + 1), edge(m + 2));
        if freq <= a || freq >= c {
            0.0
        } else if freq <= b {
            (freq - a) / (b - a)
        } else {
            (c - freq) / (c - b)
        }
    }

    #[test]
    fn tone_energy_lands_in_filters_covering_1khz() {
        let cfg = FeatureConfig::default();
        let audio = AudioBuffer::new(tone(1000.0, 400, 16000), 16000).unwrap();
        let mut cfg_no_emph = cfg.clone();
        cfg_no_emph.pre_emphasis = 0.0;
        let frames = frame_signal(&audio, &cfg_no_emph).unwrap();
        let log_mel = log_mel_energies(&frames, &cfg, 16000).unwrap();
        let responses: Vec<f64> = (0..cfg.num_mel_filters)
            .map(|m| triangle_response(1000.0, m, cfg.num_mel_filters, 16000))
            .collect();
        let covering: Vec<usize> = (0..responses.len()).filter(|&m| responses[m] > 0.0).collect();
        assert!(!covering.is_empty());
        let argmax = (0..log_mel[0].len()).max_by(|&a, &b| log_mel[0][a].total_cmp(&log_mel[0][b])).unwrap();
        assert!(covering.contains(&argmax), "argmax {argmax} not in {covering:?}");
        // bins covering the tone carry far more energy than distant filters
        let far = log_mel[0][cfg.num_mel_filters - 1];
        assert!(log_mel[0][argmax] - far > 5.0);
    }

    #[test]
    fn scaling_shifts_only_c0_by_log4() {
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f64> = (0..400).map(|_| rng.random_range(-0.5..0.5)).collect();
        let frame = vec![noise.clone()];
        let doubled = vec![noise.iter().map(|x| 2.0 * x).collect::<Vec<_>>()];
        let a = compute_cepstra(&frame, &cfg, 16000).unwrap();
        let b = compute_cepstra(&doubled, &cfg, 16000).unwrap();
        assert!((b[0][0] - a[0][0] - 4f64.ln()).abs() < 1e-9);
        for k in 1..cfg.num_cepstra {
            assert!((b[0][k] - a[0][k]).abs() < 1e-9, "c{k}");
        }
    }

    #[test]
    fn cepstra_shape_and_config_error() {
        let cfg = FeatureConfig { num_cepstra: 20, num_mel_filters: 24, ..Default::default() };
        let frames = vec![vec![0.1; 400]; 3];
        let c = compute_cepstra(&frames, &cfg, 16000).unwrap();
        assert!(c.iter().all(|r| r.len() == 20));
        let bad = FeatureConfig { num_cepstra: 25, num_mel_filters: 24, ..Default::default() };
        assert!(matches!(compute_cepstra(&frames, &bad, 16000), Err(Error::Config(_))));
    }

    #[test]
    fn deltas_of_constant_are_zero() {
        let statics = vec![vec![1.5, -2.0]; 7];
        let out = append_deltas(&statics, 2).unwrap();
        assert!(out.iter().all(|r| r.len() == 6 && r[2..].iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn twenty_static_dims_give_sixty() {
        let statics = vec![vec![0.0; 20]; 10];
        assert_eq!(append_deltas(&statics, 2).unwrap()[0].len(), 60);
        assert!(matches!(append_deltas(&statics[..4], 2), Err(Error::EmptyUtterance(_))));
    }

    #[test]
    fn ramp_gives_constant_delta_and_zero_double_delta() {
        // d_t = sum n (c_{t+n} - c_{t-n}) / (2 sum n^2); for c_t = 0.5 t this is
        // sum n * n / sum n^2 * 0.5 = 0.5 on interior frames.
        let statics: Vec<Vec<f64>> = (0..20).map(|t| vec![0.5 * t as f64, 3.0]).collect();
        let out = append_deltas(&statics, 2).unwrap();
        for t in 2..18 {
            assert!((out[t][2] - 0.5).abs() < 1e-12);
            assert_eq!(out[t][3], 0.0);
        }
        for t in 4..16 {
            assert!(out[t][4].abs() < 1e-12);
        }
    }

    fn random_features(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> FeatureMatrix {
        let frames = (0..len)
            .map(|_| (0..dim).map(|j| rng.random_range(-3.0..3.0) * (j + 1) as f64 + j as f64).collect())
            .collect();
        FeatureMatrix::new("u", vec![], frames)
    }

    #[test]
    fn cmvn_statistics_on_random_utterances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let len = rng.random_range(2..80);
            let fm = apply_cmvn(random_features(&mut rng, len, 6)).unwrap();
            for j in 0..6 {
                let mean = fm.frames.iter().map(|f| f[j]).sum::<f64>() / len as f64;
                let var = fm.frames.iter().map(|f| (f[j] - mean).powi(2)).sum::<f64>() / len as f64;
                assert!(mean.abs() < 1e-9);
                assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cmvn_constant_dimension_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut fm = random_features(&mut rng, 30, 3);
        for f in &mut fm.frames {
            f[1] = 4.0;
        }
        let once = apply_cmvn(fm).unwrap();
        assert!(once.frames.iter().all(|f| f[1] == 0.0));
        let twice = apply_cmvn(once.clone()).unwrap();
        for (a, b) in once.frames.iter().flatten().zip(twice.frames.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
        let single = FeatureMatrix::new("s", vec![], vec![vec![1.0, 2.0]]);
        assert!(matches!(apply_cmvn(single), Err(Error::EmptyUtterance(_))));
    }

    #[test]
    fn vad_recovers_loud_segments() {
        let cfg = FeatureConfig::default();
        // 4 blocks of 0.2 s: loud, silent, loud, silent
        let mut samples = Vec::new();
        for block in 0..4 {
            let loud = block % 2 == 0;
            samples.extend(tone(700.0, 3200, 16000).into_iter().map(|x| if loud { x } else { 0.0 }));
        }
        let audio = AudioBuffer::new(samples, 16000).unwrap();
        let frames = frame_signal(&audio, &cfg).unwrap();
        let mask = detect_voiced(&frame_log_energy(&frames), cfg.vad_energy_fraction).unwrap();
        for (i, &v) in mask.iter().enumerate() {
            let (start, end) = (i * 160, i * 160 + 400);
            let loud_samples = (start..end).filter(|&s| (s / 3200) % 2 == 0).count();
            // pre-emphasis leaks the previous sample into the frame
            let leaked = start > 0 && ((start - 1) / 3200) % 2 == 0;
            if loud_samples == 400 {
                assert!(v, "frame {i} should be voiced");
            } else if loud_samples == 0 && !leaked {
                assert!(!v, "frame {i} should be silent");
            }
        }
    }

    #[test]
    fn vad_uniform_and_silence() {
        let uniform = vec![12.0; 10];
        assert!(detect_voiced(&uniform, 0.5).unwrap().iter().all(|&v| v));
        let audio = AudioBuffer::new(vec![0.0; 4000], 16000).unwrap();
        let frames = frame_signal(&audio, &FeatureConfig::default()).unwrap();
        assert!(matches!(detect_voiced(&frame_log_energy(&frames), 0.5), Err(Error::EmptyUtterance(_))));
    }

    #[test]
    fn pipeline_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<f64> = (0..8000).map(|_| rng.random_range(-0.3..0.3)).collect();
        let audio = AudioBuffer::new(samples, 16000).unwrap();
        let cfg = FeatureConfig::default();
        let a = extract_features(&audio, &cfg, "x", vec![1, 2]).unwrap();
        let b = extract_features(&audio, &cfg, "x", vec![1, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 60);
    }
}
