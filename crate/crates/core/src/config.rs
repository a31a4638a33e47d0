//! Pipeline configuration: a sectioned `key = value` text format.
//!
//! ```text
//! [hmm]
//! states_per_digit = 4
//! [compensation]
//! method = uncertainty_norm
//! ```
//!
//! Unknown sections and keys are rejected so typos cannot silently fall
//! back to defaults.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::compensation::{CompensationConfig, CompensationMethod, UncertaintyTarget};
use crate::corpus::SynthConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::hmm::HmmConfig;
use crate::ivector::IVectorConfig;
use crate::metrics::DcfParams;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    pub snorm: bool,
    /// Keep only the `k` highest cohort scores per side; `None` uses all.
    pub top_k: Option<usize>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { snorm: true, top_k: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; `None` uses all cores. Results do not depend on it.
    pub jobs: Option<usize>,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub hmm: HmmConfig,
    pub ivector: IVectorConfig,
    pub compensation: CompensationConfig,
    pub scoring: ScoringConfig,
    pub dcf_old: DcfParams,
    pub dcf_new: DcfParams,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    /// Desk-scale settings sized for the default synthetic corpus.
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: None,
            synth: SynthConfig::default(),
            features: FeatureConfig::default(),
            hmm: HmmConfig { states_per_digit: 4, components_per_state: 2, train_iters: 5, ..Default::default() },
            ivector: IVectorConfig { rank: 8, iters: 10, ..Default::default() },
            compensation: CompensationConfig::default(),
            scoring: ScoringConfig::default(),
            dcf_old: DcfParams::OLD,
            dcf_new: DcfParams::NEW,
            paths: PathsConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

/// `c_miss,c_fa,p_target`.
fn parse_dcf(key: &str, value: &str) -> Result<DcfParams> {
    let parts: Vec<f64> = value.split(',').map(|p| parse_value(key, p.trim())).collect::<Result<_>>()?;
    match parts[..] {
        [c_miss, c_fa, p_target] => {
            let p = DcfParams { c_miss, c_fa, p_target };
            p.validate()?;
            Ok(p)
        }
        _ => Err(Error::Config(format!("`{key}` needs c_miss,c_fa,p_target"))),
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, found `{line}`", i + 1)))?;
            cfg.set(&section, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets `section.key`; the error names the offending key.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        let k = full.as_str();
        match k {
            "run.seed" => self.seed = parse_value(k, value)?,
            "run.jobs" => {
                let n: usize = parse_value(k, value)?;
                self.jobs = (n > 0).then_some(n);
            }

            "synth.n_speakers" => self.synth.n_speakers = parse_value(k, value)?,
            "synth.utts_per_speaker" => self.synth.utts_per_speaker = parse_value(k, value)?,
            "synth.enroll_utts_per_speaker" => self.synth.enroll_utts_per_speaker = parse_value(k, value)?,
            "synth.digits_per_utt" => self.synth.digits_per_utt = parse_value(k, value)?,
            "synth.feature_dim" => self.synth.feature_dim = parse_value(k, value)?,
            "synth.states_per_digit" => self.synth.states_per_digit = parse_value(k, value)?,
            "synth.frames_per_state_mean" => self.synth.frames_per_state_mean = parse_value(k, value)?,
            "synth.frames_per_state_jitter" => self.synth.frames_per_state_jitter = parse_value(k, value)?,
            "synth.state_mean_scale" => self.synth.state_mean_scale = parse_value(k, value)?,
            "synth.speaker_offset_scale" => self.synth.speaker_offset_scale = parse_value(k, value)?,
            "synth.channel_offset_scale" => self.synth.channel_offset_scale = parse_value(k, value)?,
            "synth.channel_rank" => self.synth.channel_rank = parse_value(k, value)?,
            "synth.noise_scale" => self.synth.noise_scale = parse_value(k, value)?,
            "synth.background_fraction" => self.synth.background_fraction = parse_value(k, value)?,
            "synth.development_fraction" => self.synth.development_fraction = parse_value(k, value)?,

            "features.frame_len_ms" => self.features.frame_len_ms = parse_value(k, value)?,
            "features.frame_shift_ms" => self.features.frame_shift_ms = parse_value(k, value)?,
            "features.num_mel_filters" => self.features.num_mel_filters = parse_value(k, value)?,
            "features.num_cepstra" => self.features.num_cepstra = parse_value(k, value)?,
            "features.include_c0" => self.features.include_c0 = parse_bool(k, value)?,
            "features.delta_window" => self.features.delta_window = parse_value(k, value)?,
            "features.pre_emphasis" => self.features.pre_emphasis = parse_value(k, value)?,
            "features.vad_energy_fraction" => self.features.vad_energy_fraction = parse_value(k, value)?,

            "hmm.states_per_digit" => self.hmm.states_per_digit = parse_value(k, value)?,
            "hmm.components_per_state" => self.hmm.components_per_state = parse_value(k, value)?,
            "hmm.train_iters" => self.hmm.train_iters = parse_value(k, value)?,
            "hmm.gmm_em_iters" => self.hmm.gmm_em_iters = parse_value(k, value)?,
            "hmm.kmeans_iters" => self.hmm.kmeans_iters = parse_value(k, value)?,
            "hmm.reestimate_transitions" => self.hmm.reestimate_transitions = parse_bool(k, value)?,

            "ivector.rank" => self.ivector.rank = parse_value(k, value)?,
            "ivector.iters" => self.ivector.iters = parse_value(k, value)?,
            "ivector.min_divergence" => self.ivector.min_divergence = parse_bool(k, value)?,

            "compensation.method" => self.compensation.method = value.parse::<CompensationMethod>()?,
            "compensation.reg_coeff" => self.compensation.reg_coeff = parse_value(k, value)?,
            "compensation.lda_dim" => {
                let n: usize = parse_value(k, value)?;
                self.compensation.lda_dim = (n > 0).then_some(n);
            }
            "compensation.uncertainty_target" => {
                self.compensation.uncertainty_target = match value {
                    "average" => UncertaintyTarget::Average,
                    "total_plus_average" => UncertaintyTarget::TotalPlusAverage,
                    _ => return Err(Error::Config(format!("invalid value `{value}` for `{k}`"))),
                }
            }

            "scoring.snorm" => self.scoring.snorm = parse_bool(k, value)?,
            "scoring.top_k" => {
                let n: usize = parse_value(k, value)?;
                self.scoring.top_k = (n > 0).then_some(n);
            }

            "metrics.dcf_old" => self.dcf_old = parse_dcf(k, value)?,
            "metrics.dcf_new" => self.dcf_new = parse_dcf(k, value)?,

            "paths.data_dir" => self.paths.data_dir = Some(value.into()),
            "paths.bundle" => self.paths.bundle = Some(value.into()),
            "paths.trials" => self.paths.trials = Some(value.into()),
            "paths.scores" => self.paths.scores = Some(value.into()),
            "paths.report" => self.paths.report = Some(value.into()),

            _ => return Err(Error::Config(format!("unknown configuration key `{full}`"))),
        }
        Ok(())
    }

    /// Seeds every randomized stage from the run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { seed: self.seed, ..self.synth.clone() }
    }

    pub fn hmm_config(&self) -> HmmConfig {
        HmmConfig { seed: self.seed, ..self.hmm.clone() }
    }

    pub fn ivector_config(&self) -> IVectorConfig {
        IVectorConfig { seed: self.seed, ..self.ivector.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.features.validate()?;
        self.hmm.validate()?;
        if self.ivector.rank == 0 {
            return Err(Error::Config("ivector.rank must be at least 1".into()));
        }
        if !(self.compensation.reg_coeff >= 0.0) {
            return Err(Error::Config("compensation.reg_coeff must be non-negative".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("run.jobs must be at least 1".into()));
        }
        self.dcf_old.validate()?;
        self.dcf_new.validate()
    }

    /// Serializes every setting except paths; `parse(to_text())` restores it.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let s = &self.synth;
        let f = &self.features;
        let dcf = |p: &DcfParams| format!("{},{},{}", p.c_miss, p.c_fa, p.p_target);
        let _ = writeln!(o, "[run]\nseed = {}\njobs = {}", self.seed, self.jobs.unwrap_or(0));
        let _ = writeln!(
            o,
            "[synth]\nn_speakers = {}\nutts_per_speaker = {}\nenroll_utts_per_speaker = {}\ndigits_per_utt = {}\nfeature_dim = {}\nstates_per_digit = {}\nframes_per_state_mean = {}\nframes_per_state_jitter = {}\nstate_mean_scale = {}\nspeaker_offset_scale = {}\nchannel_offset_scale = {}\nchannel_rank = {}\nnoise_scale = {}\nbackground_fraction = {}\ndevelopment_fraction = {}",
            s.n_speakers, s.utts_per_speaker, s.enroll_utts_per_speaker, s.digits_per_utt, s.feature_dim, s.states_per_digit,
            s.frames_per_state_mean, s.frames_per_state_jitter, s.state_mean_scale, s.speaker_offset_scale,
            s.channel_offset_scale, s.channel_rank, s.noise_scale, s.background_fraction, s.development_fraction
        );
        let _ = writeln!(
            o,
            "[features]\nframe_len_ms = {}\nframe_shift_ms = {}\nnum_mel_filters = {}\nnum_cepstra = {}\ninclude_c0 = {}\ndelta_window = {}\npre_emphasis = {}\nvad_energy_fraction = {}",
            f.frame_len_ms, f.frame_shift_ms, f.num_mel_filters, f.num_cepstra, f.include_c0, f.delta_window, f.pre_emphasis,
            f.vad_energy_fraction
        );
        let _ = writeln!(
            o,
            "[hmm]\nstates_per_digit = {}\ncomponents_per_state = {}\ntrain_iters = {}\ngmm_em_iters = {}\nkmeans_iters = {}\nreestimate_transitions = {}",
            self.hmm.states_per_digit, self.hmm.components_per_state, self.hmm.train_iters, self.hmm.gmm_em_iters,
            self.hmm.kmeans_iters, self.hmm.reestimate_transitions
        );
        let _ = writeln!(
            o,
            "[ivector]\nrank = {}\niters = {}\nmin_divergence = {}",
            self.ivector.rank, self.ivector.iters, self.ivector.min_divergence
        );
        let target = match self.compensation.uncertainty_target {
            UncertaintyTarget::Average => "average",
            UncertaintyTarget::TotalPlusAverage => "total_plus_average",
        };
        let _ = writeln!(
            o,
            "[compensation]\nmethod = {}\nreg_coeff = {}\nlda_dim = {}\nuncertainty_target = {target}",
            self.compensation.method,
            self.compensation.reg_coeff,
            self.compensation.lda_dim.unwrap_or(0)
        );
        let _ = writeln!(o, "[scoring]\nsnorm = {}\ntop_k = {}", self.scoring.snorm, self.scoring.top_k.unwrap_or(0));
        let _ = writeln!(o, "[metrics]\ndcf_old = {}\ndcf_new = {}", dcf(&self.dcf_old), dcf(&self.dcf_new));
        o
    }
}
