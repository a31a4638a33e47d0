//! Model bundle and feature file persistence on top of [`Container`].

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;

use crate::compensation::{Transform, TransformChain, TransformKind};
use crate::container::{parse_key_values, Container};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureMatrix};
use crate::gmm::DiagGmm;
use crate::hmm::{DigitHmm, FlatGmm, HmmSet};
use crate::ivector::IVectorExtractor;
use crate::scoring::{digits_to_string, parse_digits, Cohort, EnrollModel};

/// Per-iteration training curves.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    /// Total Viterbi path log-likelihood, one value per HMM iteration.
    pub hmm_log_likelihood: Vec<f64>,
    /// Per digit: evidence before training and after every iteration.
    pub evidence: BTreeMap<u8, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub feature_config: FeatureConfig,
    pub hmms: HmmSet,
    pub flats: BTreeMap<u8, FlatGmm>,
    pub extractors: BTreeMap<u8, IVectorExtractor>,
    pub chains: BTreeMap<u8, TransformChain>,
    pub cohort: Cohort,
    pub history: TrainingHistory,
    /// Free-form provenance: configuration echo, seed, corpus summary.
    pub meta: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::CorruptBundle(msg.into())
}

fn kv_map(text: &str) -> Result<BTreeMap<String, String>> {
    Ok(parse_key_values(text)?.into_iter().collect())
}

fn field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| bad(format!("missing field `{key}`")))?
        .parse()
        .map_err(|_| bad(format!("bad value for `{key}`")))
}

fn digit_list(text: &str) -> Result<Vec<u8>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    parse_digits(text.trim()).ok_or_else(|| bad(format!("bad digit list `{text}`")))
}

fn feature_config_text(c: &FeatureConfig) -> String {
    format!(
        "frame_len_ms={}\nframe_shift_ms={}\nnum_mel_filters={}\nnum_cepstra={}\ninclude_c0={}\ndelta_window={}\npre_emphasis={}\nvad_energy_fraction={}\n",
        c.frame_len_ms,
        c.frame_shift_ms,
        c.num_mel_filters,
        c.num_cepstra,
        c.include_c0,
        c.delta_window,
        c.pre_emphasis,
        c.vad_energy_fraction
    )
}

fn feature_config_from(text: &str) -> Result<FeatureConfig> {
    let m = kv_map(text)?;
    Ok(FeatureConfig {
        frame_len_ms: field(&m, "frame_len_ms")?,
        frame_shift_ms: field(&m, "frame_shift_ms")?,
        num_mel_filters: field(&m, "num_mel_filters")?,
        num_cepstra: field(&m, "num_cepstra")?,
        include_c0: field(&m, "include_c0")?,
        delta_window: field(&m, "delta_window")?,
        pre_emphasis: field(&m, "pre_emphasis")?,
        vad_energy_fraction: field(&m, "vad_energy_fraction")?,
    })
}

fn push_gmm(c: &mut Container, prefix: &str, g: &DiagGmm) -> Result<()> {
    c.push_vector(&format!("{prefix}.weights"), &g.weights)?;
    c.push_rows(&format!("{prefix}.means"), &g.means)?;
    c.push_rows(&format!("{prefix}.vars"), &g.vars)
}

fn read_gmm(c: &Container, prefix: &str) -> Result<DiagGmm> {
    let g = DiagGmm {
        weights: c.vector(&format!("{prefix}.weights"))?,
        means: c.rows(&format!("{prefix}.means"))?,
        vars: c.rows(&format!("{prefix}.vars"))?,
    };
    if g.means.len() != g.weights.len() || g.vars.len() != g.weights.len() {
        return Err(bad(format!("{prefix}: inconsistent component counts")));
    }
    Ok(g)
}

impl ModelBundle {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        c.push_text("meta", meta)?;
        c.push_text("feature_config", feature_config_text(&self.feature_config))?;

        let digits: Vec<u8> = self.hmms.hmms.keys().copied().collect();
        c.push_text("hmm.digits", digits_to_string(&digits))?;
        c.push_vector("hmm.var_floor", &self.hmms.var_floor)?;
        for (d, h) in &self.hmms.hmms {
            c.push_vector(&format!("hmm.{d}.self_loop"), &h.self_loop)?;
            c.push_vector(&format!("hmm.{d}.occupancy"), &h.occupancy)?;
            for (s, g) in h.states.iter().enumerate() {
                push_gmm(&mut c, &format!("hmm.{d}.state{s}"), g)?;
            }
        }

        let flat_digits: Vec<u8> = self.flats.keys().copied().collect();
        c.push_text("flat.digits", digits_to_string(&flat_digits))?;
        for (d, f) in &self.flats {
            push_gmm(&mut c, &format!("flat.{d}"), &f.gmm)?;
        }

        let ext_digits: Vec<u8> = self.extractors.keys().copied().collect();
        c.push_text("ivector.digits", digits_to_string(&ext_digits))?;
        for (d, e) in &self.extractors {
            c.push_text(
                &format!("ivector.{d}.info"),
                format!("num_components={}\ndim={}\nrank={}\nseed={}\n", e.num_components, e.dim, e.rank(), e.seed),
            )?;
            c.push_dvector(&format!("ivector.{d}.ubm_mean"), &e.ubm_mean)?;
            c.push_dvector(&format!("ivector.{d}.mean"), &e.mean)?;
            c.push_matrix(&format!("ivector.{d}.t"), &e.t)?;
            c.push_dvector(&format!("ivector.{d}.sigma"), &e.sigma)?;
        }

        let chain_digits: Vec<u8> = self.chains.keys().copied().collect();
        c.push_text("chain.digits", digits_to_string(&chain_digits))?;
        for (d, chain) in &self.chains {
            let mut steps = String::new();
            for (k, t) in chain.steps.iter().enumerate() {
                let beta = t.beta.map_or("-".to_string(), |b| b.to_string());
                steps.push_str(&format!("{} {}\n", t.kind, beta));
                if let Some(m) = &t.matrix {
                    c.push_matrix(&format!("chain.{d}.{k}.matrix"), m)?;
                }
            }
            c.push_text(&format!("chain.{d}.steps"), steps)?;
        }

        // Cohort: one index line per (speaker, digit) and the vectors
        // concatenated in the same order.
        let mut index = String::new();
        let mut values = Vec::new();
        for s in &self.cohort.speakers {
            for (digit, v) in &s.digits {
                let gender = s.gender.as_deref().unwrap_or("-");
                index.push_str(&format!("{} {} {} {} {}\n", s.id, gender, digit, s.counts[digit], v.len()));
                values.extend_from_slice(v.as_slice());
            }
        }
        c.push_text("cohort.index", index)?;
        c.push_vector("cohort.vectors", &values)?;

        c.push_vector("log.hmm_log_likelihood", &self.history.hmm_log_likelihood)?;
        for (d, ev) in &self.history.evidence {
            c.push_vector(&format!("log.evidence.{d}"), ev)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = kv_map(c.text("meta")?)?;
        let feature_config = feature_config_from(c.text("feature_config")?)?;

        let var_floor = c.vector("hmm.var_floor")?;
        let mut hmms = BTreeMap::new();
        for d in digit_list(c.text("hmm.digits")?)? {
            let self_loop = c.vector(&format!("hmm.{d}.self_loop"))?;
            let occupancy = c.vector(&format!("hmm.{d}.occupancy"))?;
            let states = (0..self_loop.len())
                .map(|s| read_gmm(c, &format!("hmm.{d}.state{s}")))
                .collect::<Result<Vec<_>>>()?;
            hmms.insert(d, DigitHmm { digit: d, states, self_loop, occupancy });
        }

        let mut flats = BTreeMap::new();
        for d in digit_list(c.text("flat.digits")?)? {
            flats.insert(d, FlatGmm { digit: d, gmm: read_gmm(c, &format!("flat.{d}"))? });
        }

        let mut extractors = BTreeMap::new();
        for d in digit_list(c.text("ivector.digits")?)? {
            let info = kv_map(c.text(&format!("ivector.{d}.info"))?)?;
            let ext = IVectorExtractor {
                digit: d,
                num_components: field(&info, "num_components")?,
                dim: field(&info, "dim")?,
                ubm_mean: c.dvector(&format!("ivector.{d}.ubm_mean"))?,
                mean: c.dvector(&format!("ivector.{d}.mean"))?,
                t: c.matrix(&format!("ivector.{d}.t"))?,
                sigma: c.dvector(&format!("ivector.{d}.sigma"))?,
                seed: field(&info, "seed")?,
            };
            ext.validate().map_err(|e| bad(format!("extractor {d}: {e}")))?;
            extractors.insert(d, ext);
        }

        let mut chains = BTreeMap::new();
        for d in digit_list(c.text("chain.digits")?)? {
            let mut steps = Vec::new();
            for (k, line) in c.text(&format!("chain.{d}.steps"))?.lines().enumerate() {
                let (kind, beta) = line.split_once(' ').ok_or_else(|| bad(format!("bad chain step `{line}`")))?;
                let kind: TransformKind = kind.parse().map_err(|_| bad(format!("unknown transform `{kind}`")))?;
                let beta = match beta {
                    "-" => None,
                    b => Some(b.parse().map_err(|_| bad(format!("bad beta `{b}`")))?),
                };
                let matrix = match kind {
                    TransformKind::LengthNorm => None,
                    _ => Some(c.matrix(&format!("chain.{d}.{k}.matrix"))?),
                };
                steps.push(Transform { kind, digit: d, matrix, beta });
            }
            chains.insert(d, TransformChain { digit: d, steps });
        }

        let values = c.vector("cohort.vectors")?;
        let mut offset = 0usize;
        let mut speakers: Vec<EnrollModel> = Vec::new();
        for line in c.text("cohort.index")?.lines() {
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 5 {
                return Err(bad(format!("bad cohort index line `{line}`")));
            }
            let digit: u8 = f[2].parse().map_err(|_| bad("bad cohort digit"))?;
            let count: usize = f[3].parse().map_err(|_| bad("bad cohort count"))?;
            let dim: usize = f[4].parse().map_err(|_| bad("bad cohort dim"))?;
            let v = values.get(offset..offset + dim).ok_or_else(|| bad("cohort vectors truncated"))?;
            offset += dim;
            if speakers.last().map(|s| s.id.as_str()) != Some(f[0]) {
                let gender = (f[1] != "-").then(|| f[1].to_string());
                speakers.push(EnrollModel { id: f[0].to_string(), gender, digits: BTreeMap::new(), counts: BTreeMap::new() });
            }
            let s = speakers.last_mut().unwrap();
            s.digits.insert(digit, DVector::from_row_slice(v));
            s.counts.insert(digit, count);
        }
        if offset != values.len() {
            return Err(bad("cohort vectors do not match the index"));
        }

        let mut history =
            TrainingHistory { hmm_log_likelihood: c.vector("log.hmm_log_likelihood")?, evidence: BTreeMap::new() };
        for d in 0..10u8 {
            let name = format!("log.evidence.{d}");
            if c.has(&name) {
                history.evidence.insert(d, c.vector(&name)?);
            }
        }

        Ok(Self {
            feature_config,
            hmms: HmmSet { hmms, var_floor },
            flats,
            extractors,
            chains,
            cohort: Cohort { speakers },
            history,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Stores utterance features; frames as `T × F` rows, the voiced mask as
/// 0/1 values.
pub fn features_to_container(features: &[FeatureMatrix]) -> Result<Container> {
    let mut c = Container::new();
    let index: String = features.iter().map(|f| format!("{} {}\n", f.utterance_id, digits_to_string(&f.digits))).collect();
    c.push_text("utterances", index)?;
    for f in features {
        c.push_rows(&format!("utt.{}.frames", f.utterance_id), &f.frames)?;
        let mask: Vec<f64> = f.voiced.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        c.push_vector(&format!("utt.{}.voiced", f.utterance_id), &mask)?;
    }
    Ok(c)
}

pub fn features_from_container(c: &Container) -> Result<Vec<FeatureMatrix>> {
    c.text("utterances")?
        .lines()
        .map(|line| {
            let (id, digits) = line.split_once(' ').ok_or_else(|| bad(format!("bad utterance line `{line}`")))?;
            let frames = c.rows(&format!("utt.{id}.frames"))?;
            let voiced: Vec<bool> = c.vector(&format!("utt.{id}.voiced"))?.iter().map(|&v| v != 0.0).collect();
            if voiced.len() != frames.len() {
                return Err(bad(format!("{id}: voiced mask length differs from frame count")));
            }
            Ok(FeatureMatrix { utterance_id: id.to_string(), digits: digit_list(digits)?, frames, voiced })
        })
        .collect()
}

pub fn save_features(features: &[FeatureMatrix], path: impl AsRef<Path>) -> Result<()> {
    features_to_container(features)?.write(path)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<FeatureMatrix>> {
    features_from_container(&Container::read(path)?)
}
