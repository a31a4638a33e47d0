//! End-to-end training and scoring on top of the individual stages.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::bundle::{ModelBundle, TrainingHistory};
use crate::compensation::build_chain;
use crate::config::PipelineConfig;
use crate::corpus::{Enrollment, Manifest, Split, SYNTHETIC_PATH};
use crate::error::{Error, Result};
use crate::features::{extract_features, AudioBuffer, FeatureMatrix};
use crate::hmm::{align_corpus, flatten_hmm, init_digit_hmms, viterbi_align, viterbi_train, FlatGmm, HmmSet};
use crate::ivector::{train_extractor, IVectorExtractor, PreparedExtractor};
use crate::metrics::{compute_det, MetricsReport};
use crate::scoring::{average_enrollment, build_cohort, score_trial, snorm, EnrollModel, Trial, TrialScore};
use crate::stats::{occurrence_stats, BaumWelchStats};

/// Runs `f` on a pool with `jobs` threads (all cores when `None`).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Features for every manifest entry: synthetic entries come from
/// `stored`, audio entries are read relative to `data_dir` and passed
/// through the acoustic front-end.
pub fn load_corpus_features(
    manifest: &Manifest,
    stored: &[FeatureMatrix],
    data_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<Vec<FeatureMatrix>> {
    let by_id: BTreeMap<&str, &FeatureMatrix> = stored.iter().map(|f| (f.utterance_id.as_str(), f)).collect();
    manifest
        .entries
        .par_iter()
        .map(|e| {
            if let Some(f) = by_id.get(e.utt_id.as_str()) {
                return Ok((*f).clone());
            }
            if e.path == SYNTHETIC_PATH {
                return Err(Error::Config(format!("no stored features for synthetic utterance {}", e.utt_id)));
            }
            let audio = AudioBuffer::read_wav(data_dir.join(&e.path))?;
            extract_features(&audio, &cfg.features, &e.utt_id, e.digits.clone())
        })
        .collect()
}

/// Statistics of every digit occurrence in `features`, tagged with the
/// speaker. Utterances that cannot be aligned are skipped with a warning.
fn collect_stats(
    hmms: &HmmSet,
    flats: &BTreeMap<u8, FlatGmm>,
    features: &[FeatureMatrix],
    speakers: &BTreeMap<String, String>,
) -> Result<BTreeMap<u8, Vec<(String, BaumWelchStats)>>> {
    let alignments = align_corpus(features, hmms);
    let per_utt: Vec<Vec<BaumWelchStats>> = features
        .par_iter()
        .zip(alignments.par_iter())
        .map(|(f, al)| match al {
            Some(al) => occurrence_stats(f, al, hmms, flats),
            None => Ok(Vec::new()),
        })
        .collect::<Result<_>>()?;
    let mut out: BTreeMap<u8, Vec<(String, BaumWelchStats)>> = BTreeMap::new();
    for (f, stats) in features.iter().zip(per_utt) {
        let speaker = speakers.get(&f.utterance_id).cloned().unwrap_or_default();
        for s in stats {
            out.entry(s.digit).or_default().push((speaker.clone(), s));
        }
    }
    Ok(out)
}

/// Trains every model on the background split of `manifest`:
/// HMMs → statistics → extractors → compensation chains → cohort.
pub fn train(cfg: &PipelineConfig, manifest: &Manifest, features: &[FeatureMatrix]) -> Result<ModelBundle> {
    cfg.validate()?;
    let background: BTreeSet<&str> = manifest.in_split(Split::Background).map(|e| e.utt_id.as_str()).collect();
    let train_feats: Vec<FeatureMatrix> =
        features.iter().filter(|f| background.contains(f.utterance_id.as_str())).cloned().collect();
    if train_feats.is_empty() {
        return Err(Error::EmptyInput("background utterances"));
    }
    let speakers: BTreeMap<String, String> =
        manifest.entries.iter().map(|e| (e.utt_id.clone(), e.speaker_id.clone())).collect();
    let genders = manifest.genders();

    log::info!("hmm: training on {} utterances", train_feats.len());
    let hmm_cfg = cfg.hmm_config();
    let init = init_digit_hmms(&train_feats, &hmm_cfg)?;
    let (hmms, hmm_log_likelihood) = viterbi_train(&train_feats, &init, &hmm_cfg)?;
    let flats: BTreeMap<u8, FlatGmm> = hmms.hmms.iter().map(|(&d, h)| (d, flatten_hmm(h))).collect();

    log::info!("stats: collecting Baum-Welch statistics");
    let stats = collect_stats(&hmms, &flats, &train_feats, &speakers)?;

    log::info!("ivector: training {} extractors", stats.len());
    let iv_cfg = cfg.ivector_config();
    let trained: Vec<(u8, IVectorExtractor, Vec<f64>)> = stats
        .iter()
        .map(|(&d, labelled)| {
            let plain: Vec<BaumWelchStats> = labelled.iter().map(|(_, s)| s.clone()).collect();
            let (ext, log) = train_extractor(&plain, &flats[&d], &iv_cfg)?;
            Ok((d, ext, log.evidence))
        })
        .collect::<Result<_>>()?;

    log::info!("compensation: fitting {} chains", cfg.compensation.method);
    let mut extractors = BTreeMap::new();
    let mut chains = BTreeMap::new();
    let mut evidence = BTreeMap::new();
    let mut cohort_vectors = Vec::new();
    for (d, ext, ev) in trained {
        let prepared = ext.prepare();
        let posteriors = stats[&d]
            .par_iter()
            .map(|(spk, s)| Ok((spk.clone(), prepared.extract(s)?)))
            .collect::<Result<Vec<_>>>()?;
        let chain = build_chain(d, &posteriors, &cfg.compensation)?;
        for (spk, p) in &posteriors {
            cohort_vectors.push((spk.clone(), genders.get(spk).cloned(), d, chain.apply(&p.mean)?));
        }
        drop(prepared);
        chains.insert(d, chain);
        extractors.insert(d, ext);
        evidence.insert(d, ev);
    }
    let cohort = build_cohort(&cohort_vectors)?;

    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), cfg.seed.to_string());
    meta.insert("compensation".to_string(), cfg.compensation.method.to_string());
    meta.insert("background_utterances".to_string(), train_feats.len().to_string());
    meta.insert("cohort_speakers".to_string(), cohort.len().to_string());
    Ok(ModelBundle {
        feature_config: cfg.features.clone(),
        hmms,
        flats,
        extractors,
        chains,
        cohort,
        history: TrainingHistory { hmm_log_likelihood, evidence },
        meta,
    })
}

/// Scoring-time view of a bundle with prepared extractors.
pub struct Scorer<'a> {
    pub bundle: &'a ModelBundle,
    prepared: BTreeMap<u8, PreparedExtractor<'a>>,
}

impl<'a> Scorer<'a> {
    pub fn new(bundle: &'a ModelBundle) -> Self {
        let prepared = bundle.extractors.iter().map(|(&d, e)| (d, e.prepare())).collect();
        Self { bundle, prepared }
    }

    /// Transformed i-vectors of every digit occurrence, in string order.
    pub fn utterance_vectors(&self, features: &FeatureMatrix) -> Result<Vec<(u8, DVector<f64>)>> {
        let voiced = features.voiced_frames();
        let al = viterbi_align(&features.utterance_id, &voiced, &features.digits, &self.bundle.hmms)?;
        let stats = occurrence_stats(features, &al, &self.bundle.hmms, &self.bundle.flats)?;
        stats
            .iter()
            .map(|s| {
                let ext = self.prepared.get(&s.digit).ok_or(Error::MissingDigit(s.digit))?;
                let chain = self.bundle.chains.get(&s.digit).ok_or(Error::MissingDigit(s.digit))?;
                Ok((s.digit, chain.apply(&ext.extract(s)?.mean)?))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejected {
    pub trial: Trial,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreOutput {
    pub scores: Vec<TrialScore>,
    pub rejects: Vec<Rejected>,
}

pub fn format_rejects(rejects: &[Rejected]) -> String {
    rejects
        .iter()
        .map(|r| format!("{} {}\t{}\n", r.trial.enroll, r.trial.test, r.reason))
        .collect()
}

/// Scores `trials`; trials that cannot be scored are returned as rejects
/// with a reason instead of failing the run.
pub fn score(
    cfg: &PipelineConfig,
    bundle: &ModelBundle,
    manifest: &Manifest,
    features: &[FeatureMatrix],
    enrollments: &[Enrollment],
    trials: &[Trial],
) -> Result<ScoreOutput> {
    let scorer = Scorer::new(bundle);
    let by_id: BTreeMap<&str, &FeatureMatrix> = features.iter().map(|f| (f.utterance_id.as_str(), f)).collect();
    let genders = manifest.genders();

    let models_used: BTreeSet<&str> = trials.iter().map(|t| t.enroll.as_str()).collect();
    let enroll_used: Vec<&Enrollment> = enrollments.iter().filter(|e| models_used.contains(e.model_id.as_str())).collect();
    let mut needed: BTreeSet<&str> = trials.iter().map(|t| t.test.as_str()).collect();
    for e in &enroll_used {
        needed.extend(e.utterances.iter().map(String::as_str));
    }
    let needed: Vec<&str> = needed.into_iter().collect();
    let vectors: BTreeMap<&str, std::result::Result<Vec<(u8, DVector<f64>)>, String>> = needed
        .par_iter()
        .map(|&id| {
            let v = match by_id.get(id) {
                Some(f) => scorer.utterance_vectors(f).map_err(|e| e.to_string()),
                None => Err(format!("no features for utterance {id}")),
            };
            (id, v)
        })
        .collect();

    let mut models: BTreeMap<&str, std::result::Result<EnrollModel, String>> = BTreeMap::new();
    for e in enroll_used {
        let model = (|| {
            let mut all = Vec::new();
            for u in &e.utterances {
                match &vectors[u.as_str()] {
                    Ok(v) => all.extend(v.iter().cloned()),
                    Err(msg) => log::warn!("model {}: skipping enrollment utterance {u}: {msg}", e.model_id),
                }
            }
            average_enrollment(e.model_id.clone(), genders.get(&e.speaker_id).cloned(), &all).map_err(|e| e.to_string())
        })();
        models.insert(e.model_id.as_str(), model);
    }

    let scored: Vec<std::result::Result<TrialScore, Rejected>> = trials
        .par_iter()
        .map(|t| {
            let reject = |reason: String| Rejected { trial: t.clone(), reason };
            let model = match models.get(t.enroll.as_str()) {
                None => return Err(reject("unknown enroll model".into())),
                Some(Err(msg)) => return Err(reject(format!("enrollment failed: {msg}"))),
                Some(Ok(m)) => m,
            };
            let test = match vectors.get(t.test.as_str()) {
                Some(Ok(v)) => v,
                Some(Err(msg)) => return Err(reject(msg.clone())),
                None => return Err(reject("unknown test utterance".into())),
            };
            let test_digits: Vec<u8> = test.iter().map(|(d, _)| *d).collect();
            if test_digits != t.digits {
                return Err(reject("digit string differs from the utterance transcript".into()));
            }
            let raw = score_trial(model, test).map_err(|e| reject(e.to_string()))?;
            let normalized = if cfg.scoring.snorm {
                let cohort = &bundle.cohort;
                let es = cohort.enroll_stats(model, &t.digits, cfg.scoring.top_k).map_err(|e| reject(e.to_string()))?;
                let ts = cohort
                    .test_stats(test, model.gender.as_deref(), cfg.scoring.top_k)
                    .map_err(|e| reject(e.to_string()))?;
                snorm(raw, &es, &ts)
            } else {
                raw
            };
            Ok(TrialScore {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                digits: t.digits.clone(),
                raw,
                normalized,
                label: t.label,
            })
        })
        .collect();

    let mut out = ScoreOutput::default();
    for r in scored {
        match r {
            Ok(s) => out.scores.push(s),
            Err(rej) => out.rejects.push(rej),
        }
    }
    if !out.rejects.is_empty() {
        log::warn!("{} trials rejected", out.rejects.len());
    }
    Ok(out)
}

/// Metrics on the normalized scores; every trial must be labelled.
pub fn evaluate(cfg: &PipelineConfig, scores: &[TrialScore]) -> Result<(MetricsReport, crate::metrics::DetCurve)> {
    let labelled = scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.label
                .map(|l| (s.normalized, l))
                .ok_or_else(|| Error::Config(format!("trial {} ({} {}) has no label", i + 1, s.enroll, s.test)))
        })
        .collect::<Result<Vec<_>>>()?;
    let curve = compute_det(&labelled)?;
    Ok((MetricsReport::from_curve(&curve, &cfg.dcf_old, &cfg.dcf_new), curve))
}

/// Plain-text training log: HMM likelihood and per-digit evidence per
/// iteration.
pub fn format_training_log(history: &TrainingHistory) -> String {
    let mut out = String::new();
    for (i, ll) in history.hmm_log_likelihood.iter().enumerate() {
        out.push_str(&format!("hmm\t{i}\t{ll}\n"));
    }
    for (d, ev) in &history.evidence {
        for (i, e) in ev.iter().enumerate() {
            out.push_str(&format!("ivector.{d}\t{i}\t{e}\n"));
        }
    }
    out
}
