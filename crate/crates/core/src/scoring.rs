//! Enrollment models, digit-averaged cosine scoring, cohort statistics with
//! S-Norm, linear score fusion, and the trial/score text formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Lower bound applied to cohort standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Cohorts smaller than this trigger a warning.
pub const MIN_COHORT_SIZE: usize = 10;

/// Averaged transformed enrollment vectors per digit.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrollModel {
    pub id: String,
    pub gender: Option<String>,
    pub digits: BTreeMap<u8, DVector<f64>>,
    /// Number of vectors averaged for each digit.
    pub counts: BTreeMap<u8, usize>,
}

impl EnrollModel {
    /// Digits 0-9 that have no enrollment vector.
    pub fn missing_digits(&self) -> Vec<u8> {
        (0..10).filter(|d| !self.digits.contains_key(d)).collect()
    }
}

/// Arithmetic mean, per digit, of already transformed enrollment vectors.
pub fn average_enrollment(
    id: impl Into<String>,
    gender: Option<String>,
    vectors: &[(u8, DVector<f64>)],
) -> Result<EnrollModel> {
    if vectors.is_empty() {
        return Err(Error::EmptyInput("enrollment vectors"));
    }
    let mut sums: BTreeMap<u8, (DVector<f64>, usize)> = BTreeMap::new();
    for (digit, v) in vectors {
        match sums.get_mut(digit) {
            Some((sum, n)) => {
                if sum.len() != v.len() {
                    return Err(Error::Shape(format!("digit {digit}: enrollment dims {} vs {}", sum.len(), v.len())));
                }
                *sum += v;
                *n += 1;
            }
            None => {
                sums.insert(*digit, (v.clone(), 1));
            }
        }
    }
    let counts = sums.iter().map(|(&d, (_, n))| (d, *n)).collect();
    let digits = sums.into_iter().map(|(d, (sum, n))| (d, sum / n as f64)).collect();
    Ok(EnrollModel { id: id.into(), gender, digits, counts })
}

pub fn cosine_score(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of vectors with dims {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-occurrence cosine scores of a test digit sequence against a model.
/// Occurrences of digits the model lacks are skipped.
pub fn digit_scores(model: &EnrollModel, test: &[(u8, DVector<f64>)]) -> Result<Vec<(u8, f64)>> {
    test.iter()
        .filter_map(|(d, v)| model.digits.get(d).map(|e| cosine_score(e, v).map(|s| (*d, s))))
        .collect()
}

/// Mean cosine score over the test occurrences whose digit is enrolled.
pub fn score_trial(model: &EnrollModel, test: &[(u8, DVector<f64>)]) -> Result<f64> {
    let scores = digit_scores(model, test)?;
    if scores.is_empty() {
        return Err(Error::IncompatibleTrial(format!("model {} shares no digit with the test string", model.id)));
    }
    Ok(scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
    pub size: usize,
}

impl CohortStats {
    /// Mean and (population) standard deviation, the latter floored.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput("cohort scores"));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let mut std = var.sqrt();
        if std < SIGMA_FLOOR {
            log::warn!("cohort standard deviation {std:.3e} floored to {SIGMA_FLOOR:e}");
            std = SIGMA_FLOOR;
        }
        Ok(Self { mean, std, size: scores.len() })
    }
}

/// `½[(s − μ_e)/σ_e + (s − μ_t)/σ_t]`.
pub fn snorm(raw: f64, enroll: &CohortStats, test: &CohortStats) -> f64 {
    let se = enroll.std.max(SIGMA_FLOOR);
    let st = test.std.max(SIGMA_FLOOR);
    0.5 * ((raw - enroll.mean) / se + (raw - test.mean) / st)
}

/// Training speakers with per-digit averaged transformed vectors. They serve
/// as pseudo-enrollment models for the test side and as pseudo-test
/// utterances for the enrollment side.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cohort {
    pub speakers: Vec<EnrollModel>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    /// Speakers of the given gender; everyone if the gender is unknown or
    /// no speaker of that gender exists.
    pub fn partition(&self, gender: Option<&str>) -> Vec<&EnrollModel> {
        if let Some(g) = gender {
            let same: Vec<&EnrollModel> = self.speakers.iter().filter(|s| s.gender.as_deref() == Some(g)).collect();
            if !same.is_empty() {
                return same;
            }
            log::warn!("no cohort speakers of gender {g}; using the whole cohort");
        }
        self.speakers.iter().collect()
    }

    fn finish(scores: Vec<f64>, top_k: Option<usize>) -> Result<CohortStats> {
        let mut scores = scores;
        if let Some(k) = top_k {
            scores.sort_by(|a, b| b.total_cmp(a));
            scores.truncate(k.max(1));
        }
        if scores.len() < MIN_COHORT_SIZE {
            log::debug!("cohort of {} scores is smaller than {MIN_COHORT_SIZE}", scores.len());
        }
        CohortStats::from_scores(&scores)
    }

    /// Enrollment side: the model scored against each cohort speaker's
    /// vectors for the trial's digit sequence.
    pub fn enroll_stats(&self, model: &EnrollModel, digits: &[u8], top_k: Option<usize>) -> Result<CohortStats> {
        let mut scores = Vec::new();
        for speaker in self.partition(model.gender.as_deref()) {
            let pseudo: Vec<(u8, DVector<f64>)> =
                digits.iter().filter_map(|d| speaker.digits.get(d).map(|v| (*d, v.clone()))).collect();
            match score_trial(model, &pseudo) {
                Ok(s) => scores.push(s),
                Err(Error::IncompatibleTrial(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Self::finish(scores, top_k)
    }

    /// Test side: each cohort speaker, as a model, scored against the test
    /// occurrences.
    pub fn test_stats(&self, test: &[(u8, DVector<f64>)], gender: Option<&str>, top_k: Option<usize>) -> Result<CohortStats> {
        let mut scores = Vec::new();
        for speaker in self.partition(gender) {
            match score_trial(speaker, test) {
                Ok(s) => scores.push(s),
                Err(Error::IncompatibleTrial(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Self::finish(scores, top_k)
    }
}

/// Builds the cohort from labelled transformed training vectors:
/// `(speaker, gender, digit, vector)`.
pub fn build_cohort(training: &[(String, Option<String>, u8, DVector<f64>)]) -> Result<Cohort> {
    let mut by_speaker: BTreeMap<&str, (Option<String>, Vec<(u8, DVector<f64>)>)> = BTreeMap::new();
    for (speaker, gender, digit, v) in training {
        let entry = by_speaker.entry(speaker.as_str()).or_insert_with(|| (gender.clone(), Vec::new()));
        entry.1.push((*digit, v.clone()));
    }
    let speakers = by_speaker
        .into_iter()
        .map(|(id, (gender, vectors))| average_enrollment(id, gender, &vectors))
        .collect::<Result<Vec<_>>>()?;
    if speakers.len() < MIN_COHORT_SIZE {
        log::warn!("cohort has only {} speakers", speakers.len());
    }
    Ok(Cohort { speakers })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub digits: Vec<u8>,
    pub label: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub enroll: String,
    pub test: String,
    pub digits: Vec<u8>,
    pub raw: f64,
    pub normalized: f64,
    pub label: Option<bool>,
}

pub fn digits_to_string(digits: &[u8]) -> String {
    digits.iter().map(|d| char::from(b'0' + d)).collect()
}

pub fn parse_digits(s: &str) -> Option<Vec<u8>> {
    if s.is_empty() {
        return None;
    }
    s.bytes().map(|b| b.is_ascii_digit().then(|| b - b'0')).collect()
}

pub fn label_to_str(label: bool) -> &'static str {
    if label {
        "target"
    } else {
        "nontarget"
    }
}

pub fn parse_label(s: &str) -> Option<bool> {
    match s {
        "target" => Some(true),
        "nontarget" => Some(false),
        _ => None,
    }
}

/// Tab-separated `enroll test digits raw normalized [label]`. Scores are
/// written in shortest round-trip form, so parsing recovers them exactly.
pub fn format_score_file(scores: &[TrialScore]) -> String {
    let mut out = String::new();
    for s in scores {
        let _ = write!(out, "{}\t{}\t{}\t{}\t{}", s.enroll, s.test, digits_to_string(&s.digits), s.raw, s.normalized);
        if let Some(l) = s.label {
            let _ = write!(out, "\t{}", label_to_str(l));
        }
        out.push('\n');
    }
    out
}

pub fn parse_score_file(text: &str) -> Result<Vec<TrialScore>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let err = |msg: String| Error::Parse { line: line_no, msg };
        if fields.len() != 5 && fields.len() != 6 {
            return Err(err(format!("expected 5 or 6 tab-separated fields, found {}", fields.len())));
        }
        let digits = parse_digits(fields[2]).ok_or_else(|| err(format!("bad digit string `{}`", fields[2])))?;
        let number = |s: &str| s.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| err(format!("bad score `{s}`")));
        let label = match fields.get(5) {
            Some(l) => Some(parse_label(l).ok_or_else(|| err(format!("bad label `{l}`")))?),
            None => None,
        };
        out.push(TrialScore {
            enroll: fields[0].to_string(),
            test: fields[1].to_string(),
            digits,
            raw: number(fields[3])?,
            normalized: number(fields[4])?,
            label,
        });
    }
    Ok(out)
}

/// Weighted mean of normalized scores across systems scored on the same
/// trial list. Equal weights when `weights` is `None`.
pub fn fuse_scores(systems: &[Vec<TrialScore>], weights: Option<&[f64]>) -> Result<Vec<TrialScore>> {
    let first = systems.first().ok_or(Error::EmptyInput("score lists"))?;
    let weights: Vec<f64> = match weights {
        Some(w) if w.len() != systems.len() => {
            return Err(Error::TrialMismatch(format!("{} weights for {} systems", w.len(), systems.len())))
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; systems.len()],
    };
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Config("fusion weights must be non-negative with a positive sum".into()));
    }
    for (k, sys) in systems.iter().enumerate() {
        if sys.len() != first.len() {
            return Err(Error::TrialMismatch(format!("system {k} has {} trials, expected {}", sys.len(), first.len())));
        }
        for (i, (a, b)) in first.iter().zip(sys).enumerate() {
            if a.enroll != b.enroll || a.test != b.test || a.digits != b.digits {
                return Err(Error::TrialMismatch(format!("system {k} differs at trial {}", i + 1)));
            }
        }
    }
    Ok(first
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mix = |f: fn(&TrialScore) -> f64| {
                systems.iter().zip(&weights).map(|(s, w)| w * f(&s[i])).sum::<f64>() / total
            };
            TrialScore { raw: mix(|s| s.raw), normalized: mix(|s| s.normalized), ..t.clone() }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    /// A model whose digit `d` vector is `[1, 0]` and test vectors chosen so
    /// the per-digit cosines equal the requested values.
    fn model_and_test(scores: &[f64]) -> (EnrollModel, Vec<(u8, DVector<f64>)>) {
        let vectors: Vec<(u8, DVector<f64>)> = (0..scores.len() as u8).map(|d| (d, v(&[1.0, 0.0]))).collect();
        let model = average_enrollment("m", None, &vectors).unwrap();
        let test = scores
            .iter()
            .enumerate()
            .map(|(d, &s)| (d as u8, v(&[s, (1.0 - s * s).sqrt()])))
            .collect();
        (model, test)
    }

    #[test]
    fn enrollment_averages() {
        let m = average_enrollment("a", None, &vec![(1, v(&[2.0, 3.0])); 3]).unwrap();
        assert_eq!(m.digits[&1], v(&[2.0, 3.0]));
        let m = average_enrollment("a", None, &[(1, v(&[1.0, 0.0])), (1, v(&[0.0, 1.0]))]).unwrap();
        assert_eq!(m.digits[&1], v(&[0.5, 0.5]));
        assert!(matches!(average_enrollment("a", None, &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn three_ten_digit_enrollments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut vectors = Vec::new();
        for _ in 0..3 {
            for d in 0..10u8 {
                vectors.push((d, rand_vec(&mut rng, 3)));
            }
        }
        let m = average_enrollment("spk", Some("m".into()), &vectors).unwrap();
        assert_eq!(m.digits.len(), 10);
        assert!(m.counts.values().all(|&n| n == 3));
        assert!(m.missing_digits().is_empty());
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[0.3, -2.0, 1.0]);
        assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine_score(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap() - 0.70710678).abs() < 1e-8);
        assert!(matches!(cosine_score(&v(&[0.0, 0.0]), &a.rows(0, 2).into_owned()), Err(Error::ZeroVector)));
    }

    #[test]
    fn trial_score_is_mean_of_digit_scores() {
        let (m, t) = model_and_test(&[0.8; 5]);
        assert!((score_trial(&m, &t).unwrap() - 0.8).abs() < 1e-12);
        let (m, t) = model_and_test(&[1.0, 0.5, 0.5, 0.0, 0.0]);
        assert!((score_trial(&m, &t).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn missing_digits_are_skipped() {
        let (m, mut t) = model_and_test(&[1.0, 0.5]);
        t.push((7, v(&[-1.0, 0.0])));
        assert!((score_trial(&m, &t).unwrap() - 0.75).abs() < 1e-12);
        assert!(matches!(score_trial(&m, &[(9, v(&[1.0, 0.0]))]), Err(Error::IncompatibleTrial(_))));
    }

    #[test]
    fn trial_score_matches_manual_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enroll: Vec<(u8, DVector<f64>)> = (0..30).map(|i| ((i % 10) as u8, rand_vec(&mut rng, 4))).collect();
        let model = average_enrollment("m", None, &enroll).unwrap();
        let test: Vec<(u8, DVector<f64>)> = (0..5).map(|_| (rng.random_range(0..10u8), rand_vec(&mut rng, 4))).collect();
        let mut manual = 0.0;
        for (d, y) in &test {
            let mut mean = DVector::zeros(4);
            let mut n = 0.0;
            for (e, x) in &enroll {
                if e == d {
                    mean += x;
                    n += 1.0;
                }
            }
            mean /= n;
            manual += mean.dot(y) / (mean.norm() * y.norm());
        }
        manual /= test.len() as f64;
        assert!((score_trial(&model, &test).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn snorm_examples() {
        let e = CohortStats { mean: 0.2, std: 0.3, size: 10 };
        let t = CohortStats { mean: 0.4, std: 0.2, size: 10 };
        assert!((snorm(0.8, &e, &t) - 2.0).abs() < 1e-12);
        let same = CohortStats { mean: 0.5, std: 0.1, size: 10 };
        assert_eq!(snorm(0.5, &same, &same), 0.0);
    }

    #[test]
    fn constant_cohort_scores_floor_sigma() {
        let c = CohortStats::from_scores(&[0.25; 12]).unwrap();
        assert_eq!((c.mean, c.std, c.size), (0.25, SIGMA_FLOOR, 12));
    }

    #[test]
    fn cohort_stats_match_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f64> = (0..37).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = CohortStats::from_scores(&xs).unwrap();
        let mut mean = 0.0;
        for x in &xs {
            mean += x;
        }
        mean /= 37.0;
        let mut ss = 0.0;
        for x in &xs {
            ss += (x - mean) * (x - mean);
        }
        assert!((c.mean - mean).abs() < 1e-14);
        assert!((c.std - (ss / 37.0).sqrt()).abs() < 1e-14);
    }

    fn speaker(id: &str, gender: &str, rng: &mut ChaCha8Rng) -> EnrollModel {
        let vectors: Vec<(u8, DVector<f64>)> = (0..10).map(|d| (d, rand_vec(rng, 3))).collect();
        average_enrollment(id, Some(gender.into()), &vectors).unwrap()
    }

    #[test]
    fn gender_partition_restricts_cohort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cohort = Cohort {
            speakers: (0..12)
                .map(|i| speaker(&format!("c{i}"), if i < 6 { "m" } else { "f" }, &mut rng))
                .collect(),
        };
        let model = speaker("e", "m", &mut rng);
        let digits = [1u8, 4, 7];
        let stats = cohort.enroll_stats(&model, &digits, None).unwrap();
        assert_eq!(stats.size, 6);
        let males: Vec<f64> = cohort.speakers[..6]
            .iter()
            .map(|s| {
                let pseudo: Vec<_> = digits.iter().map(|d| (*d, s.digits[d].clone())).collect();
                score_trial(&model, &pseudo).unwrap()
            })
            .collect();
        assert_eq!(stats, CohortStats::from_scores(&males).unwrap());

        let test: Vec<_> = digits.iter().map(|d| (*d, rand_vec(&mut rng, 3))).collect();
        let ts = cohort.test_stats(&test, Some("f"), Some(3)).unwrap();
        assert_eq!(ts.size, 3);
        let mut females: Vec<f64> = cohort.speakers[6..].iter().map(|s| score_trial(s, &test).unwrap()).collect();
        females.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(ts, CohortStats::from_scores(&females[..3]).unwrap());
    }

    #[test]
    fn build_cohort_averages_per_speaker() {
        let training = vec![
            ("s1".to_string(), Some("f".to_string()), 3u8, v(&[1.0, 0.0])),
            ("s1".to_string(), Some("f".to_string()), 3u8, v(&[0.0, 1.0])),
            ("s2".to_string(), Some("m".to_string()), 3u8, v(&[2.0, 2.0])),
        ];
        let c = build_cohort(&training).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.speakers[0].digits[&3], v(&[0.5, 0.5]));
        assert_eq!(c.speakers[1].gender.as_deref(), Some("m"));
    }

    fn trial_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<TrialScore> {
        (0..n)
            .map(|i| TrialScore {
                enroll: format!("e{}", i % 3),
                test: format!("t{i}"),
                digits: vec![1, 2, 3],
                raw: rng.random_range(-1.0..1.0),
                normalized: rng.random_range(-5.0..5.0),
                label: if i % 4 == 0 { None } else { Some(i % 2 == 0) },
            })
            .collect()
    }

    #[test]
    fn fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = trial_scores(&mut rng, 10);
        let b: Vec<TrialScore> = a.iter().map(|t| TrialScore { normalized: t.normalized + 1.0, ..t.clone() }).collect();
        let same = fuse_scores(&[a.clone(), a.clone()], None).unwrap();
        for (x, y) in same.iter().zip(&a) {
            assert!((x.normalized - y.normalized).abs() < 1e-12);
        }
        assert_eq!(fuse_scores(&[a.clone(), b.clone()], Some(&[1.0, 0.0])).unwrap(), a);
        let mean = fuse_scores(&[a.clone(), b.clone()], None).unwrap();
        for ((m, x), y) in mean.iter().zip(&a).zip(&b) {
            assert!((m.normalized - (x.normalized + y.normalized) / 2.0).abs() < 1e-12);
        }
        assert!(matches!(fuse_scores(&[a.clone(), b[..9].to_vec()], None), Err(Error::TrialMismatch(_))));
    }

    #[test]
    fn score_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores = trial_scores(&mut rng, 20);
        let text = format_score_file(&scores);
        assert_eq!(text.lines().count(), 20);
        assert_eq!(parse_score_file(&text).unwrap(), scores);
        assert!(matches!(parse_score_file("a\tb\t12\tx\t0.1\n"), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn trial_score_ignores_digit_order(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enroll: Vec<(u8, DVector<f64>)> = (0..10).map(|d| (d, rand_vec(&mut rng, 3))).collect();
            let model = average_enrollment("m", None, &enroll).unwrap();
            let mut test: Vec<(u8, DVector<f64>)> = (0..5).map(|_| (rng.random_range(0..10u8), rand_vec(&mut rng, 3))).collect();
            let a = score_trial(&model, &test).unwrap();
            test.reverse();
            test.swap(0, 2);
            let b = score_trial(&model, &test).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn snorm_is_monotone(s1 in -1.0f64..1.0, s2 in -1.0f64..1.0, m in -1.0f64..1.0, sd in 0.0f64..1.0) {
            let e = CohortStats { mean: m, std: sd, size: 10 };
            let t = CohortStats { mean: -m, std: sd * 0.5, size: 10 };
            if s1 > s2 {
                prop_assert!(snorm(s1, &e, &t) > snorm(s2, &e, &t));
            }
        }
    }
}
