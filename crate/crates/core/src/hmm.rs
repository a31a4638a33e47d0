//! Digit-specific left-to-right HMMs with GMM emissions.
//!
//! Utterances are modelled by concatenating the HMMs of their (known) digit
//! strings. Training is segmental: a single Viterbi path per utterance is
//! used to assign frames to states, then every state GMM is re-estimated on
//! its frames.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::gmm::DiagGmm;

/// Transition probabilities are kept inside `[MIN_TRANSITION, 1 - MIN_TRANSITION]`.
pub const MIN_TRANSITION: f64 = 1e-3;
/// Variance floor as a fraction of the global per-dimension variance.
pub const VAR_FLOOR_FRACTION: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct HmmConfig {
    pub states_per_digit: usize,
    pub components_per_state: usize,
    pub train_iters: usize,
    /// EM passes over each state's frames per Viterbi iteration.
    pub gmm_em_iters: usize,
    pub kmeans_iters: usize,
    pub reestimate_transitions: bool,
    pub seed: u64,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self {
            states_per_digit: 8,
            components_per_state: 8,
            train_iters: 5,
            gmm_em_iters: 2,
            kmeans_iters: 10,
            reestimate_transitions: true,
            seed: 0,
        }
    }
}

impl HmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.states_per_digit == 0 || self.components_per_state == 0 {
            return Err(Error::Config("states and components per state must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DigitHmm {
    pub digit: u8,
    pub states: Vec<DiagGmm>,
    /// Self-loop probability of each state. The last entry is used when the
    /// digit is followed by another digit; inside `A_d` the final state is absorbing.
    pub self_loop: Vec<f64>,
    /// Frames assigned to each state in the last alignment pass.
    pub occupancy: Vec<f64>,
}

impl DigitHmm {
    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_components(&self) -> usize {
        self.states.iter().map(DiagGmm::num_components).sum()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, DiagGmm::dim)
    }

    /// Index of the first flattened component belonging to `state`.
    pub fn component_offset(&self, state: usize) -> usize {
        self.states[..state].iter().map(DiagGmm::num_components).sum()
    }

    /// The `S_d × S_d` left-to-right transition matrix `A_d`.
    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        let s = self.num_states();
        (0..s)
            .map(|i| {
                let mut row = vec![0.0; s];
                if i + 1 < s {
                    row[i] = self.self_loop[i];
                    row[i + 1] = 1.0 - self.self_loop[i];
                } else {
                    row[i] = 1.0;
                }
                row
            })
            .collect()
    }
}

/// Trained models for a set of digits plus the shared variance floor.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmSet {
    pub hmms: BTreeMap<u8, DigitHmm>,
    pub var_floor: Vec<f64>,
}

impl HmmSet {
    pub fn get(&self, digit: u8) -> Result<&DigitHmm> {
        self.hmms.get(&digit).ok_or(Error::MissingDigit(digit))
    }

    pub fn dim(&self) -> usize {
        self.var_floor.len()
    }
}

/// Hard frame-to-state assignment of one utterance's voiced frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub utterance_id: String,
    pub digits: Vec<u8>,
    /// Position in the digit string of every frame.
    pub digit_index: Vec<usize>,
    /// State within the digit's HMM of every frame.
    pub state: Vec<usize>,
    /// Half-open frame span of each digit occurrence.
    pub spans: Vec<(usize, usize)>,
    pub log_likelihood: f64,
}

impl Alignment {
    pub fn len(&self) -> usize {
        self.state.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_empty()
    }

    /// `utt_id frame_idx digit state`, one line per frame.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in 0..self.len() {
            out.push_str(&format!(
                "{} {} {} {}\n",
                self.utterance_id, t, self.digits[self.digit_index[t]], self.state[t]
            ));
        }
        out
    }

    /// Builds an alignment from per-frame labels, deriving the digit spans.
    pub fn from_labels(utterance_id: &str, digits: Vec<u8>, digit_index: Vec<usize>, state: Vec<usize>) -> Self {
        let mut spans = vec![(0, 0); digits.len()];
        for (t, &d) in digit_index.iter().enumerate() {
            if t == 0 || digit_index[t - 1] != d {
                spans[d].0 = t;
            }
            spans[d].1 = t + 1;
        }
        Self { utterance_id: utterance_id.to_string(), digits, digit_index, state, spans, log_likelihood: 0.0 }
    }
}

fn global_variance(frames: &[&[f64]]) -> Vec<f64> {
    let dim = frames.first().map_or(0, |f| f.len());
    let n = frames.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in frames {
        mean.iter_mut().zip(f.iter()).for_each(|(m, x)| *m += x / n);
    }
    let mut var = vec![0.0; dim];
    for f in frames {
        for j in 0..dim {
            var[j] += (f[j] - mean[j]).powi(2) / n;
        }
    }
    var.iter().map(|v| v.max(1e-12)).collect()
}

/// Uniform segmentation of `len` frames into `parts` contiguous pieces.
fn uniform_bounds(len: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts).map(|i| (i * len / parts, (i + 1) * len / parts)).collect()
}

fn seed_for(seed: u64, digit: u8, state: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((digit as u64) << 32) ^ state as u64
}

/// Flat-start initialization of the ten digit HMMs.
pub fn init_digit_hmms(corpus: &[FeatureMatrix], cfg: &HmmConfig) -> Result<HmmSet> {
    for d in 0..10u8 {
        if !corpus.iter().any(|u| u.digits.contains(&d)) {
            return Err(Error::MissingDigit(d));
        }
    }
    init_hmms_for_digits(corpus, &(0..10).collect::<Vec<_>>(), cfg)
}

/// Flat start for an arbitrary digit inventory: each utterance is split
/// uniformly across its digits and each digit span uniformly across states;
/// state GMMs are then fitted by k-means on the assigned frames.
pub fn init_hmms_for_digits(corpus: &[FeatureMatrix], digits: &[u8], cfg: &HmmConfig) -> Result<HmmSet> {
    cfg.validate()?;
    let voiced: Vec<Vec<Vec<f64>>> = corpus.iter().map(FeatureMatrix::voiced_frames).collect();
    let all: Vec<&[f64]> = voiced.iter().flatten().map(Vec::as_slice).collect();
    if all.is_empty() {
        return Err(Error::EmptyInput("no voiced training frames"));
    }
    let global_var = global_variance(&all);
    let var_floor: Vec<f64> = global_var.iter().map(|v| v * VAR_FLOOR_FRACTION).collect();
    let s_count = cfg.states_per_digit;

    let mut buckets: BTreeMap<(u8, usize), Vec<&[f64]>> = BTreeMap::new();
    for (utt, frames) in corpus.iter().zip(&voiced) {
        let n_digits = utt.digits.len();
        if n_digits == 0 || frames.len() < n_digits * s_count {
            log::warn!("{}: skipped in flat start ({} frames)", utt.utterance_id, frames.len());
            continue;
        }
        for (&digit, (d0, d1)) in utt.digits.iter().zip(uniform_bounds(frames.len(), n_digits)) {
            for (s, (s0, s1)) in uniform_bounds(d1 - d0, s_count).into_iter().enumerate() {
                buckets.entry((digit, s)).or_default().extend(frames[d0 + s0..d0 + s1].iter().map(Vec::as_slice));
            }
        }
    }

    let mut hmms = BTreeMap::new();
    for &digit in digits {
        let mut states = Vec::with_capacity(s_count);
        let mut occupancy = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let frames = buckets.get(&(digit, s)).ok_or(Error::MissingDigit(digit))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, digit, s));
            states.push(DiagGmm::from_kmeans(
                frames,
                cfg.components_per_state,
                cfg.kmeans_iters,
                &var_floor,
                &global_var,
                &mut rng,
            )?);
            occupancy.push(frames.len() as f64);
        }
        hmms.insert(digit, DigitHmm { digit, states, self_loop: vec![0.5; s_count], occupancy });
    }
    Ok(HmmSet { hmms, var_floor })
}

/// Forced alignment of `frames` to the concatenation of the HMMs for
/// `digits`, starting in the first state and ending in the last.
/// Ties prefer staying in the current state.
pub fn viterbi_align(utterance_id: &str, frames: &[Vec<f64>], digits: &[u8], set: &HmmSet) -> Result<Alignment> {
    let mut chain: Vec<(usize, usize, &DiagGmm, f64)> = Vec::new();
    for (pos, &d) in digits.iter().enumerate() {
        let hmm = set.get(d)?;
        for (s, gmm) in hmm.states.iter().enumerate() {
            chain.push((pos, s, gmm, hmm.self_loop[s]));
        }
    }
    let k_count = chain.len();
    let t_count = frames.len();
    if k_count == 0 || t_count < k_count {
        return Err(Error::AlignmentInfeasible { frames: t_count, states: k_count });
    }
    if let Some(f) = frames.iter().find(|f| f.len() != set.dim()) {
        return Err(Error::Shape(format!("frame dim {} vs model dim {}", f.len(), set.dim())));
    }
    let log_stay: Vec<f64> = chain.iter().map(|c| c.3.ln()).collect();
    let log_adv: Vec<f64> = chain.iter().map(|c| (1.0 - c.3).ln()).collect();

    // Only states k with k <= t and k >= t + K - T are reachable and can still finish.
    let window = |t: usize| (t + k_count).saturating_sub(t_count)..=t.min(k_count - 1);
    let mut score = vec![f64::NEG_INFINITY; k_count];
    let mut advanced = vec![vec![false; k_count]; t_count];
    score[0] = chain[0].2.log_likelihood(&frames[0]);
    for t in 1..t_count {
        let mut next = vec![f64::NEG_INFINITY; k_count];
        for k in window(t) {
            let stay = score[k] + log_stay[k];
            let adv = if k > 0 { score[k - 1] + log_adv[k - 1] } else { f64::NEG_INFINITY };
            let (best, moved) = if stay >= adv { (stay, false) } else { (adv, true) };
            if best == f64::NEG_INFINITY {
                continue;
            }
            next[k] = best + chain[k].2.log_likelihood(&frames[t]);
            advanced[t][k] = moved;
        }
        score = next;
    }
    let total = score[k_count - 1];
    if !total.is_finite() {
        return Err(Error::Numerical(format!("{utterance_id}: no finite Viterbi path")));
    }
    let mut path = vec![0usize; t_count];
    let mut k = k_count - 1;
    for t in (0..t_count).rev() {
        path[t] = k;
        if t > 0 && advanced[t][k] {
            k -= 1;
        }
    }
    let digit_index = path.iter().map(|&k| chain[k].0).collect();
    let state = path.iter().map(|&k| chain[k].1).collect();
    let mut alignment = Alignment::from_labels(utterance_id, digits.to_vec(), digit_index, state);
    alignment.log_likelihood = total;
    Ok(alignment)
}

/// Aligns every utterance that admits a feasible path; infeasible ones are
/// skipped with a warning. Output order follows the corpus.
pub fn align_corpus(corpus: &[FeatureMatrix], set: &HmmSet) -> Vec<Option<Alignment>> {
    corpus
        .par_iter()
        .map(|u| match viterbi_align(&u.utterance_id, &u.voiced_frames(), &u.digits, set) {
            Ok(a) => Some(a),
            Err(e) => {
                log::warn!("{}: {e}", u.utterance_id);
                None
            }
        })
        .collect()
}

/// Segmental (Viterbi) training. Returns the updated models and the total
/// Viterbi-path log-likelihood measured at the start of every iteration.
pub fn viterbi_train(corpus: &[FeatureMatrix], set: &HmmSet, cfg: &HmmConfig) -> Result<(HmmSet, Vec<f64>)> {
    let mut set = set.clone();
    let mut history = Vec::with_capacity(cfg.train_iters);
    let voiced: Vec<Vec<Vec<f64>>> = corpus.par_iter().map(FeatureMatrix::voiced_frames).collect();
    for iter in 0..cfg.train_iters {
        let alignments = align_corpus(corpus, &set);
        let used = alignments.iter().flatten().count();
        if used == 0 {
            return Err(Error::EmptyInput("no utterance could be aligned"));
        }
        let total: f64 = alignments.iter().flatten().map(|a| a.log_likelihood).sum();
        history.push(total);
        log::debug!("viterbi iteration {iter}: {used} utterances, log-likelihood {total:.6}");

        let mut buckets: BTreeMap<(u8, usize), Vec<&[f64]>> = BTreeMap::new();
        // (stays, advances) per (digit, state)
        let mut moves: BTreeMap<(u8, usize), (f64, f64)> = BTreeMap::new();
        for (frames, alignment) in voiced.iter().zip(&alignments) {
            let Some(a) = alignment else { continue };
            for t in 0..a.len() {
                let key = (a.digits[a.digit_index[t]], a.state[t]);
                buckets.entry(key).or_default().push(&frames[t]);
                if t + 1 < a.len() {
                    let entry = moves.entry(key).or_default();
                    if a.digit_index[t + 1] == a.digit_index[t] && a.state[t + 1] == a.state[t] {
                        entry.0 += 1.0;
                    } else {
                        entry.1 += 1.0;
                    }
                }
            }
        }

        let var_floor = set.var_floor.clone();
        let updated: Vec<(u8, DigitHmm)> = set
            .hmms
            .par_iter()
            .map(|(&digit, hmm)| {
                let mut hmm = hmm.clone();
                for s in 0..hmm.num_states() {
                    match buckets.get(&(digit, s)) {
                        Some(frames) if !frames.is_empty() => {
                            for _ in 0..cfg.gmm_em_iters {
                                hmm.states[s].em_step(frames, &var_floor);
                            }
                            hmm.occupancy[s] = frames.len() as f64;
                        }
                        _ => hmm.occupancy[s] = 0.0,
                    }
                    if cfg.reestimate_transitions {
                        if let Some(&(stay, adv)) = moves.get(&(digit, s)) {
                            if stay + adv > 0.0 {
                                hmm.self_loop[s] = (stay / (stay + adv)).clamp(MIN_TRANSITION, 1.0 - MIN_TRANSITION);
                            }
                        }
                    }
                }
                recover_starved_states(&mut hmm);
                (digit, hmm)
            })
            .collect();
        set.hmms = updated.into_iter().collect();
    }
    Ok((set, history))
}

/// A state that received no frames inherits a neighbour's GMM with its
/// heaviest component split in two.
fn recover_starved_states(hmm: &mut DigitHmm) {
    let s_count = hmm.num_states();
    if hmm.occupancy.iter().all(|&o| o == 0.0) {
        return;
    }
    for s in 0..s_count {
        if hmm.occupancy[s] > 0.0 {
            continue;
        }
        let neighbour = (1..s_count)
            .flat_map(|k| [s.checked_sub(k), Some(s + k).filter(|&n| n < s_count)])
            .flatten()
            .find(|&n| hmm.occupancy[n] > 0.0);
        if let Some(n) = neighbour {
            log::warn!("digit {} state {s} starved; splitting state {n}", hmm.digit);
            let mut gmm = hmm.states[n].clone();
            let heaviest = (0..gmm.num_components())
                .max_by(|&a, &b| gmm.weights[a].total_cmp(&gmm.weights[b]))
                .unwrap_or(0);
            let offset: Vec<f64> = gmm.vars[heaviest].iter().map(|v| 0.2 * v.sqrt()).collect();
            gmm.means[heaviest].iter_mut().zip(&offset).for_each(|(m, o)| *m += o);
            hmm.states[s] = gmm;
        }
    }
}

/// Concatenated state GMMs acting as the digit's UBM.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGmm {
    pub digit: u8,
    pub gmm: DiagGmm,
}

impl FlatGmm {
    pub fn num_components(&self) -> usize {
        self.gmm.num_components()
    }

    pub fn dim(&self) -> usize {
        self.gmm.dim()
    }
}

/// Flattens an HMM; component `(s, c)` gets weight `w_(s,c) · occ(s) / Σ occ`.
pub fn flatten_hmm(hmm: &DigitHmm) -> FlatGmm {
    let total: f64 = hmm.occupancy.iter().sum();
    let s_count = hmm.num_states() as f64;
    let mut weights = Vec::with_capacity(hmm.num_components());
    let mut means = Vec::with_capacity(hmm.num_components());
    let mut vars = Vec::with_capacity(hmm.num_components());
    for (s, gmm) in hmm.states.iter().enumerate() {
        let state_weight = if total > 0.0 { hmm.occupancy[s] / total } else { 1.0 / s_count };
        weights.extend(gmm.weights.iter().map(|w| w * state_weight));
        means.extend(gmm.means.iter().cloned());
        vars.extend(gmm.vars.iter().cloned());
    }
    FlatGmm { digit: hmm.digit, gmm: DiagGmm { weights, means, vars } }
}
