//! Alignment-restricted frame posteriors and zero/first-order Baum-Welch
//! statistics, collected per digit occurrence.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::hmm::{Alignment, DigitHmm, FlatGmm, HmmSet};
use crate::linalg::log_sum_exp;

/// Rows are frames, columns the flattened components of one digit. Only the
/// components of the aligned state are non-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    pub digit: u8,
    pub num_components: usize,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaumWelchStats {
    pub digit: u8,
    pub utterance_id: String,
    /// Position of the occurrence in the utterance's digit string.
    pub occurrence: usize,
    pub dim: usize,
    /// Zero-order statistics, one per component.
    pub zero: Vec<f64>,
    /// Centralized first-order statistics, component-major (`C · F`).
    pub first: Vec<f64>,
}

impl BaumWelchStats {
    pub fn empty(digit: u8, num_components: usize, dim: usize) -> Self {
        Self {
            digit,
            utterance_id: String::new(),
            occurrence: 0,
            dim,
            zero: vec![0.0; num_components],
            first: vec![0.0; num_components * dim],
        }
    }

    pub fn num_components(&self) -> usize {
        self.zero.len()
    }

    pub fn total_count(&self) -> f64 {
        self.zero.iter().sum()
    }

    pub fn first_of(&self, component: usize) -> &[f64] {
        &self.first[component * self.dim..(component + 1) * self.dim]
    }

    /// Adds another set of statistics for the same digit and shape.
    pub fn accumulate(&mut self, other: &BaumWelchStats) -> Result<()> {
        if self.digit != other.digit || self.zero.len() != other.zero.len() || self.dim != other.dim {
            return Err(Error::Shape("adding statistics of different digits or shapes".into()));
        }
        self.zero.iter_mut().zip(&other.zero).for_each(|(a, b)| *a += b);
        self.first.iter_mut().zip(&other.first).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Frame posteriors of one digit occurrence given its per-frame states.
pub fn frame_posteriors(frames: &[Vec<f64>], states: &[usize], hmm: &DigitHmm) -> Result<PosteriorMatrix> {
    if frames.len() != states.len() {
        return Err(Error::Shape(format!("{} frames vs {} state labels", frames.len(), states.len())));
    }
    let c_total = hmm.num_components();
    let rows = frames
        .iter()
        .zip(states)
        .map(|(x, &s)| {
            let gmm = hmm
                .states
                .get(s)
                .ok_or_else(|| Error::Shape(format!("state {s} outside digit {} HMM", hmm.digit)))?;
            if x.len() != gmm.dim() {
                return Err(Error::Shape(format!("frame dim {} vs model dim {}", x.len(), gmm.dim())));
            }
            let joint = gmm.component_log_joint(x);
            let norm = log_sum_exp(&joint);
            let mut row = vec![0.0; c_total];
            let offset = hmm.component_offset(s);
            for (c, j) in joint.iter().enumerate() {
                row[offset + c] = (j - norm).exp();
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorMatrix { digit: hmm.digit, num_components: c_total, rows })
}

/// `N_c = Σ_t γ_tc` and `f̃_c = Σ_t γ_tc (o_t − μ_c)`.
pub fn accumulate_stats(frames: &[Vec<f64>], posteriors: &PosteriorMatrix, flat: &FlatGmm) -> Result<BaumWelchStats> {
    let dim = flat.dim();
    let c_total = flat.num_components();
    if posteriors.num_components != c_total || posteriors.rows.len() != frames.len() {
        return Err(Error::Shape(format!(
            "posteriors {}×{} vs {} frames and {} components",
            posteriors.rows.len(),
            posteriors.num_components,
            frames.len(),
            c_total
        )));
    }
    let mut stats = BaumWelchStats::empty(flat.digit, c_total, dim);
    for (x, row) in frames.iter().zip(&posteriors.rows) {
        if x.len() != dim {
            return Err(Error::Shape(format!("frame dim {} vs model dim {dim}", x.len())));
        }
        for (c, &g) in row.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            stats.zero[c] += g;
            let mean = &flat.gmm.means[c];
            let dst = &mut stats.first[c * dim..(c + 1) * dim];
            for j in 0..dim {
                dst[j] += g * (x[j] - mean[j]);
            }
        }
    }
    Ok(stats)
}

/// Statistics of every digit occurrence of an aligned utterance.
pub fn occurrence_stats(
    features: &FeatureMatrix,
    alignment: &Alignment,
    hmms: &HmmSet,
    flats: &BTreeMap<u8, FlatGmm>,
) -> Result<Vec<BaumWelchStats>> {
    let voiced = features.voiced_frames();
    if voiced.len() != alignment.len() {
        return Err(Error::Shape(format!(
            "{}: alignment covers {} frames, utterance has {} voiced",
            features.utterance_id,
            alignment.len(),
            voiced.len()
        )));
    }
    alignment
        .spans
        .iter()
        .enumerate()
        .map(|(pos, &(start, end))| {
            let digit = alignment.digits[pos];
            let hmm = hmms.get(digit)?;
            let flat = flats.get(&digit).ok_or(Error::MissingDigit(digit))?;
            let frames = &voiced[start..end];
            let post = frame_posteriors(frames, &alignment.state[start..end], hmm)?;
            let mut stats = accumulate_stats(frames, &post, flat)?;
            stats.utterance_id = features.utterance_id.clone();
            stats.occurrence = pos;
            Ok(stats)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::DiagGmm;
    use crate::hmm::flatten_hmm;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hmm(rng: &mut ChaCha8Rng, states: usize, comps: usize, dim: usize) -> DigitHmm {
        let states = (0..states)
            .map(|_| {
                let w: Vec<f64> = (0..comps).map(|_| rng.random_range(0.1..1.0)).collect();
                let s: f64 = w.iter().sum();
                DiagGmm {
                    weights: w.iter().map(|x| x / s).collect(),
                    means: (0..comps).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
                    vars: (0..comps).map(|_| (0..dim).map(|_| rng.random_range(0.5..2.0)).collect()).collect(),
                }
            })
            .collect();
        DigitHmm { digit: 5, states, self_loop: vec![], occupancy: vec![] }
    }

    fn with_occupancy(mut hmm: DigitHmm, rng: &mut ChaCha8Rng) -> DigitHmm {
        hmm.occupancy = (0..hmm.num_states()).map(|_| rng.random_range(1.0..10.0)).collect();
        hmm.self_loop = vec![0.5; hmm.num_states()];
        hmm
    }

    #[test]
    fn single_component_posterior_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hmm = with_occupancy(random_hmm(&mut rng, 3, 1, 2), &mut rng);
        let frames: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.random(), rng.random()]).collect();
        let post = frame_posteriors(&frames, &[0, 1, 1, 2, 2], &hmm).unwrap();
        for (row, s) in post.rows.iter().zip([0, 1, 1, 2, 2]) {
            assert_eq!(row[s], 1.0);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn frame_at_distant_component_mean() {
        let gmm = DiagGmm {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.0, 0.0], vec![10.0, 10.0]],
            vars: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        };
        let hmm = DigitHmm { digit: 1, states: vec![gmm], self_loop: vec![0.5], occupancy: vec![1.0] };
        let post = frame_posteriors(&[vec![0.0, 0.0]], &[0], &hmm).unwrap();
        // ratio = exp(-0.5 * 200)
        let expected = 1.0 / (1.0 + (-100.0f64).exp());
        assert!(post.rows[0][0] > 0.999);
        assert!((post.rows[0][0] - expected).abs() < 1e-15);
    }

    #[test]
    fn posteriors_far_in_the_tails_do_not_underflow() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let hmm = with_occupancy(random_hmm(&mut rng, 2, 4, 60), &mut rng);
        let frame = vec![vec![80.0; 60]];
        let post = frame_posteriors(&frame, &[1], &hmm).unwrap();
        assert!((post.rows[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(post.rows[0].iter().all(|g| g.is_finite()));
    }

    #[test]
    fn single_frame_at_mean_has_zero_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hmm = with_occupancy(random_hmm(&mut rng, 2, 1, 3), &mut rng);
        let flat = flatten_hmm(&hmm);
        let frame = vec![flat.gmm.means[1].clone()];
        let post = frame_posteriors(&frame, &[1], &hmm).unwrap();
        let stats = accumulate_stats(&frame, &post, &flat).unwrap();
        assert_eq!(stats.zero, vec![0.0, 1.0]);
        assert!(stats.first.iter().all(|&f| f == 0.0));
    }

    /// Direct double loop over frames and components.
    fn naive_stats(frames: &[Vec<f64>], gamma: &[Vec<f64>], means: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let c_total = means.len();
        let dim = means[0].len();
        let mut n = vec![0.0; c_total];
        let mut f = vec![vec![0.0; dim]; c_total];
        for c in 0..c_total {
            for t in 0..frames.len() {
                n[c] += gamma[t][c];
                for j in 0..dim {
                    f[c][j] += gamma[t][c] * (frames[t][j] - means[c][j]);
                }
            }
        }
        (n, f)
    }

    #[test]
    fn accumulation_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hmm = with_occupancy(random_hmm(&mut rng, 3, 2, 4), &mut rng);
        let flat = flatten_hmm(&hmm);
        let frames: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let states = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2];
        let post = frame_posteriors(&frames, &states, &hmm).unwrap();
        let stats = accumulate_stats(&frames, &post, &flat).unwrap();
        let (n, f) = naive_stats(&frames, &post.rows, &flat.gmm.means);
        for c in 0..6 {
            assert!((stats.zero[c] - n[c]).abs() < 1e-12);
            for j in 0..4 {
                assert!((stats.first_of(c)[j] - f[c][j]).abs() < 1e-12);
            }
        }
        assert!((stats.total_count() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn duplicating_frames_doubles_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hmm = with_occupancy(random_hmm(&mut rng, 2, 3, 2), &mut rng);
        let flat = flatten_hmm(&hmm);
        let frames: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random(), rng.random()]).collect();
        let states = [0, 0, 0, 1, 1, 1];
        let once = accumulate_stats(&frames, &frame_posteriors(&frames, &states, &hmm).unwrap(), &flat).unwrap();
        let doubled: Vec<Vec<f64>> = frames.iter().flat_map(|f| [f.clone(), f.clone()]).collect();
        let dstates: Vec<usize> = states.iter().flat_map(|&s| [s, s]).collect();
        let twice = accumulate_stats(&doubled, &frame_posteriors(&doubled, &dstates, &hmm).unwrap(), &flat).unwrap();
        for (a, b) in once.zero.iter().zip(&twice.zero).chain(once.first.iter().zip(&twice.first)) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_posteriors_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hmm = with_occupancy(random_hmm(&mut rng, 2, 2, 2), &mut rng);
        let flat = flatten_hmm(&hmm);
        let post = PosteriorMatrix { digit: 5, num_components: 3, rows: vec![vec![1.0, 0.0, 0.0]] };
        assert!(matches!(accumulate_stats(&[vec![0.0, 0.0]], &post, &flat), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_stats_are_additive(seed in 0u64..500, split in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hmm = with_occupancy(random_hmm(&mut rng, 2, 3, 3), &mut rng);
            let flat = flatten_hmm(&hmm);
            let frames: Vec<Vec<f64>> =
                (0..10).map(|_| (0..3).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
            let states: Vec<usize> = (0..10).map(|t| usize::from(t >= 5)).collect();
            let post = frame_posteriors(&frames, &states, &hmm).unwrap();
            for (row, &s) in post.rows.iter().zip(&states) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let off = hmm.component_offset(s);
                for (c, g) in row.iter().enumerate() {
                    if c < off || c >= off + 3 {
                        prop_assert_eq!(*g, 0.0);
                    }
                }
            }
            let whole = accumulate_stats(&frames, &post, &flat).unwrap();
            let head = accumulate_stats(&frames[..split], &frame_posteriors(&frames[..split], &states[..split], &hmm).unwrap(), &flat).unwrap();
            let tail = accumulate_stats(&frames[split..], &frame_posteriors(&frames[split..], &states[split..], &hmm).unwrap(), &flat).unwrap();
            let mut sum = head.clone();
            sum.accumulate(&tail).unwrap();
            for (a, b) in whole.zero.iter().zip(&sum.zero).chain(whole.first.iter().zip(&sum.first)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn permuting_components_permutes_stats(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hmm = with_occupancy(random_hmm(&mut rng, 1, 4, 2), &mut rng);
            let flat = flatten_hmm(&hmm);
            let perm = [2usize, 0, 3, 1];
            let mut permuted_hmm = hmm.clone();
            let g = &hmm.states[0];
            permuted_hmm.states[0] = DiagGmm {
                weights: perm.iter().map(|&p| g.weights[p]).collect(),
                means: perm.iter().map(|&p| g.means[p].clone()).collect(),
                vars: perm.iter().map(|&p| g.vars[p].clone()).collect(),
            };
            let pflat = flatten_hmm(&permuted_hmm);
            let frames: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
            let states = vec![0; 8];
            let a = accumulate_stats(&frames, &frame_posteriors(&frames, &states, &hmm).unwrap(), &flat).unwrap();
            let b = accumulate_stats(&frames, &frame_posteriors(&frames, &states, &permuted_hmm).unwrap(), &pflat).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((b.zero[i] - a.zero[p]).abs() < 1e-12);
                for j in 0..2 {
                    prop_assert!((b.first_of(i)[j] - a.first_of(p)[j]).abs() < 1e-12);
                }
            }
        }
    }
}
