//! Diagonal-covariance Gaussian mixtures: log-domain evaluation, k-means
//! initialization and EM re-estimation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Components whose soft count falls below this are considered starved.
const STARVED_COUNT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

pub fn log_gaussian(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((xi, mi), vi) in x.iter().zip(mean).zip(var) {
        let d = xi - mi;
        acc += LN_2PI + vi.ln() + d * d / vi;
    }
    -0.5 * acc
}

impl DiagGmm {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || means.len() != vars.len() {
            return Err(Error::Shape(format!(
                "gmm with {} weights, {} means, {} variances",
                weights.len(),
                means.len(),
                vars.len()
            )));
        }
        let dim = means[0].len();
        if means.iter().chain(&vars).any(|v| v.len() != dim) {
            return Err(Error::Shape("gmm components differ in dimension".into()));
        }
        if vars.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::Numerical("non-positive gmm variance".into()));
        }
        Ok(Self { weights, means, vars })
    }

    pub fn single(mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self { weights: vec![1.0], means: vec![mean], vars: vec![var] }
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// `ln w_c + ln N(x | μ_c, Σ_c)` for every component.
    pub fn component_log_joint(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.vars))
            .map(|(w, (m, v))| w.ln() + log_gaussian(x, m, v))
            .collect()
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_joint(x))
    }

    /// Component posteriors for one frame, normalized in the log domain.
    pub fn posteriors(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let joint = self.component_log_joint(x);
        let total = log_sum_exp(&joint);
        (joint.iter().map(|j| (j - total).exp()).collect(), total)
    }

    /// One EM iteration on `frames`. Returns the log-likelihood of the frames
    /// under the parameters *before* the update.
    pub fn em_step(&mut self, frames: &[&[f64]], var_floor: &[f64]) -> f64 {
        let c_count = self.num_components();
        let dim = self.dim();
        let mut occ = vec![0.0; c_count];
        let mut first = vec![vec![0.0; dim]; c_count];
        let mut second = vec![vec![0.0; dim]; c_count];
        let mut total = 0.0;
        for x in frames {
            let (post, ll) = self.posteriors(x);
            total += ll;
            for c in 0..c_count {
                let g = post[c];
                if g == 0.0 {
                    continue;
                }
                occ[c] += g;
                for j in 0..dim {
                    first[c][j] += g * x[j];
                    second[c][j] += g * x[j] * x[j];
                }
            }
        }
        let n = frames.len() as f64;
        if n == 0.0 {
            return total;
        }
        for c in 0..c_count {
            if occ[c] < STARVED_COUNT {
                continue;
            }
            self.weights[c] = occ[c] / n;
            for j in 0..dim {
                let mean = first[c][j] / occ[c];
                let var = second[c][j] / occ[c] - mean * mean;
                self.means[c][j] = mean;
                self.vars[c][j] = var.max(var_floor[j]);
            }
        }
        let starved: Vec<usize> = (0..c_count).filter(|&c| occ[c] < STARVED_COUNT).collect();
        if !starved.is_empty() {
            log::warn!("{} starved gmm component(s), splitting heaviest", starved.len());
            for c in starved {
                self.split_heaviest_into(c);
            }
        }
        let wsum: f64 = self.weights.iter().sum();
        self.weights.iter_mut().for_each(|w| *w /= wsum);
        total
    }

    /// Replaces component `target` by half of the heaviest other component,
    /// with the two halves' means moved ±0.2 standard deviations apart.
    pub fn split_heaviest_into(&mut self, target: usize) {
        let Some(heavy) = (0..self.num_components())
            .filter(|&c| c != target)
            .max_by(|&a, &b| self.weights[a].total_cmp(&self.weights[b]).then(b.cmp(&a)))
        else {
            return;
        };
        let half = self.weights[heavy] / 2.0;
        self.weights[heavy] = half;
        self.weights[target] = half;
        let (mean, var) = (self.means[heavy].clone(), self.vars[heavy].clone());
        let offset: Vec<f64> = var.iter().map(|v| 0.2 * v.sqrt()).collect();
        self.means[heavy] = mean.iter().zip(&offset).map(|(m, o)| m + o).collect();
        self.means[target] = mean.iter().zip(&offset).map(|(m, o)| m - o).collect();
        self.vars[target] = var;
    }

    /// Fits `k` components by k-means++ seeding and Lloyd iterations,
    /// followed by moment matching on the hard clusters.
    pub fn from_kmeans<R: Rng>(
        frames: &[&[f64]],
        k: usize,
        iters: usize,
        var_floor: &[f64],
        fallback_var: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("k-means needs at least one frame"));
        }
        if k == 0 {
            return Err(Error::Config("component count must be at least 1".into()));
        }
        let dim = frames[0].len();
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

        let mut centers: Vec<Vec<f64>> = vec![frames[rng.random_range(0..frames.len())].to_vec()];
        while centers.len() < k.min(frames.len()) {
            let d2: Vec<f64> = frames
                .iter()
                .map(|f| centers.iter().map(|c| sq(f, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d2.iter().sum();
            if total <= 0.0 {
                break;
            }
            let mut pick = rng.random::<f64>() * total;
            let mut idx = frames.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if pick < *d {
                    idx = i;
                    break;
                }
                pick -= d;
            }
            centers.push(frames[idx].to_vec());
        }

        let mut assign = vec![0usize; frames.len()];
        for _ in 0..iters.max(1) {
            for (a, f) in assign.iter_mut().zip(frames) {
                *a = (0..centers.len())
                    .min_by(|&x, &y| sq(f, &centers[x]).total_cmp(&sq(f, &centers[y])))
                    .unwrap_or(0);
            }
            let mut sums = vec![vec![0.0; dim]; centers.len()];
            let mut counts = vec![0usize; centers.len()];
            for (a, f) in assign.iter().zip(frames) {
                counts[*a] += 1;
                sums[*a].iter_mut().zip(f.iter()).for_each(|(s, x)| *s += x);
            }
            for c in 0..centers.len() {
                if counts[c] > 0 {
                    centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
        }

        let n = frames.len() as f64;
        let mut weights = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut vars = Vec::with_capacity(k);
        let mut empty = Vec::new();
        for c in 0..k {
            let members: Vec<&[f64]> =
                assign.iter().zip(frames).filter(|(a, _)| **a == c).map(|(_, f)| *f).collect();
            if c >= centers.len() || members.is_empty() {
                weights.push(0.0);
                means.push(vec![0.0; dim]);
                vars.push(fallback_var.to_vec());
                empty.push(c);
                continue;
            }
            let m = members.len() as f64;
            let mean: Vec<f64> = (0..dim).map(|j| members.iter().map(|f| f[j]).sum::<f64>() / m).collect();
            let var: Vec<f64> = if members.len() < 2 {
                fallback_var.iter().zip(var_floor).map(|(v, fl)| v.max(*fl)).collect()
            } else {
                (0..dim)
                    .map(|j| {
                        let v = members.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / m;
                        v.max(var_floor[j])
                    })
                    .collect()
            };
            weights.push(m / n);
            means.push(mean);
            vars.push(var);
        }
        let mut gmm = Self { weights, means, vars };
        for c in empty {
            gmm.split_heaviest_into(c);
        }
        Ok(gmm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn em_step_never_decreases_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames: Vec<Vec<f64>> = (0..300)
            .map(|i| {
                let c = if i % 3 == 0 { 4.0 } else { -1.0 };
                vec![c + rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0)]
            })
            .collect();
        let refs: Vec<&[f64]> = frames.iter().map(|f| f.as_slice()).collect();
        let floor = [1e-4, 1e-4];
        let mut gmm = DiagGmm::from_kmeans(&refs, 3, 5, &floor, &[1.0, 1.0], &mut rng).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..10 {
            let ll = gmm.em_step(&refs, &floor);
            assert!(ll >= prev - 1e-9);
            prev = ll;
        }
        assert!((gmm.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_with_fewer_frames_than_components_splits() {
        let frames = [vec![0.0, 0.0], vec![1.0, 1.0]];
        let refs: Vec<&[f64]> = frames.iter().map(|f| f.as_slice()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gmm = DiagGmm::from_kmeans(&refs, 4, 3, &[1e-4; 2], &[1.0; 2], &mut rng).unwrap();
        assert_eq!(gmm.num_components(), 4);
        assert!((gmm.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gmm.weights.iter().all(|&w| w > 0.0));
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(gmm.means[a], gmm.means[b]);
            }
        }
    }
}
