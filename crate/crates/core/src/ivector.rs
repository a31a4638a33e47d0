//! Per-digit total-variability model `M = m + T y`, i-vector posteriors and
//! EM training with minimum-divergence re-estimation.
//!
//! Statistics are centralized around the flattened-HMM means (`ubm_mean`).
//! The model mean `mean` starts there and may drift when the minimum
//! divergence step absorbs the aggregated posterior mean; extraction
//! re-centers the first-order statistics accordingly.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hmm::FlatGmm;
use crate::linalg::{cholesky, cholesky_floored, symmetrize};
use crate::stats::BaumWelchStats;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Occurrences per partial accumulator; fixed so sums do not depend on the thread count.
const ACCUMULATOR_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct IVectorConfig {
    pub rank: usize,
    pub iters: usize,
    pub seed: u64,
    pub min_divergence: bool,
}

impl Default for IVectorConfig {
    fn default() -> Self {
        Self { rank: 300, iters: 10, seed: 0, min_divergence: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IVectorExtractor {
    pub digit: u8,
    pub num_components: usize,
    pub dim: usize,
    /// Means the Baum-Welch statistics are centralized around (`C·F`).
    pub ubm_mean: DVector<f64>,
    /// Model mean supervector `m_d` (`C·F`).
    pub mean: DVector<f64>,
    /// Total-variability matrix `T_d`, `C·F × R`.
    pub t: DMatrix<f64>,
    /// Diagonal of the block-diagonal covariance `Σ_d`.
    pub sigma: DVector<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IVectorPosterior {
    pub digit: u8,
    pub utterance_id: String,
    pub occurrence: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl IVectorExtractor {
    /// Extractor with a seeded random subspace around a flattened HMM.
    pub fn init(flat: &FlatGmm, rank: usize, seed: u64) -> Result<Self> {
        let c_count = flat.num_components();
        let dim = flat.dim();
        let sup = c_count * dim;
        if rank == 0 || rank > sup {
            return Err(Error::Config(format!("i-vector rank {rank} outside 1..={sup}")));
        }
        let ubm_mean = DVector::from_iterator(sup, flat.gmm.means.iter().flatten().copied());
        let sigma = DVector::from_iterator(sup, flat.gmm.vars.iter().flatten().copied());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((flat.digit as u64) << 48));
        let mut t = DMatrix::zeros(sup, rank);
        for r in 0..sup {
            let scale = 1e-2 * sigma[r].sqrt();
            for k in 0..rank {
                let z: f64 = StandardNormal.sample(&mut rng);
                t[(r, k)] = z * scale;
            }
        }
        Ok(Self { digit: flat.digit, num_components: c_count, dim, mean: ubm_mean.clone(), ubm_mean, t, sigma, seed })
    }

    pub fn rank(&self) -> usize {
        self.t.ncols()
    }

    pub fn supervector_dim(&self) -> usize {
        self.num_components * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        let sup = self.supervector_dim();
        if self.ubm_mean.len() != sup || self.mean.len() != sup || self.sigma.len() != sup || self.t.nrows() != sup {
            return Err(Error::Shape(format!("extractor for digit {} has inconsistent dimensions", self.digit)));
        }
        if self.sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Numerical("non-positive extractor variance".into()));
        }
        if self.t.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite total-variability matrix".into()));
        }
        Ok(())
    }

    /// Caches the per-component `T_cᵀ Σ_c⁻¹ T_c` products used by every extraction.
    pub fn prepare(&self) -> PreparedExtractor<'_> {
        let rank = self.rank();
        let mut t_sigma_inv = self.t.transpose();
        for r in 0..self.supervector_dim() {
            let inv = 1.0 / self.sigma[r];
            t_sigma_inv.column_mut(r).scale_mut(inv);
        }
        let grams = (0..self.num_components)
            .map(|c| {
                let rows = c * self.dim..(c + 1) * self.dim;
                let t_c = self.t.rows(rows.start, self.dim);
                let ts_c = t_sigma_inv.columns(rows.start, self.dim);
                symmetrize(&(ts_c * t_c))
            })
            .collect();
        PreparedExtractor { ext: self, t_sigma_inv, grams, rank }
    }

    fn check_stats(&self, stats: &BaumWelchStats) -> Result<()> {
        if stats.digit != self.digit || stats.num_components() != self.num_components || stats.dim != self.dim {
            return Err(Error::Shape(format!(
                "stats for digit {} ({}×{}) vs extractor for digit {} ({}×{})",
                stats.digit,
                stats.num_components(),
                stats.dim,
                self.digit,
                self.num_components,
                self.dim
            )));
        }
        Ok(())
    }

    /// First-order statistics re-centered on the model mean: `f̃ − N (m − μ_ubm)`.
    fn recentered(&self, stats: &BaumWelchStats) -> DVector<f64> {
        let mut f = DVector::from_column_slice(&stats.first);
        for c in 0..self.num_components {
            let n = stats.zero[c];
            if n == 0.0 {
                continue;
            }
            for j in 0..self.dim {
                let r = c * self.dim + j;
                f[r] -= n * (self.mean[r] - self.ubm_mean[r]);
            }
        }
        f
    }
}

pub struct PreparedExtractor<'a> {
    ext: &'a IVectorExtractor,
    t_sigma_inv: DMatrix<f64>,
    grams: Vec<DMatrix<f64>>,
    rank: usize,
}

impl PreparedExtractor<'_> {
    fn precision(&self, stats: &BaumWelchStats) -> DMatrix<f64> {
        let mut p = DMatrix::identity(self.rank, self.rank);
        for (n, g) in stats.zero.iter().zip(&self.grams) {
            if *n != 0.0 {
                p += g * *n;
            }
        }
        p
    }

    /// Posterior of `y` and the log marginal likelihood of the statistics.
    pub fn extract_with_evidence(&self, stats: &BaumWelchStats) -> Result<(IVectorPosterior, f64)> {
        self.ext.check_stats(stats)?;
        let f = self.ext.recentered(stats);
        let b = &self.t_sigma_inv * &f;
        let chol = cholesky(&self.precision(stats))?;
        let mean = chol.solve(&b);
        let cov = symmetrize(&chol.inverse());

        let log_det_p = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mut noise_term = 0.0;
        for c in 0..self.ext.num_components {
            let n = stats.zero[c];
            if n <= 0.0 {
                continue;
            }
            for j in 0..self.ext.dim {
                let r = c * self.ext.dim + j;
                let v = n * self.ext.sigma[r];
                noise_term += LN_2PI + v.ln() + f[r] * f[r] / v;
            }
        }
        let evidence = -0.5 * noise_term - 0.5 * log_det_p + 0.5 * b.dot(&mean);

        let posterior = IVectorPosterior {
            digit: stats.digit,
            utterance_id: stats.utterance_id.clone(),
            occurrence: stats.occurrence,
            mean,
            cov,
        };
        Ok((posterior, evidence))
    }

    pub fn extract(&self, stats: &BaumWelchStats) -> Result<IVectorPosterior> {
        self.extract_with_evidence(stats).map(|(p, _)| p)
    }
}

/// `cov = (I + Tᵀ Σ⁻¹ N T)⁻¹`, `mean = cov Tᵀ Σ⁻¹ F̃`.
pub fn extract_posterior(stats: &BaumWelchStats, ext: &IVectorExtractor) -> Result<IVectorPosterior> {
    ext.prepare().extract(stats)
}

pub fn extract_all(stats: &[BaumWelchStats], ext: &IVectorExtractor) -> Result<Vec<IVectorPosterior>> {
    let prepared = ext.prepare();
    stats.par_iter().map(|s| prepared.extract(s)).collect()
}

/// Log marginal likelihood of the first-order statistics under the linear
/// Gaussian model `F̃ | y ~ N(N T y, N Σ)`, `y ~ N(0, I)`; components with
/// zero count contribute nothing.
pub fn evidence(stats: &BaumWelchStats, ext: &IVectorExtractor) -> Result<f64> {
    ext.prepare().extract_with_evidence(stats).map(|(_, e)| e)
}

/// `S_u = (1/n) Σ cov(y_i)`.
pub fn average_uncertainty(posteriors: &[IVectorPosterior]) -> Result<DMatrix<f64>> {
    let first = posteriors.first().ok_or(Error::EmptyInput("average uncertainty of no posteriors"))?;
    let mut acc = DMatrix::zeros(first.cov.nrows(), first.cov.ncols());
    for p in posteriors {
        acc += &p.cov;
    }
    Ok(acc / posteriors.len() as f64)
}

/// Mean of the posterior means and `S^u_tot = (1/n) Σ (E[y]−ȳ)(E[y]−ȳ)ᵀ + cov(y)`.
pub fn aggregated_posterior(posteriors: &[IVectorPosterior]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let first = posteriors.first().ok_or(Error::EmptyInput("aggregate of no posteriors"))?;
    let rank = first.mean.len();
    let n = posteriors.len() as f64;
    let mut mean = DVector::zeros(rank);
    for p in posteriors {
        mean += &p.mean;
    }
    mean /= n;
    let mut scatter = DMatrix::zeros(rank, rank);
    for p in posteriors {
        let d = &p.mean - &mean;
        scatter += &d * d.transpose() + &p.cov;
    }
    Ok((mean, symmetrize(&(scatter / n))))
}

/// Re-parametrizes the model so the aggregated posterior matches the
/// standard-normal prior: with `L Lᵀ = S^u_tot`, `m ← m + T ȳ`, `T ← T L`,
/// and the posteriors are mapped through `y ← L⁻¹ (y − ȳ)`.
pub fn minimum_divergence(
    ext: &IVectorExtractor,
    posteriors: &[IVectorPosterior],
) -> Result<(IVectorExtractor, Vec<IVectorPosterior>)> {
    let (y_bar, s_tot) = aggregated_posterior(posteriors)?;
    let chol = cholesky(&s_tot).map_err(|_| {
        Error::Numerical(format!("digit {}: aggregated posterior covariance is not positive definite", ext.digit))
    })?;
    let l = chol.l();
    let rank = l.nrows();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(rank, rank))
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;

    let mut updated = ext.clone();
    updated.mean = &ext.mean + &ext.t * &y_bar;
    updated.t = &ext.t * &l;

    let transformed = posteriors
        .iter()
        .map(|p| IVectorPosterior {
            mean: &l_inv * (&p.mean - &y_bar),
            cov: symmetrize(&(&l_inv * &p.cov * l_inv.transpose())),
            ..p.clone()
        })
        .collect();
    Ok((updated, transformed))
}

/// Per-component normal equations accumulated over occurrences.
struct MStepAccumulator {
    /// `Σ_i N_ic E[y yᵀ]_i`, one `R × R` per component.
    yy: Vec<DMatrix<f64>>,
    /// `Σ_i f_ic E[y]_iᵀ`, one `F × R` per component.
    fy: Vec<DMatrix<f64>>,
}

impl MStepAccumulator {
    fn new(c_count: usize, dim: usize, rank: usize) -> Self {
        Self { yy: vec![DMatrix::zeros(rank, rank); c_count], fy: vec![DMatrix::zeros(dim, rank); c_count] }
    }

    fn add(&mut self, ext: &IVectorExtractor, stats: &BaumWelchStats, post: &IVectorPosterior) {
        let f = ext.recentered(stats);
        let second = &post.cov + &post.mean * post.mean.transpose();
        for c in 0..ext.num_components {
            let n = stats.zero[c];
            if n == 0.0 {
                continue;
            }
            self.yy[c] += &second * n;
            let f_c = f.rows(c * ext.dim, ext.dim);
            self.fy[c] += f_c * post.mean.transpose();
        }
    }

    fn merge(&mut self, other: MStepAccumulator) {
        for (a, b) in self.yy.iter_mut().zip(other.yy) {
            *a += b;
        }
        for (a, b) in self.fy.iter_mut().zip(other.fy) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    /// Total evidence before the first iteration and after every iteration.
    pub evidence: Vec<f64>,
}

/// EM training of a digit extractor. Every iteration runs the E-step over
/// all occurrences, solves the per-component M-step normal equations and,
/// when enabled, applies the minimum-divergence re-parametrization.
pub fn train_extractor(
    stats: &[BaumWelchStats],
    flat: &FlatGmm,
    cfg: &IVectorConfig,
) -> Result<(IVectorExtractor, TrainingLog)> {
    let mut ext = IVectorExtractor::init(flat, cfg.rank, cfg.seed)?;
    if stats.is_empty() {
        return Err(Error::EmptyInput("no statistics to train an extractor"));
    }
    if stats.len() < cfg.rank {
        log::warn!("digit {}: {} occurrences for rank {}", flat.digit, stats.len(), cfg.rank);
    }
    let mut evidence = Vec::with_capacity(cfg.iters + 1);
    for iter in 0..=cfg.iters {
        let prepared = ext.prepare();
        let results: Vec<(IVectorPosterior, f64)> =
            stats.par_iter().map(|s| prepared.extract_with_evidence(s)).collect::<Result<_>>()?;
        let total: f64 = results.iter().map(|(_, e)| e).sum();
        evidence.push(total);
        log::debug!("digit {} extractor iteration {iter}: evidence {total:.6}", ext.digit);
        if iter == cfg.iters {
            break;
        }
        let posteriors: Vec<IVectorPosterior> = results.into_iter().map(|(p, _)| p).collect();
        ext = m_step(&ext, stats, &posteriors)?;
        if cfg.min_divergence {
            ext = minimum_divergence(&ext, &posteriors)?.0;
        }
    }
    Ok((ext, TrainingLog { evidence }))
}

fn m_step(ext: &IVectorExtractor, stats: &[BaumWelchStats], posteriors: &[IVectorPosterior]) -> Result<IVectorExtractor> {
    let (c_count, dim, rank) = (ext.num_components, ext.dim, ext.rank());
    let partials: Vec<MStepAccumulator> = stats
        .par_chunks(ACCUMULATOR_CHUNK)
        .zip(posteriors.par_chunks(ACCUMULATOR_CHUNK))
        .map(|(s_chunk, p_chunk)| {
            let mut acc = MStepAccumulator::new(c_count, dim, rank);
            for (s, p) in s_chunk.iter().zip(p_chunk) {
                acc.add(ext, s, p);
            }
            acc
        })
        .collect();
    let mut total = MStepAccumulator::new(c_count, dim, rank);
    for p in partials {
        total.merge(p);
    }
    let mut updated = ext.clone();
    for c in 0..c_count {
        if total.yy[c].iter().all(|&x| x == 0.0) {
            continue;
        }
        let chol = cholesky_floored(&total.yy[c], "i-vector M-step")?;
        // T_c A_c = C_c  =>  A_c T_cᵀ = C_cᵀ
        let t_c = chol.solve(&total.fy[c].transpose()).transpose();
        updated.t.rows_mut(c * dim, dim).copy_from(&t_c);
    }
    Ok(updated)
}
