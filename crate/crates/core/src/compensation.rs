//! Scatter and uncertainty statistics and the linear compensation
//! transforms fitted on them. Every transform is applied as `y ← Wᵀ y`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ivector::{average_uncertainty, IVectorPosterior};
use crate::linalg::{cholesky_floored, generalized_eigen, inverse_transpose_lower, symmetrize};

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterSet {
    pub digit: u8,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
    pub total: DMatrix<f64>,
    /// Average posterior covariance `S_u`; zero until attached.
    pub uncertainty: DMatrix<f64>,
    pub count: usize,
    pub class_counts: Vec<usize>,
    pub global_mean: DVector<f64>,
    pub class_means: Vec<DVector<f64>>,
}

impl ScatterSet {
    pub fn dim(&self) -> usize {
        self.between.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn with_uncertainty(mut self, s_u: DMatrix<f64>) -> Result<Self> {
        if s_u.shape() != self.between.shape() {
            return Err(Error::Shape(format!("uncertainty {:?} vs scatter {:?}", s_u.shape(), self.between.shape())));
        }
        self.uncertainty = symmetrize(&s_u);
        Ok(self)
    }

    /// Expected within-class covariance `S_w + S_u`.
    pub fn uncertain_within(&self) -> DMatrix<f64> {
        &self.within + &self.uncertainty
    }
}

/// Between-class (`1/S` weighted), within-class (`1/S · 1/n_s` weighted) and
/// total scatter of vectors grouped by speaker.
pub fn scatter_matrices(digit: u8, groups: &[Vec<DVector<f64>>]) -> Result<ScatterSet> {
    let groups: Vec<&Vec<DVector<f64>>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if groups.len() < 2 {
        return Err(Error::DegenerateScatter(groups.len()));
    }
    let dim = groups[0][0].len();
    if groups.iter().flat_map(|g| g.iter()).any(|v| v.len() != dim) {
        return Err(Error::Shape("scatter input vectors differ in dimension".into()));
    }
    let count: usize = groups.iter().map(|g| g.len()).sum();
    let mut global_mean = DVector::zeros(dim);
    for v in groups.iter().flat_map(|g| g.iter()) {
        global_mean += v;
    }
    global_mean /= count as f64;

    let s_count = groups.len() as f64;
    let mut between = DMatrix::zeros(dim, dim);
    let mut within = DMatrix::zeros(dim, dim);
    let mut total = DMatrix::zeros(dim, dim);
    let mut class_means = Vec::with_capacity(groups.len());
    for g in &groups {
        let mut mean = DVector::zeros(dim);
        for v in g.iter() {
            mean += v;
        }
        mean /= g.len() as f64;
        let d = &mean - &global_mean;
        between += &d * d.transpose();
        let mut w = DMatrix::zeros(dim, dim);
        for v in g.iter() {
            let e = v - &mean;
            w += &e * e.transpose();
            let t = v - &global_mean;
            total += &t * t.transpose();
        }
        within += w / g.len() as f64;
        class_means.push(mean);
    }
    Ok(ScatterSet {
        digit,
        between: symmetrize(&(between / s_count)),
        within: symmetrize(&(within / s_count)),
        total: symmetrize(&(total / count as f64)),
        uncertainty: DMatrix::zeros(dim, dim),
        count,
        class_counts: groups.iter().map(|g| g.len()).collect(),
        global_mean,
        class_means,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    UncertainLda,
    UncertainWccn,
    UncertaintyNorm,
    RegularizedLda,
    LengthNorm,
}

impl TransformKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::UncertainLda => "uncertain_lda",
            Self::UncertainWccn => "uncertain_wccn",
            Self::UncertaintyNorm => "uncertainty_norm",
            Self::RegularizedLda => "regularized_lda",
            Self::LengthNorm => "length_norm",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "uncertain_lda" => Self::UncertainLda,
            "uncertain_wccn" => Self::UncertainWccn,
            "uncertainty_norm" => Self::UncertaintyNorm,
            "regularized_lda" => Self::RegularizedLda,
            "length_norm" => Self::LengthNorm,
            other => return Err(Error::Config(format!("unknown transform kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub kind: TransformKind,
    pub digit: u8,
    /// `R × R'` projection; `None` for length normalization.
    pub matrix: Option<DMatrix<f64>>,
    /// Ridge added to `S_b`, for regularized LDA.
    pub beta: Option<f64>,
}

impl Transform {
    pub fn length_norm(digit: u8) -> Self {
        Self { kind: TransformKind::LengthNorm, digit, matrix: None, beta: None }
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.matrix {
            None => length_normalize(v),
            Some(w) => {
                if w.nrows() != v.len() {
                    return Err(Error::Shape(format!("{}: input dim {} vs {}", self.kind, v.len(), w.nrows())));
                }
                Ok(w.transpose() * v)
            }
        }
    }

    pub fn output_dim(&self, input: usize) -> usize {
        self.matrix.as_ref().map_or(input, |w| w.ncols())
    }
}

pub fn length_normalize(v: &DVector<f64>) -> Result<DVector<f64>> {
    let norm = v.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v / norm)
}

/// Top `out_dim` generalized eigenvectors of `(S_b, S_w + S_u)`.
pub fn fit_uncertain_lda(scatter: &ScatterSet, out_dim: usize) -> Result<Transform> {
    let dim = scatter.dim();
    if out_dim == 0 || out_dim > dim {
        return Err(Error::Config(format!("LDA output dimension {out_dim} outside 1..={dim}")));
    }
    let (_, w) = generalized_eigen(&scatter.between, &scatter.uncertain_within())?;
    Ok(Transform {
        kind: TransformKind::UncertainLda,
        digit: scatter.digit,
        matrix: Some(w.columns(0, out_dim).into_owned()),
        beta: None,
    })
}

/// Whitening `W = L⁻ᵀ` for `L Lᵀ = M`, so that `W Wᵀ = M⁻¹` and `Wᵀ M W = I`.
fn cholesky_whitener(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = cholesky_floored(m, what)?;
    inverse_transpose_lower(&chol.l())
}

/// `W Wᵀ = (S_w + S_u)⁻¹`.
pub fn fit_uncertain_wccn(scatter: &ScatterSet) -> Result<Transform> {
    Ok(Transform {
        kind: TransformKind::UncertainWccn,
        digit: scatter.digit,
        matrix: Some(cholesky_whitener(&scatter.uncertain_within(), "uncertain WCCN")?),
        beta: None,
    })
}

/// `W Wᵀ = S_u⁻¹`; needs no speaker labels.
pub fn fit_uncertainty_norm(digit: u8, s_u: &DMatrix<f64>) -> Result<Transform> {
    Ok(Transform {
        kind: TransformKind::UncertaintyNorm,
        digit,
        matrix: Some(cholesky_whitener(s_u, "uncertainty normalization")?),
        beta: None,
    })
}

/// Full-rank generalized eigenvectors of `(S_b + β I, S_w)` with
/// `β = reg_coeff · tr(S_b) / R`.
pub fn fit_regularized_lda(scatter: &ScatterSet, reg_coeff: f64) -> Result<Transform> {
    if !(reg_coeff >= 0.0) {
        return Err(Error::Config(format!("regularization coefficient {reg_coeff} must be non-negative")));
    }
    let dim = scatter.dim();
    let beta = reg_coeff * scatter.between.trace() / dim as f64;
    let regularized = &scatter.between + DMatrix::identity(dim, dim) * beta;
    let (_, w) = generalized_eigen(&regularized, &scatter.within)?;
    Ok(Transform { kind: TransformKind::RegularizedLda, digit: scatter.digit, matrix: Some(w), beta: Some(beta) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompensationMethod {
    /// `[uncertainty_norm, length_norm, regularized_lda]`
    UncertaintyNorm,
    /// `[uncertain_wccn, length_norm, regularized_lda]`
    UncertainWccn,
    /// `[uncertain_lda]`
    UncertainLda,
    None,
}

impl CompensationMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::UncertaintyNorm => "uncertainty_norm",
            Self::UncertainWccn => "uncertain_wccn",
            Self::UncertainLda => "uncertain_lda",
            Self::None => "none",
        }
    }
}

impl FromStr for CompensationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "uncertainty_norm" => Self::UncertaintyNorm,
            "uncertain_wccn" => Self::UncertainWccn,
            "uncertain_lda" => Self::UncertainLda,
            "none" => Self::None,
            other => return Err(Error::Config(format!("unknown compensation method `{other}`"))),
        })
    }
}

impl fmt::Display for CompensationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which matrix uncertainty normalization whitens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncertaintyTarget {
    /// `S_u`, the average posterior covariance.
    Average,
    /// `S_tot + S_u`.
    TotalPlusAverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensationConfig {
    pub method: CompensationMethod,
    pub reg_coeff: f64,
    /// Output dimension of uncertain LDA; `None` keeps full rank.
    pub lda_dim: Option<usize>,
    pub uncertainty_target: UncertaintyTarget,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        Self {
            method: CompensationMethod::UncertaintyNorm,
            reg_coeff: 1.0,
            lda_dim: None,
            uncertainty_target: UncertaintyTarget::Average,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformChain {
    pub digit: u8,
    pub steps: Vec<Transform>,
}

impl TransformChain {
    pub fn identity(digit: u8) -> Self {
        Self { digit, steps: Vec::new() }
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.steps.iter().try_fold(v.clone(), |acc, t| t.apply(&acc))
    }

    pub fn output_dim(&self, input: usize) -> usize {
        self.steps.iter().fold(input, |d, t| t.output_dim(d))
    }

    pub fn validate(&self, input: usize) -> Result<()> {
        let mut dim = input;
        for t in &self.steps {
            if let Some(w) = &t.matrix {
                if w.nrows() != dim {
                    return Err(Error::Shape(format!("{} expects dim {} after dim {dim}", t.kind, w.nrows())));
                }
            }
            dim = t.output_dim(dim);
        }
        Ok(())
    }
}

fn group_by_speaker(means: &[(String, DVector<f64>)]) -> Vec<Vec<DVector<f64>>> {
    let mut groups: BTreeMap<&str, Vec<DVector<f64>>> = BTreeMap::new();
    for (speaker, v) in means {
        groups.entry(speaker.as_str()).or_default().push(v.clone());
    }
    groups.into_values().collect()
}

/// Fits the selected chain on labelled training posteriors of one digit.
/// Each step is fitted on the training vectors transformed by the steps
/// before it.
pub fn build_chain(
    digit: u8,
    training: &[(String, IVectorPosterior)],
    cfg: &CompensationConfig,
) -> Result<TransformChain> {
    if cfg.method == CompensationMethod::None {
        return Ok(TransformChain::identity(digit));
    }
    let posteriors: Vec<IVectorPosterior> = training.iter().map(|(_, p)| p.clone()).collect();
    let s_u = average_uncertainty(&posteriors)?;
    let means: Vec<(String, DVector<f64>)> = training.iter().map(|(s, p)| (s.clone(), p.mean.clone())).collect();
    let first_scatter = || -> Result<ScatterSet> {
        scatter_matrices(digit, &group_by_speaker(&means))?.with_uncertainty(s_u.clone())
    };

    let first = match cfg.method {
        CompensationMethod::UncertaintyNorm => {
            let target = match cfg.uncertainty_target {
                UncertaintyTarget::Average => s_u.clone(),
                UncertaintyTarget::TotalPlusAverage => &first_scatter()?.total + &s_u,
            };
            fit_uncertainty_norm(digit, &target)?
        }
        CompensationMethod::UncertainWccn => fit_uncertain_wccn(&first_scatter()?)?,
        CompensationMethod::UncertainLda => {
            let scatter = first_scatter()?;
            let out = cfg.lda_dim.unwrap_or(scatter.dim());
            return Ok(TransformChain { digit, steps: vec![fit_uncertain_lda(&scatter, out)?] });
        }
        CompensationMethod::None => unreachable!(),
    };
    let norm = Transform::length_norm(digit);
    let projected: Vec<(String, DVector<f64>)> = means
        .iter()
        .map(|(s, v)| Ok((s.clone(), norm.apply(&first.apply(v)?)?)))
        .collect::<Result<_>>()?;
    let lda = fit_regularized_lda(&scatter_matrices(digit, &group_by_speaker(&projected))?, cfg.reg_coeff)?;
    Ok(TransformChain { digit, steps: vec![first, norm, lda] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    fn scatter_from(between: DMatrix<f64>, within: DMatrix<f64>, uncertainty: DMatrix<f64>) -> ScatterSet {
        let n = between.nrows();
        ScatterSet {
            digit: 0,
            total: &between + &within,
            between,
            within,
            uncertainty,
            count: 0,
            class_counts: vec![],
            global_mean: DVector::zeros(n),
            class_means: vec![],
        }
    }

    #[test]
    fn hand_computed_one_dimensional_scatter() {
        let s = scatter_matrices(0, &[vec![v(&[0.0]), v(&[2.0])], vec![v(&[-2.0]), v(&[0.0])]]).unwrap();
        assert!((s.between[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((s.within[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((s.total[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn identical_vectors_have_zero_scatter() {
        let g = vec![v(&[1.0, 2.0]); 3];
        let s = scatter_matrices(0, &[g.clone(), g]).unwrap();
        assert_eq!(s.between.norm() + s.within.norm() + s.total.norm(), 0.0);
    }

    #[test]
    fn single_speaker_is_degenerate() {
        assert!(matches!(scatter_matrices(0, &[vec![v(&[1.0])]]), Err(Error::DegenerateScatter(1))));
    }

    #[test]
    fn balanced_decomposition_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let groups: Vec<Vec<DVector<f64>>> = (0..6)
                .map(|_| (0..4).map(|_| DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0))).collect())
                .collect();
            let s = scatter_matrices(0, &groups).unwrap();
            assert!((&s.total - &s.between - &s.within).norm() < 1e-10);
        }
    }

    #[test]
    fn axis_aligned_lda() {
        let s = scatter_from(DMatrix::from_diagonal(&v(&[1.0, 0.0])), DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2) * 0.5);
        let w = fit_uncertain_lda(&s, 1).unwrap().matrix.unwrap();
        assert!((w[(0, 0)].abs() - 1.0).abs() < 1e-12 && w[(1, 0)].abs() < 1e-12);
        assert!(matches!(fit_uncertain_lda(&s, 3), Err(Error::Config(_))));
    }

    #[test]
    fn lda_directions_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, w, u) = (random_spd(&mut rng, 3), random_spd(&mut rng, 3), random_spd(&mut rng, 3));
        let a = fit_uncertain_lda(&scatter_from(b.clone(), w.clone(), u.clone()), 2).unwrap().matrix.unwrap();
        let c = fit_uncertain_lda(&scatter_from(b * 7.0, w * 7.0, u * 7.0), 2).unwrap().matrix.unwrap();
        for j in 0..2 {
            let (x, y) = (a.column(j).normalize(), c.column(j).normalize());
            assert!((x.dot(&y).abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lda_diagonalizes_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, w, u) = (random_spd(&mut rng, 3), random_spd(&mut rng, 3), random_spd(&mut rng, 3));
        let s = scatter_from(b.clone(), w.clone(), u.clone());
        let m = fit_uncertain_lda(&s, 3).unwrap().matrix.unwrap();
        let wbw = m.transpose() * &b * &m;
        let wsw = m.transpose() * (&w + &u) * &m;
        assert!((wsw - DMatrix::<f64>::identity(3, 3)).amax() < 1e-8);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(wbw[(i, j)].abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn isotropic_wccn() {
        let s = scatter_from(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 3.0);
        let w = fit_uncertain_wccn(&s).unwrap().matrix.unwrap();
        assert!((w - DMatrix::<f64>::identity(2, 2) * 0.5).amax() < 1e-15);
    }

    #[test]
    fn wccn_without_uncertainty_is_classical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let within = random_spd(&mut rng, 4);
        let s = scatter_from(DMatrix::zeros(4, 4), within.clone(), DMatrix::zeros(4, 4));
        let w = fit_uncertain_wccn(&s).unwrap().matrix.unwrap();
        let inv = within.try_inverse().unwrap();
        assert!((&w * w.transpose() - inv).amax() < 1e-9);
    }

    #[test]
    fn diagonal_uncertainty_norm() {
        let w = fit_uncertainty_norm(0, &DMatrix::from_diagonal(&v(&[4.0, 1.0]))).unwrap();
        assert_eq!(w.matrix.as_ref().unwrap(), &DMatrix::from_diagonal(&v(&[0.5, 1.0])));
        assert_eq!(w.apply(&v(&[2.0, 2.0])).unwrap(), v(&[1.0, 2.0]));
        let id = fit_uncertainty_norm(0, &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(id.matrix.unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn large_regularization_whitens_within_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let within = DMatrix::from_diagonal(&v(&[3.0, 1.0, 0.25]));
        let rot = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let within = &rot * within * rot.transpose();
        let s = scatter_from(random_spd(&mut rng, 3), within.clone(), DMatrix::zeros(3, 3));
        let w = fit_regularized_lda(&s, 1e6).unwrap().matrix.unwrap();
        assert_eq!(w.shape(), (3, 3));
        // ascending within-class eigenvalues become the leading directions
        let eig = nalgebra::SymmetricEigen::new(within);
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        for (j, &k) in order.iter().enumerate() {
            let cos = w.column(j).normalize().dot(&eig.eigenvectors.column(k)).abs();
            assert!(cos > 1.0 - 1e-4, "column {j}: {cos}");
        }
    }

    #[test]
    fn zero_regularization_is_classical_lda() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (b, w) = (random_spd(&mut rng, 3), random_spd(&mut rng, 3));
        let reg = fit_regularized_lda(&scatter_from(b.clone(), w.clone(), DMatrix::zeros(3, 3)), 0.0).unwrap();
        let (_, classical) = generalized_eigen(&b, &w).unwrap();
        assert_eq!(reg.beta, Some(0.0));
        assert!((reg.matrix.unwrap() - classical).amax() < 1e-12);
    }

    #[test]
    fn length_normalization() {
        assert_eq!(length_normalize(&v(&[3.0, 4.0])).unwrap(), v(&[0.6, 0.8]));
        let u = v(&[0.6, 0.8]);
        assert!((length_normalize(&u).unwrap() - &u).norm() < 1e-15);
        assert!((length_normalize(&(u.clone() * 42.0)).unwrap() - &u).norm() < 1e-15);
        assert!(matches!(length_normalize(&v(&[0.0, 0.0])), Err(Error::ZeroVector)));
    }

    fn labelled_posteriors(rng: &mut ChaCha8Rng, speakers: usize, per: usize, dim: usize) -> Vec<(String, IVectorPosterior)> {
        let mut out = Vec::new();
        for s in 0..speakers {
            let centre = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
            for i in 0..per {
                let noise = DVector::from_fn(dim, |_, _| rng.random_range(-0.5..0.5));
                let c = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.2..0.2));
                out.push((
                    format!("spk{s}"),
                    IVectorPosterior {
                        digit: 0,
                        utterance_id: format!("u{s}_{i}"),
                        occurrence: 0,
                        mean: &centre + noise,
                        cov: &c * c.transpose() + DMatrix::identity(dim, dim) * 0.1,
                    },
                ));
            }
        }
        out
    }

    #[test]
    fn chain_shapes_per_method() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = labelled_posteriors(&mut rng, 8, 4, 3);
        let kinds = |m| {
            let cfg = CompensationConfig { method: m, ..Default::default() };
            build_chain(0, &data, &cfg).unwrap().steps.iter().map(|t| t.kind).collect::<Vec<_>>()
        };
        use TransformKind::*;
        assert_eq!(kinds(CompensationMethod::UncertaintyNorm), vec![UncertaintyNorm, LengthNorm, RegularizedLda]);
        assert_eq!(kinds(CompensationMethod::UncertainWccn), vec![UncertainWccn, LengthNorm, RegularizedLda]);
        assert_eq!(kinds(CompensationMethod::UncertainLda), vec![UncertainLda]);
        assert!(kinds(CompensationMethod::None).is_empty());
        assert!(matches!("plda".parse::<CompensationMethod>(), Err(Error::Config(_))));
    }

    #[test]
    fn empty_chain_is_identity_and_chain_matches_manual_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = labelled_posteriors(&mut rng, 6, 3, 4);
        let x = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(TransformChain::identity(0).apply(&x).unwrap(), x);

        let chain = build_chain(0, &data, &CompensationConfig::default()).unwrap();
        let w1 = chain.steps[0].matrix.as_ref().unwrap();
        let w3 = chain.steps[2].matrix.as_ref().unwrap();
        let step1 = w1.transpose() * &x;
        let step2 = &step1 / step1.norm();
        let manual = w3.transpose() * step2;
        assert!((chain.apply(&x).unwrap() - manual).amax() < 1e-12);
        chain.validate(4).unwrap();
    }

    #[test]
    fn whitening_identities_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (w, u) = (random_spd(&mut rng, 5), random_spd(&mut rng, 5));
            let s = scatter_from(DMatrix::zeros(5, 5), w.clone(), u.clone());
            let wc = fit_uncertain_wccn(&s).unwrap().matrix.unwrap();
            assert!((wc.transpose() * (&w + &u) * &wc - DMatrix::<f64>::identity(5, 5)).amax() < 1e-8);
            let un = fit_uncertainty_norm(0, &u).unwrap().matrix.unwrap();
            assert!((un.transpose() * &u * &un - DMatrix::<f64>::identity(5, 5)).amax() < 1e-8);
        }
    }
}
