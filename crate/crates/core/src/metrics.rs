//! DET operating points, equal error rate and normalized minimum detection
//! cost. A trial is accepted iff its score is at least the threshold.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points in increasing threshold order: `-∞`, every distinct
/// score, then `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetCurve {
    pub points: Vec<OperatingPoint>,
    pub num_target: usize,
    pub num_nontarget: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl DcfParams {
    /// Operating point of the 2008 NIST evaluation.
    pub const OLD: Self = Self { c_miss: 10.0, c_fa: 1.0, p_target: 0.01 };
    /// Operating point of the 2010 NIST evaluation.
    pub const NEW: Self = Self { c_miss: 1.0, c_fa: 1.0, p_target: 0.001 };

    pub fn validate(&self) -> Result<()> {
        if !(self.c_miss > 0.0 && self.c_fa > 0.0 && self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!(
                "DCF parameters need positive costs and a prior in (0,1): {self:?}"
            )));
        }
        Ok(())
    }

    /// Cost of the better trivial policy (accept all or reject all).
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// Builds the curve from `(score, is_target)` pairs.
pub fn compute_det(trials: &[(f64, bool)]) -> Result<DetCurve> {
    let num_target = trials.iter().filter(|t| t.1).count();
    let num_nontarget = trials.len() - num_target;
    if num_target == 0 || num_nontarget == 0 {
        return Err(Error::DegenerateTrialSet);
    }
    if let Some((s, _)) = trials.iter().find(|t| !t.0.is_finite()) {
        return Err(Error::Numerical(format!("non-finite score {s}")));
    }
    let mut sorted: Vec<(f64, bool)> = trials.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (num_target as f64, num_nontarget as f64);

    // Sweeping upward: at a threshold equal to a score, every trial with a
    // lower score has been rejected.
    let mut points = vec![OperatingPoint { threshold: f64::NEG_INFINITY, far: 1.0, frr: 0.0 }];
    let (mut rejected_targets, mut rejected_nontargets) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        points.push(OperatingPoint {
            threshold,
            far: (num_nontarget - rejected_nontargets) as f64 / nn,
            frr: rejected_targets as f64 / nt,
        });
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                rejected_targets += 1;
            } else {
                rejected_nontargets += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint { threshold: f64::INFINITY, far: 0.0, frr: 1.0 });
    Ok(DetCurve { points, num_target, num_nontarget })
}

/// Linear interpolation between the adjacent operating points where
/// `FAR − FRR` changes sign.
pub fn compute_eer(curve: &DetCurve) -> f64 {
    let pts = &curve.points;
    for k in 0..pts.len() {
        let d = pts[k].far - pts[k].frr;
        if d <= 0.0 {
            if d == 0.0 || k == 0 {
                return 0.5 * (pts[k].far + pts[k].frr);
            }
            let prev = pts[k - 1];
            let dp = prev.far - prev.frr;
            let alpha = dp / (dp - d);
            let far = prev.far + alpha * (pts[k].far - prev.far);
            let frr = prev.frr + alpha * (pts[k].frr - prev.frr);
            return 0.5 * (far + frr);
        }
    }
    // The +∞ point always has FAR − FRR = −1.
    unreachable!("DET curve without a +inf operating point")
}

pub fn detection_cost(point: &OperatingPoint, params: &DcfParams) -> f64 {
    params.c_miss * params.p_target * point.frr + params.c_fa * (1.0 - params.p_target) * point.far
}

/// Minimum over operating points of the detection cost, normalized by the
/// cost of the better trivial policy.
pub fn compute_min_dcf(curve: &DetCurve, params: &DcfParams) -> f64 {
    let best = curve.points.iter().map(|p| detection_cost(p, params)).fold(f64::INFINITY, f64::min);
    best / params.default_cost()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub num_target: usize,
    pub num_nontarget: usize,
    pub eer: f64,
    pub min_dcf_old: f64,
    pub min_dcf_new: f64,
}

impl MetricsReport {
    pub fn from_curve(curve: &DetCurve, old: &DcfParams, new: &DcfParams) -> Self {
        Self {
            num_target: curve.num_target,
            num_nontarget: curve.num_nontarget,
            eer: compute_eer(curve),
            min_dcf_old: compute_min_dcf(curve, old),
            min_dcf_new: compute_min_dcf(curve, new),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16}{:>12}", "metric", "value");
        let _ = writeln!(out, "{:<16}{:>12}", "targets", self.num_target);
        let _ = writeln!(out, "{:<16}{:>12}", "nontargets", self.num_nontarget);
        let _ = writeln!(out, "{:<16}{:>11.3}%", "EER", 100.0 * self.eer);
        let _ = writeln!(out, "{:<16}{:>12.4}", "minDCF (old)", self.min_dcf_old);
        let _ = writeln!(out, "{:<16}{:>12.4}", "minDCF (new)", self.min_dcf_new);
        out
    }

    pub fn to_key_value(&self) -> String {
        format!(
            "num_target={}\nnum_nontarget={}\neer={}\nmin_dcf_old={}\nmin_dcf_new={}\n",
            self.num_target, self.num_nontarget, self.eer, self.min_dcf_old, self.min_dcf_new
        )
    }
}

/// `threshold,far,frr` rows for external plotting.
pub fn det_csv(curve: &DetCurve) -> String {
    let mut out = String::from("threshold,far,frr\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.far, p.frr);
    }
    out
}
