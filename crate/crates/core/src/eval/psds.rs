//! Polyphonic sound detection score with intersection-based validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventTable};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdsConfig {
    /// Detection tolerance: share of a detection that must overlap references.
    pub dtc: Real,
    /// Ground-truth coverage needed for a reference to count as detected.
    pub gtc: Real,
    /// Weight of the across-class TPR standard deviation penalty.
    pub alpha_st: Real,
    /// Upper eFPR bound (false positives per hour) of the integrated area.
    pub efpr_max: Real,
    pub thresholds: Vec<Real>,
}

/// `n` evenly spaced thresholds strictly inside (0, 1).
pub fn threshold_sweep(n: usize) -> Vec<Real> {
    (1..=n).map(|i| i as Real / (n + 1) as Real).collect()
}

impl Default for PsdsConfig {
    fn default() -> Self {
        PsdsConfig { dtc: 0.7, gtc: 0.7, alpha_st: 1.0, efpr_max: 100.0, thresholds: threshold_sweep(50) }
    }
}

impl PsdsConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: Real| v > 0.0 && v <= 1.0;
        if !unit(self.dtc) || !unit(self.gtc) {
            return Err(Error::Config("psds.dtc and psds.gtc must lie in (0, 1]".into()));
        }
        if self.thresholds.is_empty() {
            return Err(Error::Config("psds threshold sweep is empty".into()));
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("psds thresholds must be strictly increasing".into()));
        }
        if !(self.efpr_max > 0.0) || self.alpha_st < 0.0 {
            return Err(Error::Config("psds.efpr_max must be positive and psds.alpha_st nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-class outcome of one operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatingPoint {
    /// `[class]` true-positive rates; `None` for classes without references.
    pub tpr: Vec<Option<Real>>,
    /// `[class]` false positives per hour.
    pub efpr: Vec<Real>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsdsResult {
    pub score: Real,
    pub points: Vec<OperatingPoint>,
}

fn overlap(a: &Event, b: &Event) -> Real {
    (a.offset.min(b.offset) - a.onset.max(b.onset)).max(0.0)
}

/// Scores one operating point: detections failing the dtc test are false
/// positives, and references covered to `gtc` by passing detections are hits.
pub fn operating_point(refs: &EventTable, ests: &EventTable, classes: &[String], hours: Real, pc: &PsdsConfig) -> OperatingPoint {
    let k = classes.len();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    let mut fps = vec![0usize; k];
    let empty = Vec::new();
    let files: std::collections::BTreeSet<&String> = refs.keys().chain(ests.keys()).collect();
    for file in files {
        let r_all = refs.get(file).unwrap_or(&empty);
        let e_all = ests.get(file).unwrap_or(&empty);
        for (c, class) in classes.iter().enumerate() {
            let r: Vec<&Event> = r_all.iter().filter(|e| &e.label == class).collect();
            let mut passing = Vec::new();
            for e in e_all.iter().filter(|e| &e.label == class) {
                let covered: Real = r.iter().map(|g| overlap(e, g)).sum();
                if e.duration() > 0.0 && covered / e.duration() >= pc.dtc - 1e-12 {
                    passing.push(e);
                } else {
                    fps[c] += 1;
                }
            }
            totals[c] += r.len();
            for g in &r {
                let covered: Real = passing.iter().map(|e| overlap(e, g)).sum();
                if covered / g.duration() >= pc.gtc - 1e-12 {
                    hits[c] += 1;
                }
            }
        }
    }
    OperatingPoint {
        tpr: (0..k).map(|c| (totals[c] > 0).then(|| hits[c] as Real / totals[c] as Real)).collect(),
        efpr: fps.iter().map(|&f| f as Real / hours).collect(),
    }
}

/// Step-function ROC value at `x`: the best TPR among points with eFPR ≤ x.
fn roc_at(points: &[(Real, Real)], x: Real) -> Real {
    points.iter().filter(|(f, _)| *f <= x).map(|(_, t)| *t).fold(0.0, Real::max)
}

/// Normalized area under the penalized mean-TPR curve up to `efpr_max`.
pub fn psds_from_points(points: &[OperatingPoint], pc: &PsdsConfig) -> Result<Real> {
    let Some(first) = points.first() else {
        return Err(Error::Config("psds needs at least one operating point".into()));
    };
    let scored: Vec<usize> = (0..first.tpr.len()).filter(|&c| first.tpr[c].is_some()).collect();
    if scored.is_empty() {
        return Err(Error::Evaluation("no class has reference events; psds is undefined".into()));
    }
    let curves: Vec<Vec<(Real, Real)>> =
        scored.iter().map(|&c| points.iter().map(|p| (p.efpr[c], p.tpr[c].unwrap_or(0.0))).collect()).collect();
    let mut xs: Vec<Real> = curves.iter().flatten().map(|(f, _)| *f).filter(|f| *f < pc.efpr_max).collect();
    xs.push(0.0);
    xs.sort_by(Real::total_cmp);
    xs.dedup();
    let n = scored.len() as Real;
    let mut area = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let next = xs.get(i + 1).copied().unwrap_or(pc.efpr_max);
        let tprs: Vec<Real> = curves.iter().map(|c| roc_at(c, x)).collect();
        let mean = tprs.iter().sum::<Real>() / n;
        let std = (tprs.iter().map(|t| (t - mean) * (t - mean)).sum::<Real>() / n).sqrt();
        area += (mean - pc.alpha_st * std).max(0.0) * (next - x);
    }
    Ok(area / pc.efpr_max)
}

/// PSDS over one estimate table per threshold of `pc.thresholds`.
pub fn psds(
    sweep: &[EventTable],
    refs: &EventTable,
    classes: &[String],
    total_seconds: Real,
    pc: &PsdsConfig,
) -> Result<PsdsResult> {
    pc.validate()?;
    if sweep.len() != pc.thresholds.len() {
        return Err(Error::Config(format!(
            "{} estimate sets for {} thresholds",
            sweep.len(),
            pc.thresholds.len()
        )));
    }
    if !(total_seconds > 0.0) {
        return Err(Error::Evaluation("evaluated audio has zero duration".into()));
    }
    let hours = total_seconds / 3600.0;
    let points: Vec<OperatingPoint> = sweep.iter().map(|e| operating_point(refs, e, classes, hours, pc)).collect();
    let score = psds_from_points(&points, pc)?;
    Ok(PsdsResult { score, points })
}
