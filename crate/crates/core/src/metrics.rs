//! Per-UE NMSE and normalized beamforming gain, estimate-to-truth matching,
//! and the per-trial / aggregate report.

use pathfinding::kuhn_munkres::kuhn_munkres_min;
use pathfinding::matrix::Matrix;

use crate::error::{Error, Result};
use crate::geometry::PolarLocation;
use crate::harness::Method;
use crate::CVector;

fn check_lengths(context: &'static str, a: &CVector, b: &CVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::mismatch(context, a.len(), b.len()));
    }
    Ok(())
}

/// `||a_true - a_hat||^2 / ||a_true||^2`.
pub fn nmse(a_true: &CVector, a_hat: &CVector) -> Result<f64> {
    check_lengths("nmse", a_true, a_hat)?;
    let denom = a_true.norm_squared();
    if denom == 0.0 {
        return Err(Error::invalid("nmse of a zero true channel"));
    }
    Ok((a_true - a_hat).norm_squared() / denom)
}

/// `|v^H a_true|^2 / ||a_true||^2` with `v = a_hat / ||a_hat||`.
pub fn beamforming_gain(a_true: &CVector, a_hat: &CVector) -> Result<f64> {
    check_lengths("beamforming_gain", a_true, a_hat)?;
    let nt = a_true.norm_squared();
    let nh = a_hat.norm_squared();
    if nt == 0.0 || nh == 0.0 {
        return Err(Error::invalid("beamforming gain of a zero vector"));
    }
    Ok(a_hat.dotc(a_true).norm_sqr() / (nt * nh))
}

/// Great-circle angle between the two look directions plus the range gap
/// divided by `distance_scale`.
pub fn location_cost(a: &PolarLocation, b: &PolarLocation, distance_scale: f64) -> f64 {
    let unit = |p: &PolarLocation| {
        let (ce, se) = (p.elevation.cos(), p.elevation.sin());
        [ce * p.azimuth.sin(), se, ce * p.azimuth.cos()]
    };
    let (u, v) = (unit(a), unit(b));
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    sin.atan2(dot) + (a.distance - b.distance).abs() / distance_scale
}

/// Assignment of estimates to true UEs.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `assignment[k]` is the estimate paired with true UE `k`, or `None`
    /// when the estimator came up short.
    pub assignment: Vec<Option<usize>>,
    pub cost: f64,
}

/// Total cost of an assignment; unmatched UEs contribute nothing.
pub fn matching_cost(
    truth: &[PolarLocation],
    est: &[PolarLocation],
    assignment: &[Option<usize>],
    distance_scale: f64,
) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(k, j)| j.map(|j| location_cost(&truth[k], &est[j], distance_scale)))
        .sum()
}

// Costs are below ~10 so this keeps ~1e-12 resolution inside i64.
const COST_QUANTUM: f64 = 1e12;

/// Minimum-total-cost assignment (Kuhn-Munkres). The smaller side is padded
/// with zero-cost dummies, so every UE is matched when `est.len() >= truth.len()`.
pub fn match_estimates(truth: &[PolarLocation], est: &[PolarLocation], distance_scale: f64) -> Result<Matching> {
    if !(distance_scale > 0.0) {
        return Err(Error::invalid(format!(
            "distance scale must be > 0, got {distance_scale}"
        )));
    }
    let size = truth.len().max(est.len());
    if size == 0 {
        return Ok(Matching {
            assignment: Vec::new(),
            cost: 0.0,
        });
    }
    let rows = (0..size).map(|k| {
        (0..size)
            .map(|j| match (truth.get(k), est.get(j)) {
                (Some(t), Some(e)) => (location_cost(t, e, distance_scale) * COST_QUANTUM).round() as i64,
                _ => 0,
            })
            .collect::<Vec<_>>()
    });
    let weights = Matrix::from_rows(rows).expect("square cost matrix");
    let (_, columns) = kuhn_munkres_min(&weights);
    let assignment: Vec<Option<usize>> = columns
        .into_iter()
        .take(truth.len())
        .map(|j| (j < est.len()).then_some(j))
        .collect();
    let cost = matching_cost(truth, est, &assignment, distance_scale);
    Ok(Matching { assignment, cost })
}

/// Scores of one UE in one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct UeScore {
    pub nmse: f64,
    pub bf_gain: f64,
    /// Absolute angle / range errors, parametric methods only.
    pub az_err: Option<f64>,
    pub el_err: Option<f64>,
    pub dist_err: Option<f64>,
}

/// One method on one trial at one SNR point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub method: Method,
    pub snr_db: f64,
    pub trial: usize,
    /// Per-UE scores, or the error that aborted the trial.
    pub outcome: std::result::Result<Vec<UeScore>, String>,
    pub peaks_found: Option<usize>,
}

impl TrialRecord {
    /// UE-averaged `(nmse, bf_gain)`, `None` for a failed trial.
    pub fn ue_means(&self) -> Option<(f64, f64)> {
        let scores = self.outcome.as_ref().ok()?;
        if scores.is_empty() {
            return None;
        }
        let n = scores.len() as f64;
        Some((
            scores.iter().map(|s| s.nmse).sum::<f64>() / n,
            scores.iter().map(|s| s.bf_gain).sum::<f64>() / n,
        ))
    }
}

/// Aggregate of one `(method, snr)` cell over trials.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: Method,
    pub snr_db: f64,
    pub mean_nmse: f64,
    pub median_nmse: f64,
    pub p10_nmse: f64,
    pub p90_nmse: f64,
    pub mean_bf_gain: f64,
    pub trials_ok: usize,
    pub trials_failed: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub trials: Vec<TrialRecord>,
    pub aggregates: Vec<AggregateRow>,
}

impl MetricReport {
    pub fn aggregate_for(&self, method: Method, snr_db: f64) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.snr_db == snr_db)
    }

    /// Failed trials as `(method, snr_db, trial, error)`.
    pub fn failures(&self) -> impl Iterator<Item = (Method, f64, usize, &str)> {
        self.trials.iter().filter_map(|t| match &t.outcome {
            Err(e) => Some((t.method, t.snr_db, t.trial, e.as_str())),
            Ok(_) => None,
        })
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear-interpolation percentile, `p` in `[0, 100]`. The median of an
/// even-length sample is the mean of the two middle values.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(xs: &[f64]) -> f64 {
    percentile(xs, 50.0)
}

/// Folds trial records into one row per `(method, snr)` in first-seen order.
pub fn aggregate(trials: &[TrialRecord]) -> Vec<AggregateRow> {
    let mut keys: Vec<(Method, f64)> = Vec::new();
    for t in trials {
        if !keys.iter().any(|&(m, s)| m == t.method && s == t.snr_db) {
            keys.push((t.method, t.snr_db));
        }
    }
    keys.into_iter()
        .map(|(method, snr_db)| {
            let cell: Vec<&TrialRecord> = trials
                .iter()
                .filter(|t| t.method == method && t.snr_db == snr_db)
                .collect();
            let means: Vec<(f64, f64)> = cell.iter().filter_map(|t| t.ue_means()).collect();
            let nmses: Vec<f64> = means.iter().map(|m| m.0).collect();
            let gains: Vec<f64> = means.iter().map(|m| m.1).collect();
            AggregateRow {
                method,
                snr_db,
                mean_nmse: mean(&nmses),
                median_nmse: median(&nmses),
                p10_nmse: percentile(&nmses, 10.0),
                p90_nmse: percentile(&nmses, 90.0),
                mean_bf_gain: mean(&gains),
                trials_ok: means.len(),
                trials_failed: cell.len() - means.len(),
            }
        })
        .collect()
}
