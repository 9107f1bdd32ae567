//! Probabilistic-accuracy and calibration metrics over streams of resolved
//! steps: calibration score (CS), weighted interval score (WIS), CRPS from
//! quantile ladders, distribution consistency score (DCS) and per-rate
//! empirical coverage.

use serde::{Deserialize, Serialize};

use crate::core::{AlphaLadder, Interval, StepRecord};
use crate::error::{Error, Result};

/// Summary of one record stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub cs: f64,
    pub wis: f64,
    pub crps: f64,
    pub dcs: f64,
    /// Empirical coverage rate per ladder index.
    pub coverage: Vec<f64>,
    pub n_steps: usize,
}

/// Mean absolute gap between empirical and nominal coverage over the
/// ladder's confidence levels c = 1 - α, a Riemann approximation of
/// ∫₀¹ |k(c) - c| dc with uniform weights.
pub fn calibration_score(records: &[StepRecord], ladder: &AlphaLadder) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("calibration score needs at least one record".into()));
    }
    let n = ladder.len();
    let mut total = 0.0;
    for i in 0..n {
        let c = 1.0 - ladder.get(i);
        let cov = empirical_coverage(records, i)?;
        total += (cov - c).abs();
    }
    Ok(total / n as f64)
}

/// Weighted interval score for one step.
///
/// `intervals[k]` is the central interval at rate `ladder[k]`; the weights
/// are w₀ = 1/2 on the median term and wₖ = αₖ/2 on each interval score.
/// Empty intervals contribute as degenerate intervals at the median.
pub fn wis(y: f64, median: f64, intervals: &[Interval], ladder: &AlphaLadder) -> Result<f64> {
    if intervals.len() != ladder.len() {
        return Err(Error::InvalidInput(format!(
            "got {} intervals for a ladder of {} rates",
            intervals.len(),
            ladder.len()
        )));
    }
    let k = ladder.len() as f64;
    let mut total = 0.5 * (y - median).abs();
    for (interval, &alpha) in intervals.iter().zip(ladder.iter()) {
        if alpha == 0.0 {
            return Err(Error::InvalidParameter("interval score divides by alpha = 0".into()));
        }
        let (l, u) = match interval {
            Interval::Range { lo, hi } => (*lo, *hi),
            Interval::Empty => (median, median),
        };
        let mut is = u - l;
        if y < l {
            is += 2.0 * (l - y) / alpha;
        }
        if y > u {
            is += 2.0 * (y - u) / alpha;
        }
        total += 0.5 * alpha * is;
    }
    Ok(total / (k + 0.5))
}

/// CRPS approximated by the pinball-average quantile decomposition:
/// (2/L) Σ ρ_τ(y - Q(τ)) over the provided quantile levels.
///
/// Levels must be strictly increasing in (0, 1) and values non-decreasing
/// (sort crossing ladders first).
pub fn crps(y: f64, levels: &[f64], values: &[f64]) -> Result<f64> {
    if levels.is_empty() {
        return Err(Error::EmptyInput("crps needs at least one quantile level".into()));
    }
    if levels.len() != values.len() {
        return Err(Error::InvalidInput(format!(
            "got {} levels but {} values",
            levels.len(),
            values.len()
        )));
    }
    for (i, &tau) in levels.iter().enumerate() {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidInput(format!(
                "quantile level {tau} at index {i} is outside (0, 1)"
            )));
        }
        if i > 0 && levels[i - 1] >= tau {
            return Err(Error::InvalidInput(format!(
                "quantile levels must be strictly increasing, got {} then {tau}",
                levels[i - 1]
            )));
        }
        if i > 0 && values[i - 1] > values[i] {
            return Err(Error::InvalidInput(format!(
                "crossing quantile values at index {i}: {} > {}",
                values[i - 1],
                values[i]
            )));
        }
    }
    let total: f64 = levels
        .iter()
        .zip(values)
        .map(|(&tau, &v)| pinball(tau, y - v))
        .sum();
    Ok(2.0 * total / levels.len() as f64)
}

/// Pinball loss ρ_τ(z): τ·z above the quantile, (τ-1)·z at or below it.
pub fn pinball(tau: f64, z: f64) -> f64 {
    if z > 0.0 {
        tau * z
    } else {
        (tau - 1.0) * z
    }
}

/// Fraction of steps whose interval ladder is distributionally consistent.
pub fn dcs(records: &[StepRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("dcs needs at least one record".into()));
    }
    let consistent = records.iter().filter(|r| r.is_consistent()).count();
    Ok(consistent as f64 / records.len() as f64)
}

/// Empirical coverage 1 - mean(err) at one ladder index.
pub fn empirical_coverage(records: &[StepRecord], alpha_index: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("coverage needs at least one record".into()));
    }
    let mut sum = 0.0;
    for r in records {
        let err = r.errs.get(alpha_index).ok_or_else(|| {
            Error::InvalidInput(format!(
                "alpha index {alpha_index} out of range for record with {} rates",
                r.errs.len()
            ))
        })?;
        sum += f64::from(*err);
    }
    Ok(1.0 - sum / records.len() as f64)
}

/// Quantile levels and values implied by one record's interval ladder: the
/// α/2 and 1 - α/2 endpoints of every central interval plus the median at
/// the point forecast. Empty intervals degenerate to the forecast.
pub fn record_quantile_set(record: &StepRecord, ladder: &AlphaLadder) -> (Vec<f64>, Vec<f64>) {
    let n = ladder.len();
    let mut levels = Vec::with_capacity(2 * n + 1);
    let mut values = Vec::with_capacity(2 * n + 1);
    // lower endpoints, ascending level: smallest alpha first
    for i in (0..n).rev() {
        levels.push(ladder.get(i) / 2.0);
        values.push(match record.intervals[i] {
            Interval::Range { lo, .. } => lo,
            Interval::Empty => record.y_hat,
        });
    }
    levels.push(0.5);
    values.push(record.y_hat);
    for i in 0..n {
        levels.push(1.0 - ladder.get(i) / 2.0);
        values.push(match record.intervals[i] {
            Interval::Range { hi, .. } => hi,
            Interval::Empty => record.y_hat,
        });
    }
    (levels, values)
}

/// Full metric suite over one record stream.
///
/// The CRPS term needs a valid (non-crossing) quantile set, so crossing
/// value sets are rearranged ascending per step before scoring; CS, WIS,
/// DCS and coverage always see the stream as-is.
pub fn report(records: &[StepRecord], ladder: &AlphaLadder) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("metric report needs at least one record".into()));
    }
    let cs = calibration_score(records, ladder)?;
    let dcs_val = dcs(records)?;
    let mut coverage = Vec::with_capacity(ladder.len());
    for i in 0..ladder.len() {
        coverage.push(empirical_coverage(records, i)?);
    }
    let mut wis_sum = 0.0;
    let mut crps_sum = 0.0;
    for r in records {
        wis_sum += wis(r.y, r.y_hat, &r.intervals, ladder)?;
        let (levels, mut values) = record_quantile_set(r, ladder);
        values.sort_unstable_by(f64::total_cmp);
        crps_sum += crps(r.y, &levels, &values)?;
    }
    Ok(MetricReport {
        cs,
        wis: wis_sum / records.len() as f64,
        crps: crps_sum / records.len() as f64,
        dcs: dcs_val,
        coverage,
        n_steps: records.len(),
    })
}
