//! Foundational types and score/error functions shared by every controller.
//!
//! A run is organised around a ladder of miscoverage rates α₁ > … > αₙ. At
//! each time step a controller emits one conformalized score quantile per
//! rate; observing the target resolves those quantiles into binary coverage
//! errors which drive the next adjustment. Everything downstream (losses,
//! metrics, baselines) is expressed in terms of the types here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered set of target miscoverage rates, strictly decreasing in (0, 1).
///
/// The index space of every per-rate quantity in the crate: index `i`
/// always refers to `alphas()[i]` for the lifetime of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaLadder {
    alphas: Vec<f64>,
}

impl AlphaLadder {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidInput("alpha ladder must be non-empty".into()));
        }
        for (i, &a) in alphas.iter().enumerate() {
            if !a.is_finite() || a <= 0.0 || a >= 1.0 {
                return Err(Error::InvalidInput(format!(
                    "alpha[{i}] = {a} is outside the open interval (0, 1)"
                )));
            }
            if i > 0 && alphas[i - 1] <= a {
                return Err(Error::InvalidInput(format!(
                    "alpha ladder must be strictly decreasing, got {} then {a} at index {i}",
                    alphas[i - 1]
                )));
            }
        }
        Ok(Self { alphas })
    }

    /// The customary eleven-level ladder used by the default configuration.
    pub fn default_eleven() -> Self {
        Self::new(vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02])
            .expect("static ladder is valid")
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn get(&self, i: usize) -> f64 {
        self.alphas[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.alphas.iter()
    }
}

/// Per-rate score-space quantiles at one time step.
///
/// `q_raw` is the raw predicted quantile q̃, `delta` the additive
/// conformalization adjustment Δq̃, and `q_conf` the conformalized quantile
/// the interval is built from. A test-time adaptation term, when active, is
/// folded into `q_conf` (so `q_conf - q_raw - delta` recovers it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileLadder {
    pub q_raw: Vec<f64>,
    pub delta: Vec<f64>,
    pub q_conf: Vec<f64>,
}

impl QuantileLadder {
    pub fn new(q_raw: Vec<f64>, delta: Vec<f64>, q_conf: Vec<f64>) -> Result<Self> {
        if q_raw.len() != delta.len() || q_raw.len() != q_conf.len() {
            return Err(Error::InvalidInput(format!(
                "quantile ladder vectors must share a length, got {}/{}/{}",
                q_raw.len(),
                delta.len(),
                q_conf.len()
            )));
        }
        if q_raw.is_empty() {
            return Err(Error::InvalidInput("quantile ladder must be non-empty".into()));
        }
        Ok(Self { q_raw, delta, q_conf })
    }

    /// Ladder with `q_conf = q_raw + delta` (the plain conformalization step).
    pub fn conformalized(q_raw: Vec<f64>, delta: Vec<f64>) -> Result<Self> {
        let q_conf = q_raw.iter().zip(&delta).map(|(q, d)| q + d).collect();
        Self::new(q_raw, delta, q_conf)
    }

    pub fn len(&self) -> usize {
        self.q_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_raw.is_empty()
    }

    /// True when the raw quantiles are non-negative and non-decreasing in
    /// index, the structural guarantee of the cumulative prediction head.
    pub fn raw_is_monotone(&self) -> bool {
        self.q_raw.iter().all(|q| *q >= 0.0)
            && self.q_raw.windows(2).all(|w| w[0] <= w[1])
    }
}

/// A prediction interval in target units. `Empty` marks a negative
/// conformalized quantile: no target value can satisfy the score bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Interval {
    Empty,
    Range { lo: f64, hi: f64 },
}

impl Interval {
    pub fn contains(&self, y: f64) -> bool {
        match self {
            Interval::Empty => false,
            Interval::Range { lo, hi } => *lo <= y && y <= *hi,
        }
    }

    pub fn width(&self) -> f64 {
        match self {
            Interval::Empty => 0.0,
            Interval::Range { lo, hi } => hi - lo,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Interval::Empty)
    }

    /// True when `self` is contained in `other`; the empty interval is
    /// nested inside everything.
    pub fn nested_in(&self, other: &Interval) -> bool {
        match (self, other) {
            (Interval::Empty, _) => true,
            (Interval::Range { .. }, Interval::Empty) => false,
            (Interval::Range { lo: li, hi: hi_i }, Interval::Range { lo: lj, hi: hi_j }) => {
                li >= lj && hi_i <= hi_j
            }
        }
    }
}

/// One resolved online step: the observed target, the forecast it was scored
/// against, the quantile ladder in effect, and the per-rate outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub y: f64,
    pub y_hat: f64,
    pub tau: usize,
    pub s: f64,
    pub errs: Vec<u8>,
    pub ladder: QuantileLadder,
    pub intervals: Vec<Interval>,
}

impl StepRecord {
    /// Resolves an observation against an emitted ladder, deriving the score,
    /// per-rate errors and intervals so the err/interval invariants hold by
    /// construction.
    pub fn resolve(t: usize, y: f64, y_hat: f64, tau: usize, ladder: QuantileLadder) -> Result<Self> {
        let s = nonconformity(y, y_hat)?;
        let errs = ladder.q_conf.iter().map(|&q| coverage_error(s, q)).collect();
        let intervals = ladder
            .q_conf
            .iter()
            .map(|&q| interval_from_quantile(y_hat, q))
            .collect();
        Ok(Self { t, y, y_hat, tau, s, errs, ladder, intervals })
    }

    pub fn is_consistent(&self) -> bool {
        self.intervals
            .windows(2)
            .all(|w| w[0].nested_in(&w[1]))
    }
}

/// Append-only, time-ordered sequence of resolved steps.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct History {
    records: Vec<StepRecord>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.t <= last.t {
                return Err(Error::InvalidInput(format!(
                    "history times must be strictly increasing: {} after {}",
                    record.t, last.t
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Absolute-residual non-conformity score s = |y - ŷ|.
pub fn nonconformity(y: f64, y_hat: f64) -> Result<f64> {
    if !y.is_finite() || !y_hat.is_finite() {
        return Err(Error::InvalidInput(format!(
            "nonconformity requires finite inputs, got y = {y}, y_hat = {y_hat}"
        )));
    }
    Ok((y - y_hat).abs())
}

/// Binary coverage error: 1 when the score exceeds the quantile. The
/// boundary s = q counts as covered.
pub fn coverage_error(s: f64, q: f64) -> u8 {
    if s > q {
        1
    } else {
        0
    }
}

/// Sigmoid relaxation of the coverage error with temperature `k`.
pub fn soft_error(s: f64, q: f64, k: f64) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigmoid temperature must be positive, got {k}"
        )));
    }
    Ok(sigmoid((s - q) / k))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean coverage error over the window `[t - w + 1, t]` for one rate.
///
/// `errs[0]` is the error at time 1 and `t` is 1-based; positions before the
/// first observation are padded with err = 1.
pub fn running_error(errs: &[u8], t: usize, w: usize) -> Result<f64> {
    if w == 0 {
        return Err(Error::InvalidParameter("window size must be >= 1".into()));
    }
    if t > errs.len() {
        return Err(Error::InvalidInput(format!(
            "running error at t = {t} needs history through t, have {}",
            errs.len()
        )));
    }
    let mut sum = 0.0;
    for offset in 0..w {
        let time = t as i64 - offset as i64;
        sum += if time >= 1 {
            f64::from(errs[time as usize - 1])
        } else {
            1.0
        };
    }
    Ok(sum / w as f64)
}

/// Inverts the absolute-residual score bound into a target-space interval.
/// A negative quantile yields the explicit empty interval.
pub fn interval_from_quantile(y_hat: f64, q: f64) -> Interval {
    if q < 0.0 {
        Interval::Empty
    } else {
        Interval::Range { lo: y_hat - q, hi: y_hat + q }
    }
}

/// Distributional consistency check: intervals must be nested, wider for
/// smaller miscoverage rates.
pub fn is_consistent(intervals: &[Interval], ladder: &AlphaLadder) -> Result<bool> {
    if intervals.len() != ladder.len() {
        return Err(Error::InvalidInput(format!(
            "got {} intervals for a ladder of {} rates",
            intervals.len(),
            ladder.len()
        )));
    }
    Ok(intervals.windows(2).all(|w| w[0].nested_in(&w[1])))
}

/// Ascending rearrangement of per-rate quantiles so the largest quantile
/// attaches to the smallest rate. Idempotent and value-preserving; the
/// output always passes `is_consistent` after interval construction.
pub fn sort_ladder(q: &[f64], ladder: &AlphaLadder) -> Result<Vec<f64>> {
    if q.len() != ladder.len() {
        return Err(Error::InvalidInput(format!(
            "got {} quantiles for a ladder of {} rates",
            q.len(),
            ladder.len()
        )));
    }
    let mut sorted = q.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(sorted)
}
