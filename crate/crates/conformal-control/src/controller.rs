//! The shared online interface every conformal controller implements, plus
//! the causal driver that advances a (series, forecaster, controller) cell
//! through the real-time forecasting protocol.

use std::collections::BTreeMap;

use crate::core::{nonconformity, AlphaLadder, QuantileLadder, StepRecord};
use crate::error::{Error, Result};
use crate::forecasters::BaseForecaster;

/// One conformal controller advancing strictly in time order.
///
/// Protocol: warmup scores arrive through `observe_warmup`, `activate` fires
/// once before the first `emit`, then `emit` (ladder for the next target)
/// and `observe` (resolved feedback for a previously emitted ladder)
/// alternate, one pair per time step.
pub trait OnlineController {
    fn name(&self) -> &'static str;

    fn alphas(&self) -> &AlphaLadder;

    /// Resolved warmup step at absolute time `t` (no ladder in effect yet).
    fn observe_warmup(&mut self, t: usize, y: f64, y_hat: f64, s: f64);

    /// Auxiliary view row for time `t`; controllers without view encoders
    /// ignore it.
    fn push_exogenous(&mut self, _t: usize, _views: &[f64]) {}

    /// Called once, after the last warmup observation and before the first
    /// emit (initial training happens here).
    fn activate(&mut self) -> Result<()> {
        Ok(())
    }

    /// Quantile ladder for the next target time step.
    fn emit(&mut self) -> Result<QuantileLadder>;

    /// Resolved feedback for a ladder this controller emitted.
    fn observe(&mut self, record: &StepRecord) -> Result<()>;

    /// Adaptation iterations spent on the most recent emit, when the
    /// controller runs test-time adaptation.
    fn last_tta_iters(&self) -> Option<u32> {
        None
    }
}

/// Output of one online run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<StepRecord>,
    /// Adaptation iterations for the ladder behind each record (None for
    /// controllers without TTA).
    pub tta_iters: Vec<Option<u32>>,
}

/// Drives the real-time protocol: at each time step the controller observes
/// the realized value (resolving the ladder emitted τ steps earlier), then
/// emits a ladder for t + τ against the base forecast made from data
/// through t. Forecasts for the warmup span feed calibration only.
///
/// Emits happen at t in `[warmup, n - τ)`, so the record stream has exactly
/// `n - warmup - τ` entries.
pub fn drive(
    series: &[f64],
    views: &[Vec<f64>],
    forecaster: &mut dyn BaseForecaster,
    controller: &mut dyn OnlineController,
    warmup: usize,
    tau: usize,
) -> Result<RunOutput> {
    let n = series.len();
    if tau == 0 {
        return Err(Error::InvalidParameter("forecast horizon must be >= 1".into()));
    }
    if warmup + tau >= n {
        return Err(Error::InsufficientData(format!(
            "series of length {n} cannot support warmup {warmup} plus horizon {tau}"
        )));
    }
    for (v, col) in views.iter().enumerate() {
        if col.len() != n {
            return Err(Error::InvalidInput(format!(
                "view {v} has {} rows, series has {n}",
                col.len()
            )));
        }
    }

    let mut pending_forecast: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pending_ladder: BTreeMap<usize, (QuantileLadder, Option<u32>)> = BTreeMap::new();
    let mut records = Vec::with_capacity(n - warmup - tau);
    let mut tta_iters = Vec::with_capacity(n - warmup - tau);
    let mut warmup_scores = 0usize;
    let mut row = vec![0.0; views.len()];

    for t in 0..n {
        for (v, col) in views.iter().enumerate() {
            row[v] = col[t];
        }
        controller.push_exogenous(t, &row);

        if t == warmup {
            if warmup_scores == 0 {
                return Err(Error::InsufficientCalibration(format!(
                    "no base forecast resolved during the {warmup}-step warmup"
                )));
            }
            controller.activate()?;
        }

        if let Some(y_hat) = pending_forecast.remove(&t) {
            if let Some((ladder, iters)) = pending_ladder.remove(&t) {
                let record = StepRecord::resolve(t, series[t], y_hat, tau, ladder)?;
                controller.observe(&record)?;
                tta_iters.push(iters);
                records.push(record);
            } else {
                let s = nonconformity(series[t], y_hat)?;
                controller.observe_warmup(t, series[t], y_hat, s);
                warmup_scores += 1;
            }
        }

        if t + tau < n {
            match forecaster.forecast(&series[..=t], tau)? {
                Some(y_hat) => {
                    pending_forecast.insert(t + tau, y_hat);
                    if t >= warmup {
                        let ladder = controller.emit()?;
                        pending_ladder.insert(t + tau, (ladder, controller.last_tta_iters()));
                    }
                }
                None if t >= warmup => {
                    return Err(Error::PipelineOrder(format!(
                        "base forecaster produced no forecast at t = {t} after warmup"
                    )));
                }
                None => {}
            }
        }
    }
    Ok(RunOutput { records, tta_iters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::SplitCpController;
    use crate::forecasters::ArForecaster;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_series(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn record_stream_length_matches_protocol() {
        let series = noise_series(200, 1);
        let ladder = AlphaLadder::new(vec![0.5, 0.1]).unwrap();
        let mut controller = SplitCpController::new(ladder);
        let mut forecaster = ArForecaster::new(2, 1e-3).unwrap();
        let out = drive(&series, &[], &mut forecaster, &mut controller, 50, 1).unwrap();
        assert_eq!(out.records.len(), 200 - 50 - 1);
        assert_eq!(out.records.first().unwrap().t, 51);
        assert_eq!(out.records.last().unwrap().t, 199);

        let mut forecaster3 = ArForecaster::new(2, 1e-3).unwrap();
        let mut controller3 = SplitCpController::new(AlphaLadder::new(vec![0.5]).unwrap());
        let out3 = drive(&series, &[], &mut forecaster3, &mut controller3, 50, 3).unwrap();
        assert_eq!(out3.records.len(), 200 - 50 - 3);
    }

    #[test]
    fn truncated_replay_reproduces_prefix() {
        let series = noise_series(300, 2);
        let ladder = AlphaLadder::new(vec![0.3, 0.1]).unwrap();
        let full = drive(
            &series,
            &[],
            &mut ArForecaster::new(3, 1e-3).unwrap(),
            &mut SplitCpController::new(ladder.clone()),
            60,
            1,
        )
        .unwrap();
        let cut = 200;
        let short = drive(
            &series[..cut],
            &[],
            &mut ArForecaster::new(3, 1e-3).unwrap(),
            &mut SplitCpController::new(ladder),
            60,
            1,
        )
        .unwrap();
        assert_eq!(short.records.len(), cut - 60 - 1);
        for (a, b) in short.records.iter().zip(&full.records) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_degenerate_setups() {
        let series = noise_series(20, 3);
        let ladder = AlphaLadder::new(vec![0.5]).unwrap();
        let mut c = SplitCpController::new(ladder.clone());
        let mut f = ArForecaster::new(2, 1e-3).unwrap();
        assert!(drive(&series, &[], &mut f, &mut c, 19, 1).is_err());
        let mut c2 = SplitCpController::new(ladder);
        let mut f2 = ArForecaster::new(2, 1e-3).unwrap();
        assert!(drive(&series, &[], &mut f2, &mut c2, 5, 0).is_err());
    }
}
