//! Base point forecasters whose residuals feed the conformal layer: AR(p)
//! least squares, the Theta method, a small GRU sequence model, and a loader
//! for externally produced predictions.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::neural;

/// A point forecaster driven causally: `forecast` sees the series strictly
/// through the present and predicts `tau` steps ahead. `None` means the
/// model cannot fit yet (history too short), which is only tolerated during
/// warmup.
pub trait BaseForecaster {
    fn name(&self) -> &'static str;
    fn forecast(&mut self, history: &[f64], tau: usize) -> Result<Option<f64>>;
}

/// Fitted AR(p) model: lag coefficients (most recent lag first) plus an
/// intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub coeffs: Vec<f64>,
    pub intercept: f64,
    pub p: usize,
}

/// Least-squares AR(p) fit with an optional ridge penalty on the lag
/// coefficients (never the intercept). The normal equations are solved by
/// SVD, so exactly collinear designs (constant series, pure ramps) fall
/// back to the minimum-norm solution instead of failing.
pub fn fit_ar(y: &[f64], p: usize, ridge: f64) -> Result<ArModel> {
    if p == 0 {
        return Err(Error::InvalidParameter("ar order must be >= 1".into()));
    }
    if ridge < 0.0 {
        return Err(Error::InvalidParameter(format!("ridge must be >= 0, got {ridge}")));
    }
    if y.len() < p + 2 {
        return Err(Error::InsufficientData(format!(
            "ar({p}) fit needs at least {} points, got {}",
            p + 2,
            y.len()
        )));
    }
    let mut acc = ArNormalEquations::new(p, ridge);
    for i in p..y.len() {
        acc.push_row(&y[i - p..i], y[i]);
    }
    acc.solve()
}

/// Incrementally accumulated normal equations for the AR design; row order
/// is fixed by time, so truncated replays are bit-identical.
#[derive(Debug, Clone)]
struct ArNormalEquations {
    p: usize,
    ridge: f64,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    rows: usize,
}

impl ArNormalEquations {
    fn new(p: usize, ridge: f64) -> Self {
        Self {
            p,
            ridge,
            xtx: DMatrix::zeros(p + 1, p + 1),
            xty: DVector::zeros(p + 1),
            rows: 0,
        }
    }

    /// `lags` are y[i-p..i] in time order; the feature vector puts the most
    /// recent lag first and the intercept last.
    fn push_row(&mut self, lags: &[f64], target: f64) {
        debug_assert_eq!(lags.len(), self.p);
        let d = self.p + 1;
        let mut x = vec![0.0; d];
        for j in 0..self.p {
            x[j] = lags[self.p - 1 - j];
        }
        x[self.p] = 1.0;
        for a in 0..d {
            for b in 0..d {
                self.xtx[(a, b)] += x[a] * x[b];
            }
            self.xty[a] += x[a] * target;
        }
        self.rows += 1;
    }

    fn solve(&self) -> Result<ArModel> {
        if self.rows == 0 {
            return Err(Error::InsufficientData("ar fit saw no rows".into()));
        }
        let mut a = self.xtx.clone();
        for j in 0..self.p {
            a[(j, j)] += self.ridge;
        }
        let svd = a.svd(true, true);
        let beta = svd
            .solve(&self.xty, 1e-12)
            .map_err(|e| Error::State(format!("ar normal equations solve failed: {e}")))?;
        Ok(ArModel {
            coeffs: beta.iter().take(self.p).copied().collect(),
            intercept: beta[self.p],
            p: self.p,
        })
    }
}

/// Iterated multi-step AR forecast, feeding predictions back as inputs.
pub fn predict_ar(model: &ArModel, history: &[f64], tau: usize) -> Result<f64> {
    if tau == 0 {
        return Err(Error::InvalidParameter("forecast horizon must be >= 1".into()));
    }
    if history.len() < model.p {
        return Err(Error::InsufficientData(format!(
            "ar({}) prediction needs {} trailing points, got {}",
            model.p,
            model.p,
            history.len()
        )));
    }
    let mut window: Vec<f64> = history[history.len() - model.p..].to_vec();
    let mut value = 0.0;
    for _ in 0..tau {
        value = model.intercept;
        for (j, c) in model.coeffs.iter().enumerate() {
            value += c * window[model.p - 1 - j];
        }
        window.remove(0);
        window.push(value);
    }
    Ok(value)
}

/// Online AR forecaster: the normal equations grow one row per new
/// observation and are re-solved at each call.
#[derive(Debug, Clone)]
pub struct ArForecaster {
    acc: ArNormalEquations,
    seen: usize,
}

impl ArForecaster {
    pub fn new(p: usize, ridge: f64) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidParameter("ar order must be >= 1".into()));
        }
        if ridge < 0.0 {
            return Err(Error::InvalidParameter(format!("ridge must be >= 0, got {ridge}")));
        }
        Ok(Self { acc: ArNormalEquations::new(p, ridge), seen: 0 })
    }
}

impl BaseForecaster for ArForecaster {
    fn name(&self) -> &'static str {
        "ar"
    }

    fn forecast(&mut self, history: &[f64], tau: usize) -> Result<Option<f64>> {
        let p = self.acc.p;
        if history.len() < self.seen {
            return Err(Error::PipelineOrder("ar forecaster fed a shrinking history".into()));
        }
        let start = self.seen.max(p);
        for i in start..history.len() {
            self.acc.push_row(&history[i - p..i], history[i]);
        }
        self.seen = history.len();
        if self.acc.rows < 2 {
            return Ok(None);
        }
        let model = self.acc.solve()?;
        Ok(Some(predict_ar(&model, history, tau)?))
    }
}

/// Classical Theta forecast with θ = 2: the average of the linear-trend
/// extrapolation and simple exponential smoothing of the theta-line
/// 2y - trend, with the smoothing weight picked from a coarse grid by
/// in-sample one-step error.
pub fn theta_forecast(y: &[f64], tau: usize) -> Result<f64> {
    if tau == 0 {
        return Err(Error::InvalidParameter("forecast horizon must be >= 1".into()));
    }
    if y.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "theta forecast needs at least 3 points, got {}",
            y.len()
        )));
    }
    let n = y.len();
    // OLS of y on time
    let tbar = (n as f64 - 1.0) / 2.0;
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (i, &v) in y.iter().enumerate() {
        let dt = i as f64 - tbar;
        sxx += dt * dt;
        sxy += dt * (v - ybar);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = ybar - slope * tbar;

    let theta_line: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(i, &v)| 2.0 * v - (intercept + slope * i as f64))
        .collect();

    let mut best_level = theta_line[0];
    let mut best_sse = f64::INFINITY;
    for k in 1..=9 {
        let a = k as f64 / 10.0;
        let mut level = theta_line[0];
        let mut sse = 0.0;
        for &z in &theta_line[1..] {
            let e = z - level;
            sse += e * e;
            level = a * z + (1.0 - a) * level;
        }
        if sse < best_sse {
            best_sse = sse;
            best_level = level;
        }
    }

    let trend_part = intercept + slope * (n as f64 - 1.0 + tau as f64);
    Ok(0.5 * (trend_part + best_level))
}

/// Stateless wrapper around `theta_forecast`.
#[derive(Debug, Clone, Default)]
pub struct ThetaForecaster;

impl BaseForecaster for ThetaForecaster {
    fn name(&self) -> &'static str {
        "theta"
    }

    fn forecast(&mut self, history: &[f64], tau: usize) -> Result<Option<f64>> {
        if history.len() < 3 {
            return Ok(None);
        }
        Ok(Some(theta_forecast(history, tau)?))
    }
}

/// Externally produced point forecasts keyed by (issue time, horizon):
/// row `t,tau,y_hat` is the forecast issued at `t` for target `t + tau`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastBundle {
    forecasts: BTreeMap<(i64, i64), f64>,
    horizons: BTreeSet<i64>,
    pub model_id: String,
}

impl ForecastBundle {
    pub fn get(&self, t: i64, tau: i64) -> Option<f64> {
        self.forecasts.get(&(t, tau)).copied()
    }

    pub fn horizons(&self) -> impl Iterator<Item = i64> + '_ {
        self.horizons.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.forecasts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forecasts.is_empty()
    }
}

/// Parses an external-predictions CSV with header `t,tau,y_hat`.
///
/// Rows must be strictly increasing in (t, tau) — the order a causal
/// producer emits — with no duplicate keys, and every issue time must cover
/// the full horizon set observed in the file.
pub fn load_external(path: &Path) -> Result<ForecastBundle> {
    let file = std::fs::File::open(path)?;
    load_external_from(file, &path.display().to_string())
}

pub fn load_external_from<R: Read>(reader: R, label: &str) -> Result<ForecastBundle> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = csv_reader
            .headers()
            .map_err(|e| Error::DataFormat(format!("{label}: {e}")))?;
        let expect = ["t", "tau", "y_hat"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expect {
            return Err(Error::DataFormat(format!(
                "{label}: expected header t,tau,y_hat, got {}",
                got.join(",")
            )));
        }
    }
    let mut forecasts = BTreeMap::new();
    let mut horizons = BTreeSet::new();
    let mut last_key: Option<(i64, i64)> = None;
    for (idx, row) in csv_reader.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| Error::DataFormat(format!("{label}:{line}: {e}")))?;
        if row.len() != 3 {
            return Err(Error::DataFormat(format!(
                "{label}:{line}: expected 3 columns, got {}",
                row.len()
            )));
        }
        let t: i64 = row[0]
            .trim()
            .parse()
            .map_err(|_| Error::DataFormat(format!("{label}:{line}: column t is not an integer")))?;
        let tau: i64 = row[1].trim().parse().map_err(|_| {
            Error::DataFormat(format!("{label}:{line}: column tau is not an integer"))
        })?;
        let y_hat: f64 = row[2].trim().parse().map_err(|_| {
            Error::DataFormat(format!("{label}:{line}: column y_hat is not a number"))
        })?;
        if tau < 1 {
            return Err(Error::DataFormat(format!("{label}:{line}: horizon must be >= 1")));
        }
        if !y_hat.is_finite() {
            return Err(Error::DataFormat(format!("{label}:{line}: y_hat is not finite")));
        }
        let key = (t, tau);
        if forecasts.contains_key(&key) {
            return Err(Error::DataFormat(format!(
                "{label}:{line}: duplicate forecast for (t={t}, tau={tau})"
            )));
        }
        if let Some(prev) = last_key {
            if key <= prev {
                return Err(Error::DataFormat(format!(
                    "{label}:{line}: rows must be ordered by (t, tau); got (t={t}, tau={tau}) after (t={}, tau={})",
                    prev.0, prev.1
                )));
            }
        }
        last_key = Some(key);
        horizons.insert(tau);
        forecasts.insert(key, y_hat);
    }
    if forecasts.is_empty() {
        return Err(Error::EmptyInput(format!("{label}: no forecast rows")));
    }
    // every issue time must cover the full horizon set
    let issue_times: BTreeSet<i64> = forecasts.keys().map(|&(t, _)| t).collect();
    for &t in &issue_times {
        for &tau in &horizons {
            if !forecasts.contains_key(&(t, tau)) {
                return Err(Error::DataFormat(format!(
                    "{label}: missing horizon tau={tau} at t={t}"
                )));
            }
        }
    }
    Ok(ForecastBundle { forecasts, horizons, model_id: label.to_string() })
}

/// Serves a `ForecastBundle` through the causal forecaster interface; the
/// issue time is the index of the last observed point.
#[derive(Debug, Clone)]
pub struct ExternalForecaster {
    bundle: ForecastBundle,
}

impl ExternalForecaster {
    pub fn new(bundle: ForecastBundle) -> Self {
        Self { bundle }
    }
}

impl BaseForecaster for ExternalForecaster {
    fn name(&self) -> &'static str {
        "external"
    }

    fn forecast(&mut self, history: &[f64], tau: usize) -> Result<Option<f64>> {
        let t = history.len() as i64 - 1;
        Ok(self.bundle.get(t, tau as i64))
    }
}

/// Small GRU sequence forecaster: a window of z-scored values through a GRU
/// and a linear head, trained once by windowed backprop when enough history
/// has accumulated.
pub struct GruForecaster {
    window: usize,
    hidden: usize,
    epochs: usize,
    lr: f64,
    min_history: usize,
    seed: u64,
    params: Option<ParamStore>,
}

impl GruForecaster {
    pub fn new(window: usize, hidden: usize, epochs: usize, lr: f64, seed: u64) -> Result<Self> {
        if window == 0 || hidden == 0 {
            return Err(Error::InvalidParameter("gru window and hidden size must be >= 1".into()));
        }
        Ok(Self { window, hidden, epochs, lr, min_history: 2 * window + 2, seed, params: None })
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        neural::insert_gru_params(&mut store, rng, "gru", 1, self.hidden)?;
        store.insert("out.w", neural::xavier_tensor(rng, 1, self.hidden))?;
        store.insert("out.b", Tensor::zeros(vec![1]))?;
        Ok(store)
    }

    fn train(&mut self, history: &[f64]) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut store = self.init(&mut rng)?;
        let (mean, std) = moments(history);
        let targets: Vec<usize> = (self.window..history.len()).collect();
        for _ in 0..self.epochs {
            let mut tape = Tape::new();
            let mut losses = Vec::new();
            for &i in &targets {
                let rows: Vec<_> = history[i - self.window..i]
                    .iter()
                    .map(|&v| tape.leaf(Tensor::vector(vec![(v - mean) / std])))
                    .collect();
                let h = neural::gru_encode(&mut tape, &store, "gru", &rows)?;
                let w = tape.param(&store, "out.w")?;
                let b = tape.param(&store, "out.b")?;
                let wh = tape.matmul(w, h)?;
                let pred = tape.add(wh, b)?;
                let target = tape.leaf(Tensor::vector(vec![(history[i] - mean) / std]));
                let diff = tape.sub(pred, target)?;
                let sq = tape.square(diff);
                losses.push(tape.sum(sq));
            }
            let stacked = tape.concat(&losses)?;
            let loss = tape.mean(stacked);
            tape.backward(loss)?;
            tape.accumulate_param_grads(&mut store)?;
            store.adam_step(self.lr, (0.9, 0.999), 1e-8)?;
        }
        self.params = Some(store);
        Ok(())
    }

    fn predict_normed(&self, store: &ParamStore, window: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let rows: Vec<_> =
            window.iter().map(|&v| tape.leaf(Tensor::vector(vec![v]))).collect();
        let h = neural::gru_encode(&mut tape, store, "gru", &rows)?;
        let w = tape.param(store, "out.w")?;
        let b = tape.param(store, "out.b")?;
        let wh = tape.matmul(w, h)?;
        let pred = tape.add(wh, b)?;
        Ok(tape.value(pred).item())
    }
}

impl BaseForecaster for GruForecaster {
    fn name(&self) -> &'static str {
        "gru"
    }

    fn forecast(&mut self, history: &[f64], tau: usize) -> Result<Option<f64>> {
        if history.len() < self.min_history {
            return Ok(None);
        }
        if self.params.is_none() {
            self.train(history)?;
        }
        let store = self.params.as_ref().expect("trained above");
        let (mean, std) = moments(history);
        let mut window: Vec<f64> = history[history.len() - self.window..]
            .iter()
            .map(|&v| (v - mean) / std)
            .collect();
        let mut value = 0.0;
        for _ in 0..tau {
            value = self.predict_normed(store, &window)?;
            window.remove(0);
            window.push(value);
        }
        Ok(Some(value * std + mean))
    }
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-9))
}
