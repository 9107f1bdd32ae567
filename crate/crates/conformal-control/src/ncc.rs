//! The neural conformal controller: control-inspired losses, the
//! conformalization step that carries the long-term coverage guarantee, a
//! test-time adaptation loop that repairs quantile crossing, the three-stage
//! training schedule, and the online retraining loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::controller::{drive, OnlineController, RunOutput};
use crate::core::{running_error, AlphaLadder, History, QuantileLadder, StepRecord};
use crate::error::{Error, Result};
use crate::forecasters::BaseForecaster;
use crate::neural::{self, EncoderConfig, PredictorInput};

/// Weights (λ_Q, λ_C, λ_E, λ_M) for the four training losses.
pub type LossWeights = [f64; 4];

/// Pinball objective Σ_α max((1-α)(s - q̂), (-α)(s - q̂)).
pub fn quantile_loss(s: f64, q_hat: &[f64], ladder: &AlphaLadder) -> Result<f64> {
    check_len(q_hat, ladder)?;
    let mut total = 0.0;
    for (&q, &alpha) in q_hat.iter().zip(ladder.iter()) {
        let z = s - q;
        total += ((1.0 - alpha) * z).max(-alpha * z);
    }
    Ok(total)
}

/// Whether the next interval must cover: 1 when the running error exceeds
/// the target rate, 0 otherwise (boundary counts as calibrated).
pub fn cov_indicator(running_err: f64, alpha: f64) -> u8 {
    u8::from(running_err > alpha)
}

const SOFT_ERR_EPS: f64 = 1e-7;

/// Log-loss between the relaxed error and the coverage label, summed over
/// rates; the relaxed errors are clamped into [ε, 1-ε] first.
pub fn coverage_loss(soft_errs: &[f64], covs: &[u8]) -> Result<f64> {
    if soft_errs.len() != covs.len() {
        return Err(Error::InvalidInput(format!(
            "coverage loss got {} soft errors but {} labels",
            soft_errs.len(),
            covs.len()
        )));
    }
    let mut total = 0.0;
    for (&se, &cov) in soft_errs.iter().zip(covs) {
        let se = se.clamp(SOFT_ERR_EPS, 1.0 - SOFT_ERR_EPS);
        total += -(1.0 - f64::from(cov)) * se.ln() - f64::from(cov) * (1.0 - se).ln();
    }
    Ok(total)
}

/// Width regulariser Σ_α (s - q̂)² (1 - soft_err): full penalty under deep
/// coverage, vanishing on misses.
pub fn efficiency_loss(s: f64, q_hat: &[f64], soft_errs: &[f64]) -> Result<f64> {
    if q_hat.len() != soft_errs.len() {
        return Err(Error::InvalidInput(format!(
            "efficiency loss got {} quantiles but {} soft errors",
            q_hat.len(),
            soft_errs.len()
        )));
    }
    let mut total = 0.0;
    for (&q, &se) in q_hat.iter().zip(soft_errs) {
        let z = s - q;
        total += z * z * (1.0 - se);
    }
    Ok(total)
}

/// Finite-difference monotonicity penalty
/// Σ_i max(0, (q̂_{i+1} - q̂_i) / (α_{i+1} - α_i)); zero for n < 2.
pub fn monotonicity_loss(q_hat: &[f64], ladder: &AlphaLadder) -> Result<f64> {
    check_len(q_hat, ladder)?;
    if q_hat.len() < 2 {
        return Ok(0.0);
    }
    let alphas = ladder.alphas();
    let mut total = 0.0;
    for i in 0..q_hat.len() - 1 {
        let quot = (q_hat[i + 1] - q_hat[i]) / (alphas[i + 1] - alphas[i]);
        total += quot.max(0.0);
    }
    Ok(total)
}

/// λ_Q L_Q + λ_C L_C + λ_E L_E + λ_M L_M.
pub fn total_loss(components: [f64; 4], lambdas: LossWeights) -> f64 {
    components.iter().zip(&lambdas).map(|(c, l)| c * l).sum()
}

fn check_len(q: &[f64], ladder: &AlphaLadder) -> Result<()> {
    if q.len() != ladder.len() {
        return Err(Error::InvalidInput(format!(
            "got {} quantiles for a ladder of {} rates",
            q.len(),
            ladder.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tape-level loss builders (mirror the value-level definitions exactly).
// ---------------------------------------------------------------------------

/// s - q̂ as a tape node.
fn residual_node(tape: &mut Tape, q_hat: Var, s: f64) -> Var {
    let neg = tape.neg(q_hat);
    tape.add_scalar(neg, s)
}

pub fn quantile_loss_node(tape: &mut Tape, q_hat: Var, s: f64, ladder: &AlphaLadder) -> Result<Var> {
    let z = residual_node(tape, q_hat, s);
    let hi: Vec<f64> = ladder.iter().map(|a| 1.0 - a).collect();
    let lo: Vec<f64> = ladder.iter().map(|a| -a).collect();
    let hi_c = tape.leaf(Tensor::vector(hi));
    let lo_c = tape.leaf(Tensor::vector(lo));
    let a = tape.mul(hi_c, z)?;
    let b = tape.mul(lo_c, z)?;
    let m = tape.maximum(a, b)?;
    Ok(tape.sum(m))
}

/// sigmoid((s - q̂)/K) as a tape node.
pub fn soft_error_node(tape: &mut Tape, q_hat: Var, s: f64, k: f64) -> Result<Var> {
    if !(k > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigmoid temperature must be positive, got {k}"
        )));
    }
    let z = residual_node(tape, q_hat, s);
    let scaled = tape.scale(z, 1.0 / k);
    Ok(tape.sigmoid(scaled))
}

pub fn coverage_loss_node(
    tape: &mut Tape,
    q_hat: Var,
    s: f64,
    k: f64,
    covs: &[u8],
) -> Result<Var> {
    let n = covs.len();
    let se = soft_error_node(tape, q_hat, s, k)?;
    let lo = tape.leaf(Tensor::vector(vec![SOFT_ERR_EPS; n]));
    let hi = tape.leaf(Tensor::vector(vec![1.0 - SOFT_ERR_EPS; n]));
    let floored = tape.maximum(se, lo)?;
    let clamped = tape.minimum(floored, hi)?;
    let log_se = tape.log(clamped);
    let neg_se = tape.neg(clamped);
    let one_minus = tape.add_scalar(neg_se, 1.0);
    let log_om = tape.log(one_minus);
    let c_miss: Vec<f64> = covs.iter().map(|&c| 1.0 - f64::from(c)).collect();
    let c_cover: Vec<f64> = covs.iter().map(|&c| f64::from(c)).collect();
    let miss_c = tape.leaf(Tensor::vector(c_miss));
    let cover_c = tape.leaf(Tensor::vector(c_cover));
    let a = tape.mul(miss_c, log_se)?;
    let b = tape.mul(cover_c, log_om)?;
    let total = tape.add(a, b)?;
    let neg = tape.neg(total);
    Ok(tape.sum(neg))
}

pub fn efficiency_loss_node(tape: &mut Tape, q_hat: Var, s: f64, k: f64) -> Result<Var> {
    let z = residual_node(tape, q_hat, s);
    let sq = tape.square(z);
    let se = soft_error_node(tape, q_hat, s, k)?;
    let neg_se = tape.neg(se);
    let weight = tape.add_scalar(neg_se, 1.0);
    let prod = tape.mul(sq, weight)?;
    Ok(tape.sum(prod))
}

pub fn monotonicity_loss_node(tape: &mut Tape, q_hat: Var, ladder: &AlphaLadder) -> Result<Var> {
    let n = ladder.len();
    if n < 2 {
        return Ok(tape.scalar(0.0));
    }
    let upper = tape.slice(q_hat, 1, n)?;
    let lower = tape.slice(q_hat, 0, n - 1)?;
    let diff = tape.sub(upper, lower)?;
    let inv: Vec<f64> = ladder
        .alphas()
        .windows(2)
        .map(|w| 1.0 / (w[1] - w[0]))
        .collect();
    let inv_c = tape.leaf(Tensor::vector(inv));
    let quot = tape.mul(diff, inv_c)?;
    let r = tape.relu(quot);
    Ok(tape.sum(r))
}

/// Builds the weighted total loss for one (q̂, target score) pair.
pub fn total_loss_node(
    tape: &mut Tape,
    q_hat: Var,
    s: f64,
    k: f64,
    covs: &[u8],
    ladder: &AlphaLadder,
    lambdas: LossWeights,
) -> Result<Var> {
    let mut terms = Vec::new();
    if lambdas[0] != 0.0 {
        let l = quantile_loss_node(tape, q_hat, s, ladder)?;
        terms.push(tape.scale(l, lambdas[0]));
    }
    if lambdas[1] != 0.0 {
        let l = coverage_loss_node(tape, q_hat, s, k, covs)?;
        terms.push(tape.scale(l, lambdas[1]));
    }
    if lambdas[2] != 0.0 {
        let l = efficiency_loss_node(tape, q_hat, s, k)?;
        terms.push(tape.scale(l, lambdas[2]));
    }
    if lambdas[3] != 0.0 {
        let l = monotonicity_loss_node(tape, q_hat, ladder)?;
        terms.push(tape.scale(l, lambdas[3]));
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => tape.scalar(0.0),
    };
    for &t in terms.iter().skip(1) {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Conformalization.
// ---------------------------------------------------------------------------

/// Conformalization step: per rate, Δq̃ += η (running_err - α) and
/// q̂ = q̃ + Δq̃. Mutates `delta` in place and returns the emitted ladder.
pub fn conformalize(
    q_raw: &[f64],
    delta: &mut [f64],
    eta: f64,
    running_errs: &[f64],
    ladder: &AlphaLadder,
) -> Result<QuantileLadder> {
    check_len(q_raw, ladder)?;
    if delta.len() != ladder.len() || running_errs.len() != ladder.len() {
        return Err(Error::InvalidInput("conformalize length mismatch".into()));
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "conformalization learning rate must be positive, got {eta}"
        )));
    }
    for i in 0..ladder.len() {
        delta[i] += eta * (running_errs[i] - ladder.get(i));
    }
    QuantileLadder::conformalized(q_raw.to_vec(), delta.to_vec())
}

// ---------------------------------------------------------------------------
// Test-time adaptation.
// ---------------------------------------------------------------------------

/// How the per-rate adjustment h is parameterised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TtaMode {
    /// h = MLP(combined embedding); the default.
    Mlp,
    /// h is a free learnable vector.
    FreeVector,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TtaConfig {
    pub max_iters: usize,
    /// Gradient step size; `None` resolves to 0.01 x score scale.
    pub step: Option<f64>,
    /// Per-step consistency target; 1.0 demands a fully monotone ladder.
    pub dcs_threshold: f64,
    pub mode: TtaMode,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self { max_iters: 50, step: None, dcs_threshold: 1.0, mode: TtaMode::Mlp }
    }
}

/// Result of one adaptation pass.
#[derive(Debug, Clone)]
pub struct TtaOutcome {
    pub ladder: QuantileLadder,
    pub iters: u32,
    /// False when the iteration cap was reached before the ladder became
    /// monotone; the best candidate seen is returned regardless.
    pub complete: bool,
}

const TTA_HIDDEN: usize = 16;

/// Registers the auxiliary adaptation parameters. The output layer starts
/// at zero so the initial adjustment is exactly h = 0.
pub fn init_tta_params(
    mode: TtaMode,
    emb_dim: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    match mode {
        TtaMode::Mlp => {
            store.insert("tta.w1", neural::xavier_tensor(rng, TTA_HIDDEN, emb_dim))?;
            store.insert("tta.b1", Tensor::zeros(vec![TTA_HIDDEN]))?;
            store.insert("tta.w2", Tensor::zeros(vec![n, TTA_HIDDEN]))?;
            store.insert("tta.b2", Tensor::zeros(vec![n]))?;
        }
        TtaMode::FreeVector => {
            store.insert("tta.h", Tensor::zeros(vec![n]))?;
        }
    }
    Ok(store)
}

fn tta_h_node(tape: &mut Tape, aux: &ParamStore, mode: TtaMode, embedding: &[f64]) -> Result<Var> {
    match mode {
        TtaMode::Mlp => {
            let w1 = tape.param(aux, "tta.w1")?;
            let b1 = tape.param(aux, "tta.b1")?;
            let w2 = tape.param(aux, "tta.w2")?;
            let b2 = tape.param(aux, "tta.b2")?;
            let emb = tape.leaf(Tensor::vector(embedding.to_vec()));
            let pre = tape.matmul(w1, emb)?;
            let biased = tape.add(pre, b1)?;
            let hid = tape.tanh(biased);
            let out = tape.matmul(w2, hid)?;
            tape.add(out, b2)
        }
        TtaMode::FreeVector => tape.param(aux, "tta.h"),
    }
}

fn is_monotone(q: &[f64]) -> bool {
    q.windows(2).all(|w| w[0] <= w[1])
}

/// Inference-time repair of quantile crossing: gradient steps on the
/// auxiliary parameters minimise the monotonicity loss of
/// q̃ + h + Δq̃ until the ladder is monotone or the cap is reached. The main
/// predictor parameters are never touched.
///
/// The adaptation is per step: the output layer (or free vector) restarts
/// at zero on every call, so h never accumulates across time and the
/// adjustment stays the minimal repair for the current ladder.
pub fn tta_adjust(
    q_raw: &[f64],
    delta: &[f64],
    embedding: &[f64],
    aux: &mut ParamStore,
    cfg: &TtaConfig,
    step: f64,
    ladder: &AlphaLadder,
) -> Result<TtaOutcome> {
    check_len(q_raw, ladder)?;
    match cfg.mode {
        TtaMode::Mlp => {
            for name in ["tta.w2", "tta.b2"] {
                aux.get_mut(name)?.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        TtaMode::FreeVector => {
            aux.get_mut("tta.h")?.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let base: Vec<f64> = q_raw.iter().zip(delta).map(|(q, d)| q + d).collect();

    let candidate = |tape_aux: &ParamStore| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let h = tta_h_node(&mut tape, tape_aux, cfg.mode, embedding)?;
        Ok(tape
            .value(h)
            .data()
            .iter()
            .zip(&base)
            .map(|(h_i, b)| h_i + b)
            .collect())
    };

    let accepts = |q: &[f64]| -> bool {
        let indicator = if is_monotone(q) { 1.0 } else { 0.0 };
        indicator >= cfg.dcs_threshold
    };

    let mut current = candidate(aux)?;
    let mut best = current.clone();
    let mut best_loss = monotonicity_loss(&current, ladder)?;
    let mut iters = 0u32;
    while !accepts(&current) && (iters as usize) < cfg.max_iters {
        let mut tape = Tape::new();
        let h = tta_h_node(&mut tape, aux, cfg.mode, embedding)?;
        let base_c = tape.leaf(Tensor::vector(base.clone()));
        let q_hat = tape.add(h, base_c)?;
        let loss = monotonicity_loss_node(&mut tape, q_hat, ladder)?;
        tape.backward(loss)?;
        tape.accumulate_param_grads(aux)?;
        aux.sgd_step(step)?;
        iters += 1;
        current = candidate(aux)?;
        let loss_now = monotonicity_loss(&current, ladder)?;
        if loss_now < best_loss {
            best_loss = loss_now;
            best = current.clone();
        }
    }
    let chosen = if accepts(&current) { current } else { best };
    let complete = accepts(&chosen);
    let out = QuantileLadder::new(q_raw.to_vec(), delta.to_vec(), chosen)?;
    Ok(TtaOutcome { ladder: out, iters, complete })
}

// ---------------------------------------------------------------------------
// Controller configuration and state.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NccConfig {
    pub alphas: AlphaLadder,
    pub tau: usize,
    /// Conformalization learning rate; `None` resolves to 0.1 x score scale.
    pub eta: Option<f64>,
    /// Running-error window w.
    pub window: usize,
    /// Sigmoid temperature K; `None` resolves to 0.05 x score scale.
    pub temperature: Option<f64>,
    pub lambdas: LossWeights,
    pub encoder: EncoderConfig,
    pub stages_initial: [usize; 3],
    pub stages_retrain: [usize; 3],
    /// Retrain every this many observations; `None` disables retraining.
    pub retrain_interval: Option<usize>,
    /// Training examples drawn per epoch.
    pub batch_cap: usize,
    pub lr: f64,
    pub tta: TtaConfig,
    pub seed: u64,
    /// Score scale; `None` estimates the warmup median at activation.
    pub score_scale: Option<f64>,
    /// Fixed static features beyond the horizon slot (region encoding ...).
    pub static_feats: Vec<f64>,
    /// Scale multipliers used when eta / temperature / tta step are `None`.
    pub eta_scale_factor: f64,
    pub temperature_scale_factor: f64,
    pub tta_step_scale_factor: f64,
}

impl NccConfig {
    pub fn new(alphas: AlphaLadder, tau: usize) -> Self {
        let n = alphas.len();
        Self {
            alphas,
            tau,
            eta: None,
            window: 10,
            temperature: None,
            lambdas: [1.0, 1.0, 0.1, 1.0],
            encoder: EncoderConfig::default_for(n),
            stages_initial: [100, 50, 50],
            stages_retrain: [10, 5, 5],
            retrain_interval: Some(5),
            batch_cap: 32,
            lr: 1e-2,
            tta: TtaConfig::default(),
            seed: 0,
            score_scale: None,
            static_feats: Vec::new(),
            eta_scale_factor: 0.1,
            temperature_scale_factor: 0.05,
            tta_step_scale_factor: 0.01,
        }
    }

    /// Attaches fixed static features (the horizon slot is always present).
    pub fn with_static_feats(mut self, feats: Vec<f64>) -> Self {
        self.encoder.static_dim = 1 + feats.len();
        self.static_feats = feats;
        self
    }

    /// Declares `k` exogenous sequence views beyond the target series.
    pub fn with_exo_views(mut self, k: usize) -> Self {
        self.encoder.seq_views = 1 + k;
        self
    }

    fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.tau == 0 {
            return Err(Error::InvalidParameter("forecast horizon must be >= 1".into()));
        }
        if self.window == 0 {
            return Err(Error::InvalidParameter("running-error window must be >= 1".into()));
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0) {
                return Err(Error::InvalidParameter(format!("eta must be positive, got {eta}")));
            }
        }
        if let Some(k) = self.temperature {
            if !(k > 0.0) {
                return Err(Error::InvalidParameter(format!("temperature must be positive, got {k}")));
            }
        }
        if self.encoder.ladder_len != self.alphas.len() {
            return Err(Error::InvalidParameter(format!(
                "encoder ladder length {} does not match {} rates",
                self.encoder.ladder_len,
                self.alphas.len()
            )));
        }
        if self.encoder.static_dim != 1 + self.static_feats.len() {
            return Err(Error::InvalidParameter(format!(
                "encoder static dim {} does not match 1 + {} static features",
                self.encoder.static_dim,
                self.static_feats.len()
            )));
        }
        if self.batch_cap == 0 {
            return Err(Error::InvalidParameter("batch cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scale-dependent hyperparameters, fixed at activation time.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ResolvedParams {
    scale: f64,
    eta: f64,
    temperature: f64,
    tta_step: f64,
}

/// Per-stage training losses on the deterministic evaluation subset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage_start: [f64; 3],
    pub stage_end: [f64; 3],
    /// True when stage 1 diverged and was rolled back to its best snapshot.
    pub stage1_restored: bool,
}

/// The neural conformal controller.
#[derive(Serialize, Deserialize)]
pub struct NccController {
    cfg: NccConfig,
    params: ParamStore,
    aux: ParamStore,
    delta: Vec<f64>,
    history: History,
    /// Absolute time of each resolved observation (warmup + records).
    obs_times: Vec<usize>,
    ys: Vec<f64>,
    scores: Vec<f64>,
    /// Per-record error rows and per-rate error columns (same data, both
    /// orientations are hot paths).
    errs_rows: Vec<Vec<u8>>,
    errs_cols: Vec<Vec<u8>>,
    q_conf_rows: Vec<Vec<f64>>,
    /// Exogenous view rows indexed by absolute time.
    exo: Vec<Vec<f64>>,
    resolved: Option<ResolvedParams>,
    emitted_initial: bool,
    observations: usize,
    rng: ChaCha8Rng,
    last_tta: Option<u32>,
    tta_incomplete: usize,
    /// Raw-protocol plumbing: forecast for the next observation and the
    /// ladder emitted for it.
    next_forecast: Option<f64>,
    pending_ladder: Option<QuantileLadder>,
}

impl NccController {
    pub fn new(cfg: NccConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = neural::init_params(&cfg.encoder, &mut rng)?;
        Self::assemble(cfg, params, rng)
    }

    /// Warm start from pretrained predictor parameters.
    pub fn with_params(cfg: NccConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // burn the draws the fresh-init path would consume, then reuse the
        // stream position for everything downstream
        let _ = neural::init_params(&cfg.encoder, &mut rng)?;
        Self::assemble(cfg, params, rng)
    }

    fn assemble(cfg: NccConfig, params: ParamStore, mut rng: ChaCha8Rng) -> Result<Self> {
        let n = cfg.alphas.len();
        let aux = init_tta_params(cfg.tta.mode, cfg.encoder.hidden, n, &mut rng)?;
        Ok(Self {
            delta: vec![0.0; n],
            history: History::new(),
            obs_times: Vec::new(),
            ys: Vec::new(),
            scores: Vec::new(),
            errs_rows: Vec::new(),
            errs_cols: vec![Vec::new(); n],
            q_conf_rows: Vec::new(),
            exo: Vec::new(),
            resolved: None,
            emitted_initial: false,
            observations: 0,
            rng,
            last_tta: None,
            tta_incomplete: 0,
            next_forecast: None,
            pending_ladder: None,
            cfg,
            params,
            aux,
        })
    }

    pub fn config(&self) -> &NccConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    /// Current conformalization adjustments Δq̃.
    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    /// Error column for one rate, in record order.
    pub fn err_column(&self, alpha_index: usize) -> &[u8] {
        &self.errs_cols[alpha_index]
    }

    /// The learning rate actually in effect (after scale resolution).
    pub fn eta_resolved(&self) -> Option<f64> {
        self.resolved.map(|r| r.eta)
    }

    pub fn score_scale_resolved(&self) -> Option<f64> {
        self.resolved.map(|r| r.scale)
    }

    /// Steps whose adaptation hit the iteration cap without full
    /// monotonicity.
    pub fn tta_incomplete_steps(&self) -> usize {
        self.tta_incomplete
    }

    fn ensure_resolved(&mut self) {
        if self.resolved.is_some() {
            return;
        }
        let scale = self.cfg.score_scale.unwrap_or_else(|| {
            let med = median(&self.scores);
            if med > 0.0 {
                med
            } else {
                1.0
            }
        });
        self.resolved = Some(ResolvedParams {
            scale,
            eta: self.cfg.eta.unwrap_or(self.cfg.eta_scale_factor * scale),
            temperature: self
                .cfg
                .temperature
                .unwrap_or(self.cfg.temperature_scale_factor * scale)
                .max(1e-12),
            tta_step: self
                .cfg
                .tta
                .step
                .unwrap_or(self.cfg.tta_step_scale_factor * scale)
                .max(1e-12),
        });
    }

    /// Running error per rate over the window ending at the latest resolved
    /// record (padding with err = 1 before the first record).
    fn running_errors(&self) -> Result<Vec<f64>> {
        let t = self.errs_rows.len();
        let mut out = Vec::with_capacity(self.cfg.alphas.len());
        for col in &self.errs_cols {
            out.push(running_error(col, t, self.cfg.window)?);
        }
        Ok(out)
    }

    /// Assembles the predictor input whose window ends just before timeline
    /// index `target`; `target == scores.len()` is the emit-time input.
    fn build_input_at(&self, target: usize) -> Result<PredictorInput> {
        let enc = &self.cfg.encoder;
        let window = enc.window;
        let n = enc.ladder_len;
        let scale = self.resolved.expect("resolved before building inputs").scale;
        let record_offset = self.scores.len() - self.errs_rows.len();

        let mut err_seq = Vec::with_capacity(window);
        let mut q_seq = Vec::with_capacity(window);
        let mut s_seq = Vec::with_capacity(window);
        let mut y_window = Vec::with_capacity(window);
        for offset in (1..=window).rev() {
            let j = target as i64 - offset as i64;
            if j < 0 {
                err_seq.push(vec![1.0; n]);
                q_seq.push(vec![0.0; n]);
                s_seq.push(vec![0.0]);
                y_window.push(None);
                continue;
            }
            let j = j as usize;
            if j >= self.scores.len() {
                return Err(Error::State(format!(
                    "input window requested future index {j} of {}",
                    self.scores.len()
                )));
            }
            s_seq.push(vec![self.scores[j] / scale]);
            y_window.push(Some(self.ys[j]));
            if j >= record_offset {
                let r = j - record_offset;
                err_seq.push(self.errs_rows[r].iter().map(|&e| f64::from(e)).collect());
                q_seq.push(self.q_conf_rows[r].iter().map(|&q| q / scale).collect());
            } else {
                err_seq.push(vec![1.0; n]);
                q_seq.push(vec![0.0; n]);
            }
        }

        let mut views = Vec::with_capacity(enc.seq_views);
        views.push(zscore_window(&y_window));
        if enc.seq_views > 1 {
            // exogenous windows end at the absolute time of the last input row
            let last_abs = if target == 0 || self.obs_times.is_empty() {
                None
            } else {
                let idx = (target - 1).min(self.obs_times.len() - 1);
                Some(self.obs_times[idx])
            };
            for v in 0..enc.seq_views - 1 {
                let mut col = Vec::with_capacity(window);
                for offset in (1..=window).rev() {
                    let value = match last_abs {
                        Some(last) => {
                            let t = last as i64 - (offset as i64 - 1);
                            if t >= 0 && (t as usize) < self.exo.len() {
                                self.exo[t as usize].get(v).copied()
                            } else {
                                None
                            }
                        }
                        None => None,
                    };
                    col.push(value);
                }
                views.push(zscore_window(&col));
            }
        }

        let mut static_feats = Vec::with_capacity(enc.static_dim);
        static_feats.push(self.cfg.tau as f64 / 10.0);
        static_feats.extend_from_slice(&self.cfg.static_feats);

        Ok(PredictorInput { err_seq, q_seq, s_seq, views, static_feats })
    }

    fn emit_inner(&mut self) -> Result<QuantileLadder> {
        self.ensure_resolved();
        let resolved = self.resolved.expect("just resolved");
        let input = self.build_input_at(self.scores.len())?;
        let (q_net, embedding) = neural::predictor_values(&self.params, &self.cfg.encoder, &input)?;
        let q_raw: Vec<f64> = q_net.iter().map(|q| q * resolved.scale).collect();

        let ladder = if !self.emitted_initial {
            // Algorithm line 1: the first ladder carries Δq̃ = 0 exactly
            self.emitted_initial = true;
            QuantileLadder::conformalized(q_raw, self.delta.clone())?
        } else {
            let running = self.running_errors()?;
            conformalize(&q_raw, &mut self.delta, resolved.eta, &running, &self.cfg.alphas)?
        };

        if self.cfg.tta.max_iters > 0 {
            let outcome = tta_adjust(
                &ladder.q_raw,
                &ladder.delta,
                &embedding.combined,
                &mut self.aux,
                &self.cfg.tta,
                resolved.tta_step,
                &self.cfg.alphas,
            )?;
            self.last_tta = Some(outcome.iters);
            if !outcome.complete {
                self.tta_incomplete += 1;
            }
            Ok(outcome.ladder)
        } else {
            self.last_tta = Some(0);
            Ok(ladder)
        }
    }

    fn observe_record(&mut self, record: &StepRecord) -> Result<()> {
        self.history.push(record.clone())?;
        self.obs_times.push(record.t);
        self.ys.push(record.y);
        self.scores.push(record.s);
        self.errs_rows.push(record.errs.clone());
        for (col, &e) in self.errs_cols.iter_mut().zip(&record.errs) {
            col.push(e);
        }
        self.q_conf_rows.push(record.ladder.q_conf.clone());
        self.observations += 1;
        if let Some(interval) = self.cfg.retrain_interval {
            if interval > 0
                && self.observations % interval == 0
                && self.scores.len() >= self.cfg.encoder.window + 1
            {
                self.train(self.cfg.stages_retrain)?;
            }
        }
        Ok(())
    }

    /// Stores the base forecast for the next unobserved step (raw protocol).
    pub fn push_forecast(&mut self, y_hat: f64) {
        self.next_forecast = Some(y_hat);
    }

    /// One full online step of the raw protocol: scores the arriving value
    /// against the stored forecast (resolving the pending ladder), appends
    /// the record, then conformalizes a fresh forward pass into the ladder
    /// for the next step.
    pub fn ncc_step(&mut self, y: f64) -> Result<(StepRecord, QuantileLadder)> {
        let y_hat = self.next_forecast.take().ok_or_else(|| {
            Error::PipelineOrder("ncc_step called without a stored base forecast".into())
        })?;
        if !self.emitted_initial {
            let first = self.emit_inner()?;
            self.pending_ladder = Some(first);
        }
        let ladder = self.pending_ladder.take().ok_or_else(|| {
            Error::PipelineOrder("no pending ladder for the arriving observation".into())
        })?;
        let t = self.obs_times.last().map_or(1, |&t| t + 1);
        let record = StepRecord::resolve(t, y, y_hat, self.cfg.tau, ladder)?;
        self.observe_record(&record)?;
        let next = self.emit_inner()?;
        self.pending_ladder = Some(next.clone());
        Ok((record, next))
    }

    /// Three-stage training over sliding windows of the accumulated
    /// timeline: stage 1 uses the quantile loss alone, stage 2 adds the
    /// coverage and efficiency losses, stage 3 all four.
    pub fn train(&mut self, stages: [usize; 3]) -> Result<TrainReport> {
        self.ensure_resolved();
        let window = self.cfg.encoder.window;
        let m = self.scores.len();
        if m < window + 1 {
            return Err(Error::InsufficientData(format!(
                "training needs at least {} resolved steps, got {m}",
                window + 1
            )));
        }
        let targets: Vec<usize> = (window..m).collect();
        let eval_set = spaced_subset(&targets, 64);
        let l = self.cfg.lambdas;
        let stage_lambdas = [
            [l[0], 0.0, 0.0, 0.0],
            [l[0], l[1], l[2], 0.0],
            [l[0], l[1], l[2], l[3]],
        ];
        let mut report = TrainReport::default();
        for (stage, (&epochs, lambdas)) in stages.iter().zip(stage_lambdas).enumerate() {
            report.stage_start[stage] = self.eval_loss(&eval_set, lambdas)?;
            if epochs == 0 {
                report.stage_end[stage] = report.stage_start[stage];
                continue;
            }
            let snapshot = if stage == 0 { Some(self.params.clone()) } else { None };
            let mut best: Option<(f64, ParamStore)> = None;
            for _ in 0..epochs {
                let batch: Vec<usize> = if targets.len() <= self.cfg.batch_cap {
                    targets.clone()
                } else {
                    (0..self.cfg.batch_cap)
                        .map(|_| targets[self.rng.random_range(0..targets.len())])
                        .collect()
                };
                self.train_batch(&batch, lambdas)?;
                if stage == 0 {
                    let loss = self.eval_loss(&eval_set, lambdas)?;
                    if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                        best = Some((loss, self.params.clone()));
                    }
                }
            }
            let mut end = self.eval_loss(&eval_set, lambdas)?;
            if stage == 0 && end > report.stage_start[0] {
                // non-divergence guard: fall back to the best snapshot seen
                let (best_loss, best_params) = best.unwrap_or((
                    report.stage_start[0],
                    snapshot.clone().expect("stage-0 snapshot"),
                ));
                if best_loss <= report.stage_start[0] {
                    self.params = best_params;
                    end = best_loss;
                } else {
                    self.params = snapshot.expect("stage-0 snapshot");
                    end = report.stage_start[0];
                }
                report.stage1_restored = true;
            }
            report.stage_end[stage] = end;
        }
        Ok(report)
    }

    fn example_loss_node(
        &self,
        tape: &mut Tape,
        target: usize,
        lambdas: LossWeights,
    ) -> Result<Var> {
        let resolved = self.resolved.expect("resolved before training");
        let input = self.build_input_at(target)?;
        let (q_net, _) = neural::predictor_forward(tape, &self.params, &self.cfg.encoder, &input)?;
        let q_raw = tape.scale(q_net, resolved.scale);
        let record_offset = self.scores.len() - self.errs_rows.len();
        let delta = if target >= record_offset {
            self.history.records()[target - record_offset].ladder.delta.clone()
        } else {
            vec![0.0; self.cfg.alphas.len()]
        };
        let delta_c = tape.leaf(Tensor::vector(delta));
        let q_hat = tape.add(q_raw, delta_c)?;
        let s = self.scores[target];
        let covs = self.cov_labels_before(target)?;
        total_loss_node(
            tape,
            q_hat,
            s,
            resolved.temperature,
            &covs,
            &self.cfg.alphas,
            lambdas,
        )
    }

    /// Coverage labels from the running errors over records strictly before
    /// timeline index `target`.
    fn cov_labels_before(&self, target: usize) -> Result<Vec<u8>> {
        let record_offset = self.scores.len() - self.errs_rows.len();
        let t_rec = target.saturating_sub(record_offset);
        let mut covs = Vec::with_capacity(self.cfg.alphas.len());
        for (i, col) in self.errs_cols.iter().enumerate() {
            let r = running_error(&col[..t_rec.min(col.len())], t_rec.min(col.len()), self.cfg.window)?;
            covs.push(cov_indicator(r, self.cfg.alphas.get(i)));
        }
        Ok(covs)
    }

    fn train_batch(&mut self, batch: &[usize], lambdas: LossWeights) -> Result<()> {
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(batch.len());
        for &target in batch {
            losses.push(self.example_loss_node(&mut tape, target, lambdas)?);
        }
        let stacked = tape.concat(&losses)?;
        let loss = tape.mean(stacked);
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut self.params)?;
        self.params.adam_step(self.cfg.lr, (0.9, 0.999), 1e-8)?;
        Ok(())
    }

    fn eval_loss(&self, targets: &[usize], lambdas: LossWeights) -> Result<f64> {
        let mut total = 0.0;
        for &target in targets {
            let mut tape = Tape::new();
            let node = self.example_loss_node(&mut tape, target, lambdas)?;
            total += tape.value(node).item();
        }
        Ok(total / targets.len().max(1) as f64)
    }
}

impl OnlineController for NccController {
    fn name(&self) -> &'static str {
        "ncc"
    }

    fn alphas(&self) -> &AlphaLadder {
        &self.cfg.alphas
    }

    fn observe_warmup(&mut self, t: usize, y: f64, _y_hat: f64, s: f64) {
        self.obs_times.push(t);
        self.ys.push(y);
        self.scores.push(s);
    }

    fn push_exogenous(&mut self, t: usize, views: &[f64]) {
        if self.exo.len() == t {
            self.exo.push(views.to_vec());
        } else if t < self.exo.len() {
            self.exo[t] = views.to_vec();
        } else {
            self.exo.resize(t, vec![0.0; views.len()]);
            self.exo.push(views.to_vec());
        }
    }

    fn activate(&mut self) -> Result<()> {
        self.ensure_resolved();
        if self.cfg.stages_initial.iter().any(|&e| e > 0) {
            self.train(self.cfg.stages_initial)?;
        }
        Ok(())
    }

    fn emit(&mut self) -> Result<QuantileLadder> {
        self.emit_inner()
    }

    fn observe(&mut self, record: &StepRecord) -> Result<()> {
        // warmup observe() calls carry times assigned by the driver; track
        // them so exogenous windows stay aligned
        self.observe_record(record)
    }

    fn last_tta_iters(&self) -> Option<u32> {
        self.last_tta
    }
}

/// Runs the full online protocol with an NCC controller: warmup feeds
/// calibration, activation trains the predictor, and every observed step
/// conformalizes a fresh forward pass (retraining on the configured
/// cadence).
pub fn online_run(
    series: &[f64],
    views: &[Vec<f64>],
    forecaster: &mut dyn BaseForecaster,
    controller: &mut NccController,
    warmup: usize,
) -> Result<RunOutput> {
    let tau = controller.cfg.tau;
    drive(series, views, forecaster, controller, warmup, tau)
}

// ---------------------------------------------------------------------------
// Multi-region pretraining (few-shot transfer).
// ---------------------------------------------------------------------------

/// Resolved warmup material for one source region.
#[derive(Debug, Clone)]
pub struct RegionSeries {
    pub ys: Vec<f64>,
    pub scores: Vec<f64>,
    /// Region encoding; must match the target config's static layout.
    pub static_feats: Vec<f64>,
}

/// Pretrains predictor parameters on pooled windows from several source
/// regions with the stage-1 (quantile) objective; error and quantile
/// channels stay at their padding values since no controller ran. The
/// returned store warm-starts a target-region controller.
pub fn pretrain(cfg: &NccConfig, regions: &[RegionSeries], epochs: usize) -> Result<ParamStore> {
    cfg.validate()?;
    let window = cfg.encoder.window;
    let n = cfg.alphas.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = neural::init_params(&cfg.encoder, &mut rng)?;

    struct Example {
        input: PredictorInput,
        s: f64,
    }
    let mut examples = Vec::new();
    let scale = cfg.score_scale.unwrap_or_else(|| {
        let all: Vec<f64> = regions.iter().flat_map(|r| r.scores.iter().copied()).collect();
        let med = median(&all);
        if med > 0.0 {
            med
        } else {
            1.0
        }
    });
    for region in regions {
        if region.ys.len() != region.scores.len() {
            return Err(Error::InvalidInput(
                "region series and scores must have equal length".into(),
            ));
        }
        if region.static_feats.len() + 1 != cfg.encoder.static_dim {
            return Err(Error::InvalidInput(format!(
                "region static features ({}) do not match the encoder layout",
                region.static_feats.len()
            )));
        }
        let m = region.scores.len();
        if m < window + 1 {
            continue;
        }
        for target in window..m {
            let mut err_seq = Vec::with_capacity(window);
            let mut q_seq = Vec::with_capacity(window);
            let mut s_seq = Vec::with_capacity(window);
            let mut y_window = Vec::with_capacity(window);
            for j in target - window..target {
                err_seq.push(vec![1.0; n]);
                q_seq.push(vec![0.0; n]);
                s_seq.push(vec![region.scores[j] / scale]);
                y_window.push(Some(region.ys[j]));
            }
            let mut views = vec![zscore_window(&y_window)];
            views.extend(std::iter::repeat_n(
                vec![vec![0.0]; window],
                cfg.encoder.seq_views.saturating_sub(1),
            ));
            let mut static_feats = vec![cfg.tau as f64 / 10.0];
            static_feats.extend_from_slice(&region.static_feats);
            examples.push(Example {
                input: PredictorInput { err_seq, q_seq, s_seq, views, static_feats },
                s: region.scores[target],
            });
        }
    }
    if examples.is_empty() {
        return Err(Error::InsufficientData(
            "pretraining needs at least one full window across the regions".into(),
        ));
    }

    let lambda_q = cfg.lambdas[0].max(1e-12);
    for _ in 0..epochs {
        let batch: Vec<usize> = if examples.len() <= cfg.batch_cap {
            (0..examples.len()).collect()
        } else {
            (0..cfg.batch_cap).map(|_| rng.random_range(0..examples.len())).collect()
        };
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &batch {
            let ex = &examples[i];
            let (q_net, _) = neural::predictor_forward(&mut tape, &params, &cfg.encoder, &ex.input)?;
            let q_raw = tape.scale(q_net, scale);
            let l = quantile_loss_node(&mut tape, q_raw, ex.s, &cfg.alphas)?;
            losses.push(tape.scale(l, lambda_q));
        }
        let stacked = tape.concat(&losses)?;
        let loss = tape.mean(stacked);
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut params)?;
        params.adam_step(cfg.lr, (0.9, 0.999), 1e-8)?;
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Helpers.
// ---------------------------------------------------------------------------

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    }
}

/// Z-scores a window in which `None` marks padding (kept at zero).
fn zscore_window(window: &[Option<f64>]) -> Vec<Vec<f64>> {
    let present: Vec<f64> = window.iter().flatten().copied().collect();
    if present.is_empty() {
        return window.iter().map(|_| vec![0.0]).collect();
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let var = present.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / present.len() as f64;
    let std = var.sqrt().max(1e-9);
    window
        .iter()
        .map(|v| vec![v.map_or(0.0, |x| (x - mean) / std)])
        .collect()
}

fn spaced_subset(targets: &[usize], cap: usize) -> Vec<usize> {
    if targets.len() <= cap {
        return targets.to_vec();
    }
    let stride = targets.len() as f64 / cap as f64;
    (0..cap).map(|i| targets[(i as f64 * stride) as usize]).collect()
}
