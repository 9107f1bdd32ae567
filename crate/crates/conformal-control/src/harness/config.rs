//! Experiment configuration: a single TOML file with typed values; no
//! environment variables take part, so a config plus a binary reproduces a
//! run exactly.
//!
//! ```toml
//! name = "demo"
//!
//! [dataset.synthetic]
//! kind = "ar-shift"
//! length = 2000
//! seed = 7
//! changepoints = [700, 1400]
//!
//! [run]
//! method = "ncc"            # ncc | aci | cpid | nexcp | splitcp
//! warmup = 100
//! seeds = [1, 2, 3, 4]
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::core::AlphaLadder;
use crate::error::{Error, Result};
use crate::ncc::TtaMode;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset label carried into results and report tables.
    pub name: String,
    pub dataset: DatasetConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub forecaster: ForecasterConfig,
    #[serde(default)]
    pub ncc: NccSection,
    #[serde(default)]
    pub aci: AciSection,
    #[serde(default)]
    pub cpid: CpidSection,
    #[serde(default)]
    pub nexcp: NexcpSection,
    #[serde(default)]
    pub splitcp: SplitcpSection,
    pub output: OutputConfig,
    #[serde(default)]
    pub transfer: Option<TransferConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// CSV path with header `t,y[,region][,view:<name>...]`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticRecipe>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    ArShift,
    SeasonalBurst,
    IidGauss,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRecipe {
    pub kind: SynthKind,
    pub length: usize,
    pub seed: u64,
    #[serde(default = "default_one")]
    pub regions: usize,
    /// Segment boundaries, strictly increasing, within [1, length).
    #[serde(default)]
    pub changepoints: Vec<usize>,
    /// Per-segment means/variances/AR coefficients; empty picks defaults.
    #[serde(default)]
    pub seg_mean: Vec<f64>,
    #[serde(default)]
    pub seg_var: Vec<f64>,
    #[serde(default)]
    pub seg_ar: Vec<f64>,
    /// Seasonal period (seasonal-burst only).
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Constant level offset between consecutive regions.
    #[serde(default = "default_region_spread")]
    pub region_spread: f64,
}

fn default_one() -> usize {
    1
}
fn default_period() -> usize {
    50
}
fn default_amplitude() -> f64 {
    2.0
}
fn default_region_spread() -> f64 {
    2.0
}

impl SyntheticRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::Config("synthetic length must be >= 2".into()));
        }
        if self.regions == 0 {
            return Err(Error::Config("synthetic regions must be >= 1".into()));
        }
        let mut prev = 0usize;
        for &cp in &self.changepoints {
            if cp <= prev || cp >= self.length {
                return Err(Error::Config(format!(
                    "changepoints must be strictly increasing within [1, {}), got {cp}",
                    self.length
                )));
            }
            prev = cp;
        }
        let segments = self.changepoints.len() + 1;
        for (name, v) in [("seg_mean", &self.seg_mean), ("seg_var", &self.seg_var), ("seg_ar", &self.seg_ar)] {
            if !v.is_empty() && v.len() != segments {
                return Err(Error::Config(format!(
                    "{name} must have one entry per segment ({segments}), got {}",
                    v.len()
                )));
            }
        }
        if self.seg_var.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("segment variances must be >= 0".into()));
        }
        if self.kind == SynthKind::SeasonalBurst && self.period == 0 {
            return Err(Error::Config("seasonal period must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Ncc,
    Aci,
    Cpid,
    Nexcp,
    Splitcp,
}

impl MethodName {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodName::Ncc => "ncc",
            MethodName::Aci => "aci",
            MethodName::Cpid => "cpid",
            MethodName::Nexcp => "nexcp",
            MethodName::Splitcp => "splitcp",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: MethodName,
    /// Miscoverage rates, strictly decreasing; defaults to the eleven-level
    /// ladder.
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    pub warmup: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_alphas() -> Vec<f64> {
    vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02]
}
fn default_horizons() -> Vec<usize> {
    vec![1]
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecasterKind {
    Ar,
    Theta,
    Gru,
    External,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecasterConfig {
    pub kind: ForecasterKind,
    #[serde(default = "default_ar_order")]
    pub ar_order: usize,
    #[serde(default = "default_ar_ridge")]
    pub ar_ridge: f64,
    /// Predictions CSV for `kind = "external"`.
    #[serde(default)]
    pub external_path: Option<PathBuf>,
    #[serde(default = "default_gru_window")]
    pub gru_window: usize,
    #[serde(default = "default_gru_hidden")]
    pub gru_hidden: usize,
    #[serde(default = "default_gru_epochs")]
    pub gru_epochs: usize,
    #[serde(default = "default_gru_lr")]
    pub gru_lr: f64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            kind: ForecasterKind::Ar,
            ar_order: default_ar_order(),
            ar_ridge: default_ar_ridge(),
            external_path: None,
            gru_window: default_gru_window(),
            gru_hidden: default_gru_hidden(),
            gru_epochs: default_gru_epochs(),
            gru_lr: default_gru_lr(),
        }
    }
}

fn default_ar_order() -> usize {
    8
}
fn default_ar_ridge() -> f64 {
    1e-3
}
fn default_gru_window() -> usize {
    16
}
fn default_gru_hidden() -> usize {
    16
}
fn default_gru_epochs() -> usize {
    60
}
fn default_gru_lr() -> f64 {
    1e-2
}

/// Neural controller knobs. Scale-relative values (`*_scale`) multiply the
/// warmup median score; absolute values win when both are set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NccSection {
    pub eta: Option<f64>,
    pub eta_scale: Option<f64>,
    pub window: usize,
    pub temperature: Option<f64>,
    pub temperature_scale: Option<f64>,
    pub lambdas: [f64; 4],
    pub hidden: usize,
    pub heads: usize,
    pub context_window: usize,
    pub head_hidden: usize,
    pub stages_initial: [usize; 3],
    pub stages_retrain: [usize; 3],
    pub retrain_interval: Option<usize>,
    pub batch_cap: usize,
    pub lr: f64,
    pub tta_max_iters: usize,
    pub tta_step: Option<f64>,
    pub tta_step_scale: Option<f64>,
    pub tta_dcs_threshold: f64,
    pub tta_mode: TtaModeName,
    /// Feed dataset view columns into the encoder.
    pub use_views: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TtaModeName {
    Mlp,
    FreeVector,
}

impl From<TtaModeName> for TtaMode {
    fn from(m: TtaModeName) -> Self {
        match m {
            TtaModeName::Mlp => TtaMode::Mlp,
            TtaModeName::FreeVector => TtaMode::FreeVector,
        }
    }
}

impl Default for NccSection {
    fn default() -> Self {
        Self {
            eta: None,
            eta_scale: None,
            window: 10,
            temperature: None,
            temperature_scale: None,
            lambdas: [1.0, 1.0, 0.1, 1.0],
            hidden: 32,
            heads: 4,
            context_window: 32,
            head_hidden: 64,
            stages_initial: [100, 50, 50],
            stages_retrain: [10, 5, 5],
            retrain_interval: Some(5),
            batch_cap: 32,
            lr: 1e-2,
            tta_max_iters: 50,
            tta_step: None,
            tta_step_scale: None,
            tta_dcs_threshold: 1.0,
            tta_mode: TtaModeName::Mlp,
            use_views: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AciSection {
    pub eta: f64,
}

impl Default for AciSection {
    fn default() -> Self {
        Self { eta: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpidSection {
    /// Absolute tracker step; `None` resolves to eta_scale x warmup median.
    pub eta: Option<f64>,
    pub eta_scale: f64,
    pub k_i: f64,
    pub c_sat: f64,
}

impl Default for CpidSection {
    fn default() -> Self {
        Self { eta: None, eta_scale: 0.1, k_i: 1.0, c_sat: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NexcpSection {
    pub rho: f64,
}

impl Default for NexcpSection {
    fn default() -> Self {
        Self { rho: 0.99 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitcpSection {
    pub bonferroni: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// Few-shot transfer: pretrain on every region except the target, then run
/// warm- and cold-start controllers on the target region.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub target_region: String,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    /// Warmup steps granted on the target region.
    #[serde(default = "default_target_warmup")]
    pub target_warmup: usize,
}

fn default_pretrain_epochs() -> usize {
    200
}
fn default_target_warmup() -> usize {
    10
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn alpha_ladder(&self) -> Result<AlphaLadder> {
        AlphaLadder::new(self.run.alphas.clone())
            .map_err(|e| Error::Config(format!("alphas: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("name must be non-empty".into()));
        }
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("dataset: set either path or synthetic, not both".into()))
            }
            (None, None) => {
                return Err(Error::Config("dataset: set path or synthetic".into()))
            }
            (None, Some(recipe)) => recipe.validate()?,
            _ => {}
        }
        self.alpha_ladder()?;
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must be non-empty".into()));
        }
        if self.run.horizons.is_empty() || self.run.horizons.contains(&0) {
            return Err(Error::Config("run.horizons must be non-empty with values >= 1".into()));
        }
        if self.run.method == MethodName::Ncc && self.run.warmup < self.ncc.context_window {
            return Err(Error::Config(format!(
                "run.warmup ({}) must be >= the ncc context window ({})",
                self.run.warmup, self.ncc.context_window
            )));
        }
        if self.forecaster.kind == ForecasterKind::External
            && self.forecaster.external_path.is_none()
        {
            return Err(Error::Config("forecaster.external_path required for external kind".into()));
        }
        if !(self.nexcp.rho > 0.0 && self.nexcp.rho <= 1.0) {
            return Err(Error::Config(format!(
                "nexcp.rho must lie in (0, 1], got {}",
                self.nexcp.rho
            )));
        }
        if self.transfer.is_some() && self.run.method != MethodName::Ncc {
            return Err(Error::Config("transfer runs require method = \"ncc\"".into()));
        }
        Ok(())
    }
}
