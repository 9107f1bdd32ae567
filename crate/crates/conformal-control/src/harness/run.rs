//! Experiment orchestration: builds (region x method x horizon x seed)
//! cells, drives each one through the online protocol, writes one JSONL
//! results file per cell and a metrics CSV per run.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{
    ExperimentConfig, ForecasterConfig, ForecasterKind, MethodName, NccSection, TransferConfig,
};
use super::ingest::{Dataset, RegionData};
use crate::baselines::{AciController, CpidController, NexcpController, SplitCpController};
use crate::controller::{drive, RunOutput};
use crate::core::{
    coverage_error, interval_from_quantile, sort_ladder, AlphaLadder, Interval, StepRecord,
};
use crate::error::{Error, Result};
use crate::forecasters::{
    load_external, ArForecaster, BaseForecaster, ExternalForecaster, GruForecaster,
    ThetaForecaster,
};
use crate::metrics::{self, MetricReport};
use crate::ncc::{NccConfig, NccController, RegionSeries, TtaConfig};

/// Paths produced by one `run` invocation.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub results_paths: Vec<PathBuf>,
    pub metrics_path: PathBuf,
}

#[derive(Serialize)]
struct AlphaJson {
    alpha: f64,
    q_raw: f64,
    q_conf: f64,
    lo: Option<f64>,
    hi: Option<f64>,
    err: u8,
}

#[derive(Serialize)]
struct StepJson {
    t: usize,
    tau: usize,
    y: f64,
    y_hat: f64,
    alphas: Vec<AlphaJson>,
    consistent: bool,
    tta_iters: Option<u32>,
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    error: &'a str,
}

struct MetricRow {
    dataset: String,
    method: String,
    region: String,
    horizon: String,
    seed: u64,
    sorted: bool,
    report: MetricReport,
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match (&config.dataset.path, &config.dataset.synthetic) {
        (Some(path), None) => super::ingest::ingest(path),
        (None, Some(recipe)) => super::synth::synth(recipe),
        _ => Err(Error::Config("dataset: set path or synthetic".into())),
    }
}

fn build_forecaster(cfg: &ForecasterConfig, seed: u64) -> Result<Box<dyn BaseForecaster>> {
    Ok(match cfg.kind {
        ForecasterKind::Ar => Box::new(ArForecaster::new(cfg.ar_order, cfg.ar_ridge)?),
        ForecasterKind::Theta => Box::new(ThetaForecaster),
        ForecasterKind::Gru => Box::new(GruForecaster::new(
            cfg.gru_window,
            cfg.gru_hidden,
            cfg.gru_epochs,
            cfg.gru_lr,
            seed,
        )?),
        ForecasterKind::External => {
            let path = cfg
                .external_path
                .as_ref()
                .ok_or_else(|| Error::Config("external forecaster needs a path".into()))?;
            Box::new(ExternalForecaster::new(load_external(path)?))
        }
    })
}

/// One-hot region encoding used as the static feature block.
fn region_onehot(index: usize, count: usize) -> Vec<f64> {
    let mut v = vec![0.0; count];
    if count > 0 {
        v[index] = 1.0;
    }
    v
}

pub(crate) fn ncc_config_from(
    section: &NccSection,
    ladder: AlphaLadder,
    tau: usize,
    seed: u64,
    static_feats: Vec<f64>,
    exo_views: usize,
) -> NccConfig {
    let mut cfg = NccConfig::new(ladder, tau);
    cfg.eta = section.eta;
    if let Some(factor) = section.eta_scale {
        cfg.eta_scale_factor = factor;
    }
    cfg.window = section.window;
    cfg.temperature = section.temperature;
    if let Some(factor) = section.temperature_scale {
        cfg.temperature_scale_factor = factor;
    }
    cfg.lambdas = section.lambdas;
    cfg.encoder.hidden = section.hidden;
    cfg.encoder.heads = section.heads;
    cfg.encoder.window = section.context_window;
    cfg.encoder.head_hidden = section.head_hidden;
    cfg.stages_initial = section.stages_initial;
    cfg.stages_retrain = section.stages_retrain;
    cfg.retrain_interval = section.retrain_interval;
    cfg.batch_cap = section.batch_cap;
    cfg.lr = section.lr;
    cfg.tta = TtaConfig {
        max_iters: section.tta_max_iters,
        step: section.tta_step,
        dcs_threshold: section.tta_dcs_threshold,
        mode: section.tta_mode.into(),
    };
    if let Some(factor) = section.tta_step_scale {
        cfg.tta_step_scale_factor = factor;
    }
    cfg.seed = seed;
    cfg = cfg.with_static_feats(static_feats);
    cfg.with_exo_views(exo_views)
}

fn region_views(region: &RegionData, use_views: bool) -> Vec<Vec<f64>> {
    if !use_views {
        return Vec::new();
    }
    region.views.values().cloned().collect()
}

fn run_cell(
    config: &ExperimentConfig,
    ladder: &AlphaLadder,
    region: &RegionData,
    region_index: usize,
    region_count: usize,
    tau: usize,
    seed: u64,
) -> Result<RunOutput> {
    let mut forecaster = build_forecaster(&config.forecaster, seed)?;
    let warmup = config.run.warmup;
    match config.run.method {
        MethodName::Ncc => {
            let views = region_views(region, config.ncc.use_views);
            let static_feats = if region_count > 1 {
                region_onehot(region_index, region_count)
            } else {
                Vec::new()
            };
            let cfg = ncc_config_from(
                &config.ncc,
                ladder.clone(),
                tau,
                seed,
                static_feats,
                views.len(),
            );
            let mut controller = NccController::new(cfg)?;
            drive(&region.y, &views, forecaster.as_mut(), &mut controller, warmup, tau)
        }
        MethodName::Aci => {
            let mut controller = AciController::new(ladder.clone(), config.aci.eta)?;
            drive(&region.y, &[], forecaster.as_mut(), &mut controller, warmup, tau)
        }
        MethodName::Cpid => {
            let mut controller = match config.cpid.eta {
                Some(eta) => {
                    CpidController::new(ladder.clone(), eta, config.cpid.k_i, config.cpid.c_sat)?
                }
                None => CpidController::new_scale_relative(
                    ladder.clone(),
                    config.cpid.eta_scale,
                    config.cpid.k_i,
                    config.cpid.c_sat,
                )?,
            };
            drive(&region.y, &[], forecaster.as_mut(), &mut controller, warmup, tau)
        }
        MethodName::Nexcp => {
            let mut controller = NexcpController::new(ladder.clone(), config.nexcp.rho)?;
            drive(&region.y, &[], forecaster.as_mut(), &mut controller, warmup, tau)
        }
        MethodName::Splitcp => {
            let mut controller = if config.splitcp.bonferroni {
                SplitCpController::with_bonferroni(ladder.clone(), config.run.horizons.len())
            } else {
                SplitCpController::new(ladder.clone())
            };
            drive(&region.y, &[], forecaster.as_mut(), &mut controller, warmup, tau)
        }
    }
}

/// Rearranges every record's quantiles ascending (the sorted-comparison
/// protocol) and re-resolves errors and intervals against the sorted
/// conformalized ladder.
pub fn sorted_records(records: &[StepRecord], ladder: &AlphaLadder) -> Result<Vec<StepRecord>> {
    records
        .iter()
        .map(|r| {
            let q_raw = sort_ladder(&r.ladder.q_raw, ladder)?;
            let q_conf = sort_ladder(&r.ladder.q_conf, ladder)?;
            let delta = q_conf.iter().zip(&q_raw).map(|(c, q)| c - q).collect();
            let sorted = crate::core::QuantileLadder::new(q_raw, delta, q_conf)?;
            StepRecord::resolve(r.t, r.y, r.y_hat, r.tau, sorted)
        })
        .collect()
}

/// Invariant check applied to every record before it is written out.
fn validate_record(record: &StepRecord) -> Result<()> {
    for (i, &q) in record.ladder.q_conf.iter().enumerate() {
        if record.errs[i] != coverage_error(record.s, q) {
            return Err(Error::State(format!(
                "record t={} violates the error invariant at index {i}",
                record.t
            )));
        }
        if record.intervals[i] != interval_from_quantile(record.y_hat, q) {
            return Err(Error::State(format!(
                "record t={} violates the interval invariant at index {i}",
                record.t
            )));
        }
    }
    Ok(())
}

fn write_results_jsonl(
    path: &Path,
    ladder: &AlphaLadder,
    records: &[StepRecord],
    tta_iters: &[Option<u32>],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for (record, iters) in records.iter().zip(tta_iters) {
        validate_record(record).inspect_err(|e| {
            // flush whatever was written plus a terminal error record
            let msg = e.to_string();
            let _ = serde_json::to_writer(&mut w, &ErrorJson { error: &msg });
            let _ = w.write_all(b"\n");
            let _ = w.flush();
        })?;
        let alphas = (0..ladder.len())
            .map(|i| {
                let (lo, hi) = match record.intervals[i] {
                    Interval::Range { lo, hi } => (Some(lo), Some(hi)),
                    Interval::Empty => (None, None),
                };
                AlphaJson {
                    alpha: ladder.get(i),
                    q_raw: record.ladder.q_raw[i],
                    q_conf: record.ladder.q_conf[i],
                    lo,
                    hi,
                    err: record.errs[i],
                }
            })
            .collect();
        let step = StepJson {
            t: record.t,
            tau: record.tau,
            y: record.y,
            y_hat: record.y_hat,
            alphas,
            consistent: record.is_consistent(),
            tta_iters: *iters,
        };
        serde_json::to_writer(&mut w, &step)
            .map_err(|e| Error::State(format!("results serialization failed: {e}")))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_metrics_csv(path: &Path, ladder: &AlphaLadder, rows: &[MetricRow]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = String::from("dataset,method,region,horizon,seed,sorted,n_steps,cs,wis,crps,dcs");
    for alpha in ladder.iter() {
        header.push_str(&format!(",cov_{alpha}"));
    }
    writeln!(w, "{header}")?;
    for row in rows {
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            row.dataset,
            row.method,
            row.region,
            row.horizon,
            row.seed,
            row.sorted,
            row.report.n_steps,
            row.report.cs,
            row.report.wis,
            row.report.crps,
            row.report.dcs
        );
        for c in &row.report.coverage {
            line.push_str(&format!(",{c}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the configured experiment; with `sorted` the records pass through
/// `sort_ladder` before metrics (and the emitted JSONL reflects the sorted
/// ladders).
pub fn run(config: &ExperimentConfig, sorted: bool) -> Result<RunArtifacts> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let ladder = config.alpha_ladder()?;
    std::fs::create_dir_all(&config.output.dir)?;
    let suffix = if sorted { "_sorted" } else { "" };

    let mut results_paths = Vec::new();
    let mut rows: Vec<MetricRow> = Vec::new();

    if let Some(transfer) = &config.transfer {
        run_transfer(config, transfer, &dataset, &ladder, sorted, &mut results_paths, &mut rows)?;
    } else {
        for &seed in &config.run.seeds {
            for &tau in &config.run.horizons {
                let mut pooled: Vec<StepRecord> = Vec::new();
                for (ri, region) in dataset.regions.iter().enumerate() {
                    let out = run_cell(
                        config,
                        &ladder,
                        region,
                        ri,
                        dataset.regions.len(),
                        tau,
                        seed,
                    )?;
                    let records = if sorted {
                        sorted_records(&out.records, &ladder)?
                    } else {
                        out.records
                    };
                    let path = config.output.dir.join(format!(
                        "results_{}_{}_{}_h{}_s{}{}.jsonl",
                        config.name,
                        config.run.method.as_str(),
                        region.id,
                        tau,
                        seed,
                        suffix
                    ));
                    write_results_jsonl(&path, &ladder, &records, &out.tta_iters)?;
                    results_paths.push(path);
                    rows.push(MetricRow {
                        dataset: config.name.clone(),
                        method: config.run.method.as_str().to_string(),
                        region: region.id.clone(),
                        horizon: tau.to_string(),
                        seed,
                        sorted,
                        report: metrics::report(&records, &ladder)?,
                    });
                    pooled.extend(records);
                }
                if dataset.regions.len() > 1 {
                    rows.push(MetricRow {
                        dataset: config.name.clone(),
                        method: config.run.method.as_str().to_string(),
                        region: "pooled".into(),
                        horizon: tau.to_string(),
                        seed,
                        sorted,
                        report: metrics::report(&pooled, &ladder)?,
                    });
                }
            }
            if config.run.horizons.len() > 1 {
                // pooled-across-horizon aggregate per seed
                let mut all: Vec<StepRecord> = Vec::new();
                for &tau in &config.run.horizons {
                    for (ri, region) in dataset.regions.iter().enumerate() {
                        let out = run_cell(
                            config,
                            &ladder,
                            region,
                            ri,
                            dataset.regions.len(),
                            tau,
                            seed,
                        )?;
                        let records = if sorted {
                            sorted_records(&out.records, &ladder)?
                        } else {
                            out.records
                        };
                        all.extend(records);
                    }
                }
                rows.push(MetricRow {
                    dataset: config.name.clone(),
                    method: config.run.method.as_str().to_string(),
                    region: "pooled".into(),
                    horizon: "pooled".into(),
                    seed,
                    sorted,
                    report: metrics::report(&all, &ladder)?,
                });
            }
        }
    }

    let metrics_path = config.output.dir.join(format!(
        "metrics_{}_{}{}.csv",
        config.name,
        config.run.method.as_str(),
        suffix
    ));
    write_metrics_csv(&metrics_path, &ladder, &rows)?;
    Ok(RunArtifacts { results_paths, metrics_path })
}

/// Causal score collection over a full series (used to build pretraining
/// material): returns the resolved observations and their scores.
pub fn collect_scores(
    series: &[f64],
    forecaster: &mut dyn BaseForecaster,
    tau: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pending = std::collections::BTreeMap::new();
    let mut ys = Vec::new();
    let mut scores = Vec::new();
    for t in 0..series.len() {
        if let Some(y_hat) = pending.remove(&t) {
            ys.push(series[t]);
            scores.push(crate::core::nonconformity(series[t], y_hat)?);
        }
        if t + tau < series.len() {
            if let Some(y_hat) = forecaster.forecast(&series[..=t], tau)? {
                pending.insert(t + tau, y_hat);
            }
        }
    }
    Ok((ys, scores))
}

#[allow(clippy::too_many_arguments)]
fn run_transfer(
    config: &ExperimentConfig,
    transfer: &TransferConfig,
    dataset: &Dataset,
    ladder: &AlphaLadder,
    sorted: bool,
    results_paths: &mut Vec<PathBuf>,
    rows: &mut Vec<MetricRow>,
) -> Result<()> {
    let target_index = dataset
        .regions
        .iter()
        .position(|r| r.id == transfer.target_region)
        .ok_or_else(|| {
            Error::Config(format!("transfer target region '{}' not in dataset", transfer.target_region))
        })?;
    if dataset.regions.len() < 2 {
        return Err(Error::Config("transfer needs at least two regions".into()));
    }
    let region_count = dataset.regions.len();
    let target = &dataset.regions[target_index];
    let suffix = if sorted { "_sorted" } else { "" };
    let tau = config.run.horizons[0];

    for &seed in &config.run.seeds {
        // pretraining material from every source region
        let mut sources = Vec::new();
        for (ri, region) in dataset.regions.iter().enumerate() {
            if ri == target_index {
                continue;
            }
            let mut forecaster = build_forecaster(&config.forecaster, seed)?;
            let (ys, scores) = collect_scores(&region.y, forecaster.as_mut(), tau)?;
            sources.push(RegionSeries {
                ys,
                scores,
                static_feats: region_onehot(ri, region_count),
            });
        }
        let make_cfg = |seed: u64| {
            let mut cfg = ncc_config_from(
                &config.ncc,
                ladder.clone(),
                tau,
                seed,
                region_onehot(target_index, region_count),
                0,
            );
            // few-shot target warmups are too short for initial training;
            // the retrain cadence takes over once history accumulates
            cfg.stages_initial = [0, 0, 0];
            cfg
        };
        let pretrain_cfg = make_cfg(seed);
        let params = crate::ncc::pretrain(&pretrain_cfg, &sources, transfer.pretrain_epochs)?;

        for (label, warm) in [("ncc_warm", true), ("ncc_cold", false)] {
            let cfg = make_cfg(seed);
            let mut controller = if warm {
                NccController::with_params(cfg, params.clone())?
            } else {
                NccController::new(cfg)?
            };
            let mut forecaster = build_forecaster(&config.forecaster, seed)?;
            let out = drive(
                &target.y,
                &[],
                forecaster.as_mut(),
                &mut controller,
                transfer.target_warmup,
                tau,
            )?;
            let records = if sorted {
                sorted_records(&out.records, ladder)?
            } else {
                out.records
            };
            let path = config.output.dir.join(format!(
                "results_{}_{}_{}_h{}_s{}{}.jsonl",
                config.name, label, target.id, tau, seed, suffix
            ));
            write_results_jsonl(&path, ladder, &records, &out.tta_iters)?;
            results_paths.push(path);
            rows.push(MetricRow {
                dataset: config.name.clone(),
                method: label.to_string(),
                region: target.id.clone(),
                horizon: tau.to_string(),
                seed,
                sorted,
                report: metrics::report(&records, ladder)?,
            });
        }
    }
    Ok(())
}
