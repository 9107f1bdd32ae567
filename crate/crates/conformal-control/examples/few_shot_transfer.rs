//! Few-shot transfer across regions: pretrains the quantile predictor on
//! eight source regions that share dynamics, then warm-starts a controller
//! on a ninth region with only ten warmup steps and compares early
//! calibration against a cold start.
//!
//! Run with: cargo run --release --example few_shot_transfer

use conformal_control::controller::drive;
use conformal_control::core::AlphaLadder;
use conformal_control::forecasters::ArForecaster;
use conformal_control::harness::collect_scores;
use conformal_control::harness::config::{SynthKind, SyntheticRecipe};
use conformal_control::harness::synth;
use conformal_control::metrics;
use conformal_control::ncc::{pretrain, NccConfig, NccController, RegionSeries};
use conformal_control::neural::EncoderConfig;

fn main() -> conformal_control::Result<()> {
    let recipe = SyntheticRecipe {
        kind: SynthKind::ArShift,
        length: 600,
        seed: 44,
        regions: 9,
        changepoints: vec![200, 400],
        seg_mean: vec![0.0, 6.0, -3.0],
        seg_var: vec![1.0, 4.0, 1.0],
        seg_ar: vec![0.6, 0.6, 0.6],
        period: 50,
        amplitude: 2.0,
        region_spread: 3.0,
    };
    let data = synth(&recipe)?;
    let target_index = 8;
    let ladder = AlphaLadder::new(vec![0.5, 0.2, 0.1])?;

    let make_cfg = |seed: u64| {
        let mut cfg = NccConfig::new(ladder.clone(), 1);
        cfg.encoder = EncoderConfig {
            hidden: 16,
            heads: 2,
            window: 8,
            ladder_len: 3,
            seq_views: 1,
            static_dim: 1 + 9,
            head_hidden: 16,
        };
        cfg.static_feats = {
            let mut v = vec![0.0; 9];
            v[target_index] = 1.0;
            v
        };
        cfg.stages_initial = [0, 0, 0];
        cfg.retrain_interval = None;
        cfg.seed = seed;
        cfg
    };

    println!("collecting scores from 8 source regions...");
    let mut sources = Vec::new();
    for (ri, region) in data.regions.iter().enumerate() {
        if ri == target_index {
            continue;
        }
        let mut forecaster = ArForecaster::new(4, 1e-3)?;
        let (ys, scores) = collect_scores(&region.y, &mut forecaster, 1)?;
        let mut onehot = vec![0.0; 9];
        onehot[ri] = 1.0;
        sources.push(RegionSeries { ys, scores, static_feats: onehot });
    }

    println!("pretraining the shared quantile predictor (150 epochs)...");
    let params = pretrain(&make_cfg(1), &sources, 150)?;

    let target = &data.regions[target_index];
    let mut eval = |label: &str, mut controller: NccController| -> conformal_control::Result<()> {
        let mut forecaster = ArForecaster::new(4, 1e-3)?;
        let out = drive(&target.y, &[], &mut forecaster, &mut controller, 10, 1)?;
        let early = &out.records[..20.min(out.records.len())];
        let late = &out.records[..];
        println!(
            "{label}: CS over first 20 steps {:.4}, over all {} steps {:.4}",
            metrics::calibration_score(early, &ladder)?,
            late.len(),
            metrics::calibration_score(late, &ladder)?
        );
        Ok(())
    };
    eval("warm start (pretrained)", NccController::with_params(make_cfg(1), params)?)?;
    eval("cold start (random)    ", NccController::new(make_cfg(1))?)?;
    Ok(())
}
