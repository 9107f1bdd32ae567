//! Quantile crossing and its repair: demonstrates the ACI crossing
//! condition constructively, then shows test-time adaptation restoring
//! distributional consistency on a live run.
//!
//! Run with: cargo run --release --example consistency_and_tta

use conformal_control::baselines::{aci_crossing_witness, aci_step, split_cp_quantile};
use conformal_control::controller::drive;
use conformal_control::core::{interval_from_quantile, is_consistent, AlphaLadder};
use conformal_control::forecasters::ArForecaster;
use conformal_control::harness::config::{SynthKind, SyntheticRecipe};
use conformal_control::harness::synth;
use conformal_control::metrics;
use conformal_control::ncc::{tta_adjust, init_tta_params, NccConfig, NccController, TtaConfig, TtaMode};
use conformal_control::neural::EncoderConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> conformal_control::Result<()> {
    // 1. ACI crossing: two rates close together and a moderately large step
    //    size meet the crossing condition, and one update inverts them.
    let (alpha1, alpha2) = (0.1, 0.2);
    let (a1_t, a2_t) = (0.1, 0.15);
    let eta = 0.1;
    let witness = aci_crossing_witness(a1_t, a2_t, eta, alpha1, alpha2)?;
    println!("crossing condition met: {}", witness == 1);
    let a1_next = aci_step(a1_t, 0, eta, alpha1)?;
    let a2_next = aci_step(a2_t, 1, eta, alpha2)?;
    println!("one ACI step: rate({alpha1}) -> {a1_next:.3}, rate({alpha2}) -> {a2_next:.3} (crossed)");
    let scores: Vec<f64> = (1..=100).map(f64::from).collect();
    let q1 = split_cp_quantile(&scores, a1_next)?;
    let q2 = split_cp_quantile(&scores, a2_next)?;
    let ladder2 = AlphaLadder::new(vec![alpha2, alpha1])?;
    let intervals = [interval_from_quantile(0.0, q2), interval_from_quantile(0.0, q1)];
    println!(
        "implied intervals are consistent: {}\n",
        is_consistent(&intervals, &ladder2)?
    );

    // 2. A crossed ladder repaired in isolation.
    let ladder = AlphaLadder::new(vec![0.9, 0.5])?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut aux = init_tta_params(TtaMode::Mlp, 4, 2, &mut rng)?;
    let tta_cfg = TtaConfig { max_iters: 100, step: Some(0.05), dcs_threshold: 1.0, mode: TtaMode::Mlp };
    let outcome = tta_adjust(&[2.0, 2.0], &[0.2, 0.0], &[0.5, -0.5, 0.25, 1.0], &mut aux, &tta_cfg, 0.05, &ladder)?;
    println!(
        "isolated repair: (2.2, 2.0) -> ({:.3}, {:.3}) in {} iterations",
        outcome.ladder.q_conf[0], outcome.ladder.q_conf[1], outcome.iters
    );

    // 3. End to end: the same controller with and without adaptation.
    let recipe = SyntheticRecipe {
        kind: SynthKind::ArShift,
        length: 1500,
        seed: 31,
        regions: 1,
        changepoints: vec![500, 1000],
        seg_mean: vec![0.0, 6.0, -3.0],
        seg_var: vec![1.0, 4.0, 1.0],
        seg_ar: vec![0.6, 0.6, 0.6],
        period: 50,
        amplitude: 2.0,
        region_spread: 2.0,
    };
    let data = synth(&recipe)?;
    let series = &data.regions[0].y;
    let alphas = vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02];
    let big_ladder = AlphaLadder::new(alphas.clone())?;
    for (label, iters) in [("tta on ", 50usize), ("tta off", 0)] {
        let mut cfg = NccConfig::new(big_ladder.clone(), 1);
        cfg.encoder = EncoderConfig {
            hidden: 16,
            heads: 2,
            window: 16,
            ladder_len: alphas.len(),
            seq_views: 1,
            static_dim: 1,
            head_hidden: 16,
        };
        cfg.stages_initial = [0, 0, 0];
        cfg.retrain_interval = None;
        cfg.tta.max_iters = iters;
        cfg.seed = 7;
        let mut controller = NccController::new(cfg)?;
        let mut forecaster = ArForecaster::new(4, 1e-3)?;
        let out = drive(series, &[], &mut forecaster, &mut controller, 100, 1)?;
        let dcs = metrics::dcs(&out.records)?;
        let cs = metrics::calibration_score(&out.records, &big_ladder)?;
        let mean_iters: f64 = out
            .tta_iters
            .iter()
            .map(|i| f64::from(i.unwrap_or(0)))
            .sum::<f64>()
            / out.tta_iters.len() as f64;
        println!("{label}: DCS {dcs:.3}  CS {cs:.4}  mean adaptation iters {mean_iters:.2}");
    }
    Ok(())
}
