//! Temporary diagnostics (deleted before release).

use conformal_control::baselines::SplitCpController;
use conformal_control::controller::drive;
use conformal_control::core::AlphaLadder;
use conformal_control::forecasters::ArForecaster;
use conformal_control::harness::config::{SynthKind, SyntheticRecipe};
use conformal_control::harness::{sorted_records, synth};
use conformal_control::metrics;
use conformal_control::ncc::{NccConfig, NccController};
use conformal_control::neural::EncoderConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ar_shift_recipe(length: usize, seed: u64) -> SyntheticRecipe {
    SyntheticRecipe {
        kind: SynthKind::ArShift,
        length,
        seed,
        regions: 1,
        changepoints: vec![length / 3, 2 * length / 3],
        seg_mean: vec![0.0, 6.0, -3.0],
        seg_var: vec![1.0, 4.0, 1.0],
        seg_ar: vec![0.6, 0.6, 0.6],
        period: 50,
        amplitude: 2.0,
        region_spread: 2.0,
    }
}

fn small_encoder(n: usize, hidden: usize, window: usize) -> EncoderConfig {
    EncoderConfig {
        hidden,
        heads: 2,
        window,
        ladder_len: n,
        seq_views: 1,
        static_dim: 1,
        head_hidden: hidden,
    }
}

#[test]
#[ignore]
fn diag_criterion9_coverage() {
    let alphas = vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02];
    let ladder = AlphaLadder::new(alphas.clone()).unwrap();
    let data = synth(&ar_shift_recipe(2000, 901)).unwrap();
    let series = &data.regions[0].y;

    for (label, tta, trained, eta_f, lambdas) in [
        ("full lambdas", 50usize, true, 0.1, [1.0, 1.0, 0.1, 1.0]),
        ("rebalanced", 50, true, 0.1, [1.0, 0.2, 0.02, 1.0]),
        ("stage1 only", 50, true, 0.1, [1.0, 0.0, 0.0, 0.0]),
        ("untrained", 50, false, 0.1, [1.0, 1.0, 0.1, 1.0]),
    ] {
        let mut cfg = NccConfig::new(ladder.clone(), 1);
        cfg.encoder = small_encoder(11, 16, 16);
        cfg.eta_scale_factor = eta_f;
        cfg.window = 10;
        cfg.lambdas = lambdas;
        if trained {
            cfg.stages_initial = [30, 15, 15];
            cfg.stages_retrain = [4, 2, 2];
            cfg.retrain_interval = Some(25);
        } else {
            cfg.stages_initial = [0, 0, 0];
            cfg.retrain_interval = None;
        }
        cfg.batch_cap = 16;
        cfg.tta.max_iters = tta;
        cfg.seed = 1;
        let mut controller = NccController::new(cfg).unwrap();
        let mut forecaster = ArForecaster::new(4, 1e-3).unwrap();
        let out = drive(series, &[], &mut forecaster, &mut controller, 100, 1).unwrap();
        let incomplete = controller.tta_incomplete_steps();
        println!("tta incomplete steps: {incomplete}");
        let covs: Vec<f64> = (0..11)
            .map(|i| metrics::empirical_coverage(&out.records, i).unwrap())
            .collect();
        let sorted = sorted_records(&out.records, &ladder).unwrap();
        let cs_sorted = metrics::calibration_score(&sorted, &ladder).unwrap();
        let cs_unsorted = metrics::calibration_score(&out.records, &ladder).unwrap();
        let dcs = metrics::dcs(&out.records).unwrap();
        // magnitude of the TTA adjustment actually emitted
        let mut h_abs = 0.0f64;
        for r in &out.records {
            for i in 0..11 {
                h_abs = h_abs.max((r.ladder.q_conf[i] - r.ladder.q_raw[i] - r.ladder.delta[i]).abs());
            }
        }
        println!("--- {label}: dcs {dcs:.3} cs_unsorted {cs_unsorted:.4} cs_sorted {cs_sorted:.4} max|h| {h_abs:.3}");
        for (a, c) in alphas.iter().zip(&covs) {
            print!(" a={a}: {c:.3} (want {:.3}) |", 1.0 - a);
        }
        println!();
    }

    let mut split = SplitCpController::new(ladder.clone());
    let mut forecaster = ArForecaster::new(4, 1e-3).unwrap();
    let out = drive(series, &[], &mut forecaster, &mut split, 100, 1).unwrap();
    let cs = metrics::calibration_score(&out.records, &ladder).unwrap();
    let covs: Vec<f64> = (0..11)
        .map(|i| metrics::empirical_coverage(&out.records, i).unwrap())
        .collect();
    println!("--- splitcp cs {cs:.4}");
    for (a, c) in alphas.iter().zip(&covs) {
        print!(" a={a}: {c:.3} |");
    }
    println!();
}

#[test]
#[ignore]
fn diag_criterion8_learning() {
    for (lr, batch, epochs, hidden, window, m) in [
        (5e-2, 64usize, 200usize, 8usize, 4usize, 1000usize),
        (3e-2, 64, 200, 8, 4, 1000),
        (5e-2, 128, 200, 8, 4, 1000),
        (5e-2, 64, 200, 16, 8, 1000),
        (5e-2, 64, 200, 8, 4, 300),
    ] {
        let ladder = AlphaLadder::new(vec![0.5]).unwrap();
        let mut cfg = NccConfig::new(ladder, 1);
        cfg.encoder = small_encoder(1, hidden, window);
        cfg.stages_initial = [0, 0, 0];
        cfg.retrain_interval = None;
        cfg.tta.max_iters = 0;
        cfg.lr = lr;
        cfg.batch_cap = batch;
        cfg.seed = 3;
        let mut controller = NccController::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut scores = Vec::new();
        for t in 0..m {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let s = z.abs();
            scores.push(s);
            conformal_control::controller::OnlineController::observe_warmup(
                &mut controller,
                t,
                s,
                0.0,
                s,
            );
        }
        let report = controller.train([epochs, 0, 0]).unwrap();
        let mut sorted = scores.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        let median = 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
        let mut qs = Vec::new();
        for _ in 0..20 {
            controller.push_forecast(0.0);
            let (_, lad) = controller
                .ncc_step(rng.sample::<f64, _>(rand_distr::StandardNormal).abs())
                .unwrap();
            qs.push(lad.q_raw[0]);
        }
        let q_mean = qs.iter().sum::<f64>() / qs.len() as f64;
        let q_first = qs[0];
        println!(
            "lr {lr} batch {batch} hidden {hidden} win {window} m {m}: q_first {q_first:.4} q_mean {q_mean:.4} median {median:.4} (loss {:.4} -> {:.4})",
            report.stage_start[0], report.stage_end[0]
        );
    }
}
