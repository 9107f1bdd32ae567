//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured figures (run with `cargo test --test acceptance --
//! --nocapture` to see them).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use conformal_control::baselines::{
    aci_crossing_witness, aci_step, split_cp_quantile, AciController, CpidController,
    SplitCpController,
};
use conformal_control::checks;
use conformal_control::controller::{drive, RunOutput};
use conformal_control::core::{
    interval_from_quantile, is_consistent, running_error, AlphaLadder, QuantileLadder, StepRecord,
};
use conformal_control::forecasters::ArForecaster;
use conformal_control::harness::config::{SynthKind, SyntheticRecipe};
use conformal_control::harness::{self, sorted_records, synth};
use conformal_control::metrics;
use conformal_control::ncc::{pretrain, NccConfig, NccController, RegionSeries};
use conformal_control::neural::EncoderConfig;

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

fn raw_ncc_config(alphas: Vec<f64>, eta: f64, w: usize, seed: u64) -> NccConfig {
    let ladder = AlphaLadder::new(alphas).unwrap();
    let n = ladder.len();
    let mut cfg = NccConfig::new(ladder, 1);
    cfg.encoder = small_encoder(n, 8, 4);
    cfg.eta = Some(eta);
    cfg.window = w;
    cfg.score_scale = Some(1.0);
    cfg.stages_initial = [0, 0, 0];
    cfg.retrain_interval = None;
    cfg.tta.max_iters = 0;
    cfg.seed = seed;
    cfg
}

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

fn mean_err(records: &[StepRecord], idx: usize) -> f64 {
    records.iter().map(|r| f64::from(r.errs[idx])).sum::<f64>() / records.len() as f64
}

/// Criterion 1: the conformalization deltas telescope exactly into the sum
/// of windowed-error deviations, for a spread of ladder sizes, learning
/// rates and window lengths.
#[test]
fn criterion_01_telescoping_identity() {
    let ladders: [&[f64]; 3] = [
        &[0.5],
        &[0.5, 0.2, 0.1],
        &[0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02],
    ];
    let grid: Vec<(usize, f64, usize)> = {
        let mut g = Vec::new();
        for ni in 0..3 {
            for &eta in &[0.05, 0.5] {
                for &w in &[1usize, 10] {
                    g.push((ni, eta, w));
                }
            }
        }
        g.truncate(10);
        g
    };
    let steps = 2000;
    let mut worst: f64 = 0.0;
    for (cfg_idx, &(ni, eta, w)) in grid.iter().enumerate() {
        let alphas = ladders[ni].to_vec();
        let cfg = raw_ncc_config(alphas.clone(), eta, w, cfg_idx as u64 + 1);
        let mut controller = NccController::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + cfg_idx as u64);
        for _ in 0..steps {
            controller.push_forecast(0.0);
            let y: f64 = rng.random_range(-2.0..2.0);
            controller.ncc_step(y).unwrap();
        }
        for (i, &alpha) in alphas.iter().enumerate() {
            let col = controller.err_column(i);
            let mut acc = 0.0;
            for t in 1..=steps {
                acc += running_error(col, t, w).unwrap() - alpha;
            }
            let expect = eta * acc;
            let gap = (controller.delta()[i] - expect).abs();
            worst = worst.max(gap);
            assert!(
                gap < 1e-9,
                "config {cfg_idx} (n={}, eta={eta}, w={w}) alpha {alpha}: |delta - eta*sum| = {gap:.3e}",
                alphas.len()
            );
        }
    }
    println!("[PASS] criterion 1: telescoping identity over 10 configs, worst gap {worst:.2e} < 1e-9");
}

/// Criterion 2: long-run coverage of the untrained controller on shifting
/// synthetic data, three target rates, four seeds.
#[test]
fn criterion_02_ncc_long_run_coverage() {
    let alphas = vec![0.5, 0.2, 0.1];
    let mut worst: f64 = 0.0;
    for seed in 1..=4u64 {
        let data = synth(&ar_shift_recipe(5000, 100 + seed)).unwrap();
        let series = &data.regions[0].y;
        let ladder = AlphaLadder::new(alphas.clone()).unwrap();
        let mut cfg = NccConfig::new(ladder, 1);
        cfg.encoder = small_encoder(3, 16, 16);
        cfg.eta_scale_factor = 0.5;
        cfg.window = 10;
        cfg.stages_initial = [0, 0, 0];
        cfg.retrain_interval = None;
        cfg.tta.max_iters = 0;
        cfg.seed = seed;
        let mut controller = NccController::new(cfg).unwrap();
        let mut forecaster = ArForecaster::new(4, 1e-3).unwrap();
        let out = drive(series, &[], &mut forecaster, &mut controller, 100, 1).unwrap();
        for (i, &alpha) in alphas.iter().enumerate() {
            let gap = (mean_err(&out.records, i) - alpha).abs();
            worst = worst.max(gap);
            assert!(
                gap <= 0.03,
                "seed {seed} alpha {alpha}: |miscoverage - alpha| = {gap:.4}"
            );
        }
    }
    println!("[PASS] criterion 2: NCC long-run miscoverage within 0.03 at three rates x 4 seeds (worst {worst:.4})");
}

/// Criterion 3: ACI long-run coverage on the shifting synthetic and
/// split-conformal coverage on exchangeable data.
#[test]
fn criterion_03_aci_and_splitcp_coverage() {
    // ACI on ar-shift
    let data = synth(&ar_shift_recipe(5000, 42)).unwrap();
    let series = &data.regions[0].y;
    let ladder = AlphaLadder::new(vec![0.1]).unwrap();
    let mut controller = AciController::new(ladder, 0.05).unwrap();
    let mut forecaster = ArForecaster::new(4, 1e-3).unwrap();
    let out = drive(series, &[], &mut forecaster, &mut controller, 100, 1).unwrap();
    let coverage = 1.0 - mean_err(&out.records, 0);
    let gap = (coverage - 0.9).abs();
    assert!(gap <= 0.02, "ACI coverage {coverage:.4} strays {gap:.4} from 0.9");

    // split conformal on iid gaussian data
    let recipe = SyntheticRecipe {
        kind: SynthKind::IidGauss,
        length: 5000,
        seed: 7,
        regions: 1,
        changepoints: vec![],
        seg_mean: vec![1.0],
        seg_var: vec![1.0],
        seg_ar: vec![0.0],
        period: 50,
        amplitude: 0.0,
        region_spread: 0.0,
    };
    let data = synth(&recipe).unwrap();
    let ladder = AlphaLadder::new(vec![0.1]).unwrap();
    let mut controller = SplitCpController::new(ladder);
    let mut forecaster = ArForecaster::new(2, 1e-3).unwrap();
    let out = drive(&data.regions[0].y, &[], &mut forecaster, &mut controller, 200, 1).unwrap();
    let n = out.records.len() as f64;
    let cov = 1.0 - mean_err(&out.records, 0);
    let half_width = 2.5758 * (0.9f64 * 0.1 / n).sqrt();
    assert!(
        (cov - 0.9).abs() <= half_width,
        "split-CP coverage {cov:.4} outside the 99% binomial CI ±{half_width:.4}"
    );
    println!(
        "[PASS] criterion 3: ACI coverage gap {gap:.4} <= 0.02; split-CP coverage {cov:.4} within ±{half_width:.4}"
    );
}

/// Criterion 4: the appendix crossing condition constructively produces
/// crossed rates and crossed intervals after one ACI step.
#[test]
fn criterion_04_quantile_crossing_reproduction() {
    // alpha1 < alpha2, adaptive rates close together, eta large enough
    let (alpha1, alpha2) = (0.1, 0.2);
    let (a1_t, a2_t) = (0.1, 0.15);
    let eta = 0.1;
    assert_eq!(aci_crossing_witness(a1_t, a2_t, eta, alpha1, alpha2).unwrap(), 1);

    // stated error pattern: the small-rate interval covers, the large-rate
    // interval misses
    let a1_next = aci_step(a1_t, 0, eta, alpha1).unwrap();
    let a2_next = aci_step(a2_t, 1, eta, alpha2).unwrap();
    assert!(a1_next > a2_next, "rates did not cross: {a1_next} vs {a2_next}");

    // crossed rates produce crossed intervals through the quantile lookup
    let scores: Vec<f64> = (1..=100).map(f64::from).collect();
    let q1 = split_cp_quantile(&scores, a1_next).unwrap();
    let q2 = split_cp_quantile(&scores, a2_next).unwrap();
    assert!(q1 < q2, "quantiles did not cross: {q1} vs {q2}");
    let ladder = AlphaLadder::new(vec![alpha2, alpha1]).unwrap();
    let intervals = [interval_from_quantile(0.0, q2), interval_from_quantile(0.0, q1)];
    assert!(!is_consistent(&intervals, &ladder).unwrap());

    // and the condition is easy to meet: a negative case flips the witness
    assert_eq!(aci_crossing_witness(a1_t, a2_t, 0.01, alpha1, alpha2).unwrap(), 0);
    println!(
        "[PASS] criterion 4: crossing witness reproduces crossed rates ({a1_next:.3} > {a2_next:.3}) and inconsistent intervals"
    );
}

/// Criterion 5: gradient checks for all losses and network blocks.
#[test]
fn criterion_05_gradient_suite() {
    let lines = checks::gradcheck_report().unwrap();
    let mut worst: f64 = 0.0;
    for line in &lines {
        assert!(
            line.pass,
            "{}: max relative error {:.3e} >= {:.0e}",
            line.name, line.value, line.threshold
        );
        worst = worst.max(line.value);
    }
    println!(
        "[PASS] criterion 5: {} gradient checks, worst relative error {worst:.2e} < 1e-4",
        lines.len()
    );
}

fn trained_ncc_config(n: usize, seed: u64, tta_iters: usize) -> NccConfig {
    let alphas = vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02];
    let ladder = AlphaLadder::new(alphas[..n].to_vec()).unwrap();
    let mut cfg = NccConfig::new(ladder, 1);
    cfg.encoder = small_encoder(n, 16, 16);
    cfg.window = 10;
    cfg.lambdas = [1.0, 0.2, 0.02, 1.0];
    cfg.stages_initial = [30, 15, 15];
    cfg.stages_retrain = [4, 2, 2];
    cfg.retrain_interval = Some(25);
    cfg.batch_cap = 16;
    cfg.tta.max_iters = tta_iters;
    cfg.seed = seed;
    cfg
}

/// Criterion 6: the pre-conformalization ladder is structurally monotone
/// for every parameter draw, and test-time adaptation keeps the emitted
/// ladders consistent end to end.
#[test]
fn criterion_06_structural_monotonicity_and_tta() {
    // 1000 random parameter draws
    let cfg = small_encoder(7, 8, 4);
    let mut violations = 0usize;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = conformal_control::neural::init_params(&cfg, &mut rng).unwrap();
        let mut input_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
        let input = conformal_control::neural::PredictorInput {
            err_seq: (0..4).map(|_| (0..7).map(|_| input_rng.random_range(0.0..1.0)).collect()).collect(),
            q_seq: (0..4).map(|_| (0..7).map(|_| input_rng.random_range(-2.0..2.0)).collect()).collect(),
            s_seq: (0..4).map(|_| vec![input_rng.random_range(0.0..3.0)]).collect(),
            views: vec![(0..4).map(|_| vec![input_rng.random_range(-3.0..3.0)]).collect()],
            static_feats: vec![input_rng.random_range(0.0..1.0)],
        };
        let (ladder, _) = conformal_control::neural::predictor_values(&store, &cfg, &input).unwrap();
        if ladder.iter().any(|&q| q < 0.0) || ladder.windows(2).any(|w| w[0] > w[1]) {
            violations += 1;
        }
    }
    assert_eq!(violations, 0, "{violations} of 1000 parameter draws broke monotonicity");

    // end-to-end: TTA keeps the unsorted stream consistent
    let mut dcs_with = Vec::new();
    let mut dcs_without = Vec::new();
    for seed in 1..=2u64 {
        let data = synth(&ar_shift_recipe(1500, 500 + seed)).unwrap();
        let series = &data.regions[0].y;
        for (tta, out_vec) in [(50usize, &mut dcs_with), (0usize, &mut dcs_without)] {
            let cfg = trained_ncc_config(11, seed, tta);
            let mut controller = NccController::new(cfg).unwrap();
            let mut forecaster = ArForecaster::new(4, 1e-3).unwrap();
            let out = drive(series, &[], &mut forecaster, &mut controller, 100, 1).unwrap();
            out_vec.push(metrics::dcs(&out.records).unwrap());
        }
    }
    for (with, without) in dcs_with.iter().zip(&dcs_without) {
        assert!(*with >= 0.99, "DCS with TTA = {with:.4} < 0.99");
        assert!(without <= with, "disabling TTA raised DCS: {without:.4} > {with:.4}");
    }
    println!(
        "[PASS] criterion 6: 0/1000 monotonicity violations; DCS with TTA {:?} >= 0.99 and >= without {:?}",
        dcs_with, dcs_without
    );
}

/// Criterion 7: metric oracles — the WIS hand value, exact calibration,
/// CRPS two-route agreement, and DCS of sorted streams.
#[test]
fn criterion_07_metric_oracles() {
    // WIS hand example is exactly 1/3
    let ladder = AlphaLadder::new(vec![0.5]).unwrap();
    let wis = metrics::wis(
        0.0,
        0.0,
        &[conformal_control::core::Interval::Range { lo: -1.0, hi: 1.0 }],
        &ladder,
    )
    .unwrap();
    assert_eq!(wis, 1.0 / 3.0, "WIS hand example: {wis}");

    // perfectly calibrated records give CS = 0 within 1e-12
    let ladder2 = AlphaLadder::new(vec![0.5, 0.1]).unwrap();
    let mut records = Vec::new();
    for t in 0..100 {
        let q0 = if t < 50 { 10.0 } else { -1.0 };
        let q1 = if t < 90 { 10.0 } else { -1.0 };
        let lad = QuantileLadder::conformalized(vec![q0, q1], vec![0.0, 0.0]).unwrap();
        records.push(StepRecord::resolve(t + 1, 0.5, 0.0, 1, lad).unwrap());
    }
    let cs = metrics::calibration_score(&records, &ladder2).unwrap();
    assert!(cs < 1e-12, "CS of calibrated records = {cs:.3e}");

    // CRPS: pinball average against exact step-CDF integration, 100 cases
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mu = rng.random_range(-2.0..2.0);
        let sigma = rng.random_range(0.3..3.0);
        let y = mu + sigma * rng.random_range(-2.5..2.5);
        let levels: Vec<f64> = (1..=99).map(|k| (k as f64 - 0.5) / 99.0).collect();
        let values: Vec<f64> = levels
            .iter()
            .map(|&p| mu + sigma * checks::inverse_normal_cdf(p))
            .collect();
        let pinball = metrics::crps(y, &levels, &values).unwrap();
        let integral = checks::step_cdf_crps(y, &values);
        let rel = (pinball - integral).abs() / integral.abs().max(1e-12);
        worst = worst.max(rel);
        assert!(rel < 1e-3, "CRPS routes disagree: {pinball} vs {integral} (rel {rel:.2e})");
    }

    // DCS of any sorted stream is exactly 1.0
    let ladder3 = AlphaLadder::new(vec![0.9, 0.5, 0.1]).unwrap();
    let mut stream = Vec::new();
    for t in 0..50 {
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..3.0)).collect();
        let lad = QuantileLadder::conformalized(q, vec![0.0; 3]).unwrap();
        stream.push(StepRecord::resolve(t + 1, rng.random_range(-1.0..1.0), 0.0, 1, lad).unwrap());
    }
    let sorted = sorted_records(&stream, &ladder3).unwrap();
    let dcs = metrics::dcs(&sorted).unwrap();
    assert_eq!(dcs, 1.0, "DCS of sorted stream = {dcs}");
    println!("[PASS] criterion 7: WIS = 1/3 exact; CS = 0; CRPS routes within {worst:.2e}; sorted DCS = 1.0");
}

/// Criterion 8: stage-1 training drives the predicted quantile to the
/// empirical median of i.i.d. folded-normal scores.
#[test]
fn criterion_08_stage1_quantile_learning() {
    let ladder = AlphaLadder::new(vec![0.5]).unwrap();
    let mut cfg = NccConfig::new(ladder, 1);
    cfg.encoder = small_encoder(1, 8, 4);
    cfg.stages_initial = [0, 0, 0];
    cfg.retrain_interval = None;
    cfg.tta.max_iters = 0;
    cfg.lr = 3e-2;
    cfg.batch_cap = 64;
    cfg.seed = 3;
    let mut controller = NccController::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut scores = Vec::new();
    for t in 0..1000 {
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
    controller.train([200, 0, 0]).unwrap();
    let mut sorted = scores.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let median = 0.5 * (sorted[499] + sorted[500]);

    controller.push_forecast(0.0);
    let (_, ladder_out) = controller.ncc_step(rng.sample::<f64, _>(rand_distr::StandardNormal).abs()).unwrap();
    // the raw network quantile, before any conformalization delta
    let q_raw = ladder_out.q_raw[0];
    let gap = (q_raw - median).abs();
    assert!(
        gap < 0.1,
        "stage-1 quantile {q_raw:.4} strays {gap:.4} from the empirical median {median:.4}"
    );
    println!(
        "[PASS] criterion 8: stage-1 quantile {q_raw:.4} within {gap:.4} of the empirical median {median:.4} (folded-normal ~0.6745)"
    );
}

/// Criterion 9: directional replication — C-PID trades consistency for
/// adaptivity while the neural controller keeps both, and its sorted
/// calibration beats split conformal under shift.
#[test]
fn criterion_09_directional_replication() {
    let ladder = AlphaLadder::new(vec![
        0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02,
    ])
    .unwrap();
    let mut cpid_low_dcs = 0usize;
    let mut ncc_high_dcs = 0usize;
    let mut ncc_beats_splitcp = 0usize;
    let seeds = 4u64;
    for seed in 1..=seeds {
        let data = synth(&ar_shift_recipe(2000, 900 + seed)).unwrap();
        let series = &data.regions[0].y;

        // C-PID, unsorted consistency
        let mut cpid = CpidController::new_scale_relative(ladder.clone(), 0.1, 1.0, 1.0).unwrap();
        let mut forecaster = ArForecaster::new(4, 1e-3).unwrap();
        let cpid_out = drive(series, &[], &mut forecaster, &mut cpid, 100, 1).unwrap();
        let cpid_dcs = metrics::dcs(&cpid_out.records).unwrap();
        if cpid_dcs < 0.5 {
            cpid_low_dcs += 1;
        }

        // NCC with TTA, unsorted consistency
        let cfg = trained_ncc_config(11, seed, 50);
        let mut ncc = NccController::new(cfg).unwrap();
        let mut forecaster = ArForecaster::new(4, 1e-3).unwrap();
        let ncc_out = drive(series, &[], &mut forecaster, &mut ncc, 100, 1).unwrap();
        let ncc_dcs = metrics::dcs(&ncc_out.records).unwrap();
        if ncc_dcs >= 0.99 {
            ncc_high_dcs += 1;
        }

        // sorted-CS comparison against split conformal
        let mut split = SplitCpController::new(ladder.clone());
        let mut forecaster = ArForecaster::new(4, 1e-3).unwrap();
        let split_out = drive(series, &[], &mut forecaster, &mut split, 100, 1).unwrap();
        let ncc_sorted = sorted_records(&ncc_out.records, &ladder).unwrap();
        let split_sorted = sorted_records(&split_out.records, &ladder).unwrap();
        let ncc_cs = metrics::calibration_score(&ncc_sorted, &ladder).unwrap();
        let split_cs = metrics::calibration_score(&split_sorted, &ladder).unwrap();
        if ncc_cs <= split_cs {
            ncc_beats_splitcp += 1;
        }
        println!(
            "  seed {seed}: cpid DCS {cpid_dcs:.3}, ncc DCS {ncc_dcs:.3}, sorted CS ncc {ncc_cs:.4} vs splitcp {split_cs:.4}"
        );
    }
    assert!(cpid_low_dcs >= 3, "C-PID DCS < 0.5 in only {cpid_low_dcs}/4 seeds");
    assert!(ncc_high_dcs >= 3, "NCC DCS >= 0.99 in only {ncc_high_dcs}/4 seeds");
    assert!(
        ncc_beats_splitcp >= 3,
        "sorted CS(NCC) <= CS(split-CP) in only {ncc_beats_splitcp}/4 seeds"
    );
    println!(
        "[PASS] criterion 9: cpid low-DCS {cpid_low_dcs}/4, ncc high-DCS {ncc_high_dcs}/4, ncc sorted-CS wins {ncc_beats_splitcp}/4"
    );
}

/// Criterion 10: pretraining on source regions improves early calibration
/// on a fresh target region.
#[test]
fn criterion_10_few_shot_transfer() {
    let mut warm_wins = 0usize;
    let seeds = 4u64;
    for seed in 1..=seeds {
        let mut recipe = ar_shift_recipe(600, 40 + seed);
        recipe.regions = 9;
        recipe.region_spread = 3.0;
        let data = synth(&recipe).unwrap();
        let target_index = 8usize;

        let ladder = AlphaLadder::new(vec![0.5, 0.2, 0.1]).unwrap();
        let make_cfg = |seed: u64| {
            let mut cfg = NccConfig::new(ladder.clone(), 1);
            cfg.encoder = small_encoder(3, 16, 8);
            cfg.encoder.static_dim = 1 + 9;
            cfg.static_feats = {
                let mut v = vec![0.0; 9];
                v[target_index] = 1.0;
                v
            };
            cfg.stages_initial = [0, 0, 0];
            cfg.retrain_interval = None;
            cfg.tta.max_iters = 50;
            cfg.seed = seed;
            cfg
        };

        // pretraining material from the eight source regions
        let mut sources = Vec::new();
        for (ri, region) in data.regions.iter().enumerate() {
            if ri == target_index {
                continue;
            }
            let mut forecaster = ArForecaster::new(4, 1e-3).unwrap();
            let (ys, scores) =
                harness::collect_scores(&region.y, &mut forecaster, 1).unwrap();
            let mut onehot = vec![0.0; 9];
            onehot[ri] = 1.0;
            sources.push(RegionSeries { ys, scores, static_feats: onehot });
        }
        let params = pretrain(&make_cfg(seed), &sources, 150).unwrap();

        let target = &data.regions[target_index];
        let eval = |controller: &mut NccController| -> f64 {
            let mut forecaster = ArForecaster::new(4, 1e-3).unwrap();
            let out: RunOutput =
                drive(&target.y, &[], &mut forecaster, controller, 10, 1).unwrap();
            let first = &out.records[..20.min(out.records.len())];
            metrics::calibration_score(first, &ladder).unwrap()
        };
        let mut warm = NccController::with_params(make_cfg(seed), params).unwrap();
        let mut cold = NccController::new(make_cfg(seed)).unwrap();
        let warm_cs = eval(&mut warm);
        let cold_cs = eval(&mut cold);
        println!("  seed {seed}: warm CS {warm_cs:.4}, cold CS {cold_cs:.4}");
        if warm_cs <= cold_cs {
            warm_wins += 1;
        }
    }
    assert!(warm_wins >= 3, "warm start beat cold start in only {warm_wins}/4 seeds");
    println!("[PASS] criterion 10: warm-start CS <= cold-start CS in {warm_wins}/4 seeds");
}

/// Criterion 11: truncate-and-replay reproduces record prefixes bit-exactly
/// and two identically seeded pipeline runs emit byte-identical files.
#[test]
fn criterion_11_replay_determinism() {
    // truncate and replay with retraining enabled
    let data = synth(&ar_shift_recipe(400, 77)).unwrap();
    let series = &data.regions[0].y;
    let make = || {
        let ladder = AlphaLadder::new(vec![0.5, 0.1]).unwrap();
        let mut cfg = NccConfig::new(ladder, 1);
        cfg.encoder = small_encoder(2, 8, 8);
        cfg.stages_initial = [5, 3, 3];
        cfg.stages_retrain = [2, 1, 1];
        cfg.retrain_interval = Some(20);
        cfg.batch_cap = 8;
        cfg.seed = 5;
        cfg
    };
    let full = {
        let mut controller = NccController::new(make()).unwrap();
        let mut forecaster = ArForecaster::new(3, 1e-3).unwrap();
        drive(series, &[], &mut forecaster, &mut controller, 60, 1).unwrap()
    };
    let cut = 300;
    let short = {
        let mut controller = NccController::new(make()).unwrap();
        let mut forecaster = ArForecaster::new(3, 1e-3).unwrap();
        drive(&series[..cut], &[], &mut forecaster, &mut controller, 60, 1).unwrap()
    };
    assert_eq!(short.records.len(), cut - 60 - 1);
    for (a, b) in short.records.iter().zip(&full.records) {
        assert_eq!(a, b, "replay diverged at t = {}", a.t);
    }

    // byte-identical pipeline outputs
    let toml = |dir: &std::path::Path| {
        format!(
            r#"
name = "det"

[dataset.synthetic]
kind = "ar-shift"
length = 400
seed = 11
changepoints = [200]

[run]
method = "ncc"
alphas = [0.5, 0.1]
warmup = 60
seeds = [1, 2]

[forecaster]
kind = "ar"
ar_order = 3

[ncc]
hidden = 8
heads = 2
context_window = 8
head_hidden = 8
stages_initial = [5, 3, 3]
stages_retrain = [2, 1, 1]
retrain_interval = 20
batch_cap = 8

[output]
dir = "{}"
"#,
            dir.display()
        )
    };
    let tmp1 = tempfile::tempdir().unwrap();
    let tmp2 = tempfile::tempdir().unwrap();
    let cfg1 =
        conformal_control::harness::ExperimentConfig::from_toml(&toml(tmp1.path())).unwrap();
    let cfg2 =
        conformal_control::harness::ExperimentConfig::from_toml(&toml(tmp2.path())).unwrap();
    let a = harness::run(&cfg1, false).unwrap();
    let b = harness::run(&cfg2, false).unwrap();
    for (pa, pb) in a.results_paths.iter().zip(&b.results_paths) {
        assert_eq!(
            std::fs::read(pa).unwrap(),
            std::fs::read(pb).unwrap(),
            "results differ between identical runs"
        );
    }
    assert_eq!(
        std::fs::read(&a.metrics_path).unwrap(),
        std::fs::read(&b.metrics_path).unwrap()
    );
    println!("[PASS] criterion 11: truncated replay is bit-exact and identical seeds give byte-identical output files");
}
