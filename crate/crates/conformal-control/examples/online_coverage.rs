//! Online conformal coverage on a shifting series: drives the neural
//! conformal controller over a piecewise AR(1) synthetic with mean and
//! variance jumps, then reports per-rate empirical coverage and verifies
//! the telescoping identity behind the long-run guarantee.
//!
//! Run with: cargo run --release --example online_coverage

use conformal_control::controller::drive;
use conformal_control::core::{running_error, AlphaLadder};
use conformal_control::forecasters::ArForecaster;
use conformal_control::harness::config::{SynthKind, SyntheticRecipe};
use conformal_control::harness::synth;
use conformal_control::metrics;
use conformal_control::ncc::{NccConfig, NccController};
use conformal_control::neural::EncoderConfig;

fn main() -> conformal_control::Result<()> {
    let recipe = SyntheticRecipe {
        kind: SynthKind::ArShift,
        length: 3000,
        seed: 17,
        regions: 1,
        changepoints: vec![1000, 2000],
        seg_mean: vec![0.0, 6.0, -3.0],
        seg_var: vec![1.0, 4.0, 1.0],
        seg_ar: vec![0.6, 0.6, 0.6],
        period: 50,
        amplitude: 2.0,
        region_spread: 2.0,
    };
    let data = synth(&recipe)?;
    let series = &data.regions[0].y;
    println!("series: {} points, changepoints at 1000 and 2000", series.len());

    let alphas = vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02];
    let ladder = AlphaLadder::new(alphas.clone())?;
    let mut cfg = NccConfig::new(ladder.clone(), 1);
    cfg.encoder = EncoderConfig {
        hidden: 16,
        heads: 2,
        window: 16,
        ladder_len: alphas.len(),
        seq_views: 1,
        static_dim: 1,
        head_hidden: 16,
    };
    cfg.lambdas = [1.0, 0.2, 0.02, 1.0];
    cfg.stages_initial = [30, 15, 15];
    cfg.stages_retrain = [4, 2, 2];
    cfg.retrain_interval = Some(25);
    cfg.batch_cap = 16;
    cfg.seed = 1;
    let window = cfg.window;

    let mut controller = NccController::new(cfg)?;
    let mut forecaster = ArForecaster::new(4, 1e-3)?;
    let out = drive(series, &[], &mut forecaster, &mut controller, 100, 1)?;
    println!("resolved {} online steps\n", out.records.len());

    println!("{:>6} {:>10} {:>10}", "alpha", "coverage", "target");
    for (i, &alpha) in alphas.iter().enumerate() {
        let cov = metrics::empirical_coverage(&out.records, i)?;
        println!("{alpha:>6} {cov:>10.4} {:>10.4}", 1.0 - alpha);
    }

    // the conformalization deltas telescope into the summed running-error
    // deviations, which is what pins the long-run coverage
    let eta = controller.eta_resolved().expect("resolved after the run");
    let steps = out.records.len();
    let mut worst: f64 = 0.0;
    for (i, &alpha) in alphas.iter().enumerate() {
        let col = controller.err_column(i);
        let mut acc = 0.0;
        for t in 1..=steps {
            acc += running_error(col, t, window)? - alpha;
        }
        worst = worst.max((controller.delta()[i] - eta * acc).abs());
    }
    println!("\ntelescoping identity: max |delta - eta*sum| = {worst:.2e}");
    let report = metrics::report(&out.records, &ladder)?;
    println!(
        "metrics: CS {:.4}  WIS {:.4}  CRPS {:.4}  DCS {:.4}",
        report.cs, report.wis, report.crps, report.dcs
    );
    Ok(())
}
