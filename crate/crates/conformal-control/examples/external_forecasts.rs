//! Conformalizing an upstream model's predictions: builds an external
//! forecasts CSV (`t,tau,y_hat`), loads it through the documented schema,
//! and calibrates it with ACI without ever refitting the base model.
//!
//! Run with: cargo run --release --example external_forecasts

use conformal_control::baselines::AciController;
use conformal_control::controller::drive;
use conformal_control::core::AlphaLadder;
use conformal_control::forecasters::{load_external, ExternalForecaster};
use conformal_control::harness::config::{SynthKind, SyntheticRecipe};
use conformal_control::harness::synth;
use conformal_control::metrics;
use std::io::Write;

fn main() -> conformal_control::Result<()> {
    let recipe = SyntheticRecipe {
        kind: SynthKind::ArShift,
        length: 1200,
        seed: 9,
        regions: 1,
        changepoints: vec![600],
        seg_mean: vec![0.0, 3.0],
        seg_var: vec![1.0, 2.0],
        seg_ar: vec![0.5, 0.5],
        period: 50,
        amplitude: 2.0,
        region_spread: 2.0,
    };
    let data = synth(&recipe)?;
    let series = &data.regions[0].y;

    // stand-in for any upstream system: a damped persistence forecast
    // exported as CSV in the documented schema
    let out_dir = std::path::Path::new("target/external-demo");
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("upstream.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
        writeln!(f, "t,tau,y_hat")?;
        for t in 1..series.len() - 1 {
            for tau in [1i64, 2] {
                let y_hat = 0.8 * series[t] + 0.2 * series[t - 1];
                writeln!(f, "{t},{tau},{y_hat}")?;
            }
        }
    }

    let bundle = load_external(&csv_path)?;
    println!(
        "loaded {} forecasts over horizons {:?} from {}",
        bundle.len(),
        bundle.horizons().collect::<Vec<_>>(),
        csv_path.display()
    );

    let ladder = AlphaLadder::new(vec![0.5, 0.2, 0.1, 0.05])?;
    for tau in [1usize, 2] {
        let mut forecaster = ExternalForecaster::new(bundle.clone());
        let mut controller = AciController::new(ladder.clone(), 0.05)?;
        let out = drive(series, &[], &mut forecaster, &mut controller, 100, tau)?;
        let report = metrics::report(&out.records, &ladder)?;
        println!(
            "horizon {tau}: {} steps, CS {:.4}, WIS {:.4}, coverage@0.1 {:.4}",
            report.n_steps,
            report.cs,
            report.wis,
            report.coverage[2]
        );
    }
    Ok(())
}
