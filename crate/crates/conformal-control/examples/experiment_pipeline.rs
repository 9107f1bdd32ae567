//! The full experiment pipeline driven from a config: synthetic dataset,
//! two methods, JSONL results, metrics CSVs, and the merged comparison
//! table. Mirrors what the `ncc` CLI does.
//!
//! Run with: cargo run --release --example experiment_pipeline

use conformal_control::harness::{report, run, ExperimentConfig};

fn main() -> conformal_control::Result<()> {
    let out_dir = std::path::Path::new("target/pipeline-demo");
    std::fs::create_dir_all(out_dir)?;
    let base = |method: &str| {
        format!(
            r#"
name = "demo"

[dataset.synthetic]
kind = "ar-shift"
length = 1200
seed = 5
changepoints = [400, 800]
seg_mean = [0.0, 5.0, -2.0]
seg_var = [1.0, 3.0, 1.0]
seg_ar = [0.6, 0.6, 0.6]

[run]
method = "{method}"
alphas = [0.5, 0.3, 0.2, 0.1, 0.05]
warmup = 100
seeds = [1, 2]

[forecaster]
kind = "ar"
ar_order = 4

[ncc]
hidden = 16
heads = 2
context_window = 16
head_hidden = 16
stages_initial = [20, 10, 10]
stages_retrain = [3, 2, 2]
retrain_interval = 40
batch_cap = 16
lambdas = [1.0, 0.2, 0.02, 1.0]

[output]
dir = "{}"
"#,
            out_dir.display()
        )
    };

    let mut metric_files = Vec::new();
    for method in ["splitcp", "ncc"] {
        let config = ExperimentConfig::from_toml(&base(method))?;
        println!("running method '{method}'...");
        let artifacts = run(&config, false)?;
        println!("  {} results files, metrics at {}", artifacts.results_paths.len(), artifacts.metrics_path.display());
        metric_files.push(artifacts.metrics_path);
    }

    let table = out_dir.join("comparison.csv");
    report(&metric_files, &table)?;
    println!("\ncomparison table ({}):", table.display());
    print!("{}", std::fs::read_to_string(&table)?);
    Ok(())
}
