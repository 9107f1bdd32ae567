//! Command-line driver: experiment runs, synthetic data generation,
//! comparison tables, and the built-in verification suites.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use conformal_control::checks;
use conformal_control::error::Error;
use conformal_control::harness::config::{ExperimentConfig, SynthKind, SyntheticRecipe};
use conformal_control::harness::{report, run, synth_to_csv};

#[derive(Parser)]
#[command(
    name = "ncc",
    about = "Online conformal prediction for time series: neural conformal control and baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run(RunArgs),
    /// Generate a synthetic series CSV.
    Synth(SynthArgs),
    /// Merge metrics CSVs into a wide comparison table.
    Report(ReportArgs),
    /// Run the gradient-check suite over losses and network blocks.
    Gradcheck,
    /// Run the property self-test suites.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Apply the sorted-comparison protocol before metrics.
    #[arg(long)]
    sorted: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// ar-shift | seasonal-burst | iid-gauss
    #[arg(long)]
    kind: String,
    /// Series length.
    #[arg(long = "T")]
    length: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    regions: usize,
    /// Comma-separated changepoint indices.
    #[arg(long, value_delimiter = ',')]
    changepoints: Vec<usize>,
    /// Per-segment means (one more entry than changepoints).
    #[arg(long, value_delimiter = ',')]
    seg_mean: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    seg_var: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    seg_ar: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    period: usize,
    #[arg(long, default_value_t = 2.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 2.0)]
    region_spread: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSVs produced by `run`.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_kind(kind: &str) -> Result<SynthKind, Error> {
    match kind {
        "ar-shift" => Ok(SynthKind::ArShift),
        "seasonal-burst" => Ok(SynthKind::SeasonalBurst),
        "iid-gauss" => Ok(SynthKind::IidGauss),
        other => Err(Error::Config(format!(
            "unknown synthetic kind '{other}' (want ar-shift, seasonal-burst or iid-gauss)"
        ))),
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => {
            let config = ExperimentConfig::from_path(&args.config)?;
            let artifacts = run(&config, args.sorted)?;
            for path in &artifacts.results_paths {
                println!("results {}", path.display());
            }
            println!("metrics {}", artifacts.metrics_path.display());
            Ok(())
        }
        Command::Synth(args) => {
            let recipe = SyntheticRecipe {
                kind: parse_kind(&args.kind)?,
                length: args.length,
                seed: args.seed,
                regions: args.regions,
                changepoints: args.changepoints,
                seg_mean: args.seg_mean,
                seg_var: args.seg_var,
                seg_ar: args.seg_ar,
                period: args.period,
                amplitude: args.amplitude,
                region_spread: args.region_spread,
            };
            synth_to_csv(&recipe, &args.out)?;
            println!("wrote {}", args.out.display());
            Ok(())
        }
        Command::Report(args) => {
            report(&args.inputs, &args.out)?;
            println!("wrote {}", args.out.display());
            Ok(())
        }
        Command::Gradcheck => {
            let lines = checks::gradcheck_report()?;
            for line in &lines {
                println!(
                    "[{}] {:<28} max_rel_err {:.3e} (tol {:.0e})",
                    if line.pass { "PASS" } else { "FAIL" },
                    line.name,
                    line.value,
                    line.threshold
                );
            }
            checks::ensure_all_pass(&lines)
        }
        Command::Selftest => {
            let lines = checks::selftest_report()?;
            for line in &lines {
                println!(
                    "[{}] {:<36} value {:.3e} (tol {:.0e})",
                    if line.pass { "PASS" } else { "FAIL" },
                    line.name,
                    line.value,
                    line.threshold
                );
            }
            checks::ensure_all_pass(&lines)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.category_code().clamp(1, 255) as u8)
        }
    }
}
