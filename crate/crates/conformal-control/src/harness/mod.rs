//! Experiment harness: configuration, synthetic data, CSV ingestion,
//! orchestration across (dataset x method x seed) cells, and
//! machine-readable result emission.

pub mod config;
pub mod ingest;
pub mod report;
pub mod run;
pub mod synth;

pub use config::{ExperimentConfig, MethodName, SyntheticRecipe};
pub use ingest::{ingest, Dataset, RegionData};
pub use report::report;
pub use run::{collect_scores, run, sorted_records, RunArtifacts};
pub use synth::{synth, synth_to_csv};
