//! Comparison tables: merges metrics CSVs from several runs into a wide
//! table with one row per (dataset, horizon) and one mean ± std cell per
//! (method, metric), aggregated across seeds and regions.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const METRICS: [&str; 4] = ["cs", "wis", "crps", "dcs"];

#[derive(Debug, Clone)]
struct MetricLine {
    dataset: String,
    method: String,
    region: String,
    horizon: String,
    values: [f64; 4],
}

fn parse_metrics_csv(path: &Path) -> Result<Vec<MetricLine>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::DataFormat(format!("{}: empty metrics file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    let expect = ["dataset", "method", "region", "horizon", "seed", "sorted", "n_steps", "cs", "wis", "crps", "dcs"];
    if cols.len() < expect.len() || cols[..expect.len()] != expect {
        return Err(Error::DataFormat(format!(
            "{}: metrics header mismatch (got '{}')",
            path.display(),
            header
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::DataFormat(format!(
                "{}:{}: expected {} fields, got {}",
                path.display(),
                i + 2,
                cols.len(),
                fields.len()
            )));
        }
        let mut values = [0.0; 4];
        for (k, v) in values.iter_mut().enumerate() {
            *v = fields[7 + k].parse().map_err(|_| {
                Error::DataFormat(format!(
                    "{}:{}: {} is not a number",
                    path.display(),
                    i + 2,
                    fields[7 + k]
                ))
            })?;
        }
        out.push(MetricLine {
            dataset: fields[0].to_string(),
            method: fields[1].to_string(),
            region: fields[2].to_string(),
            horizon: fields[3].to_string(),
            values,
        });
    }
    Ok(out)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Merges metrics CSVs into a wide comparison table at `out`:
/// rows (dataset, horizon); columns method x metric as `mean±std` cells.
pub fn report(inputs: &[std::path::PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("report needs at least one metrics file".into()));
    }
    let mut lines = Vec::new();
    for path in inputs {
        lines.extend(parse_metrics_csv(path)?);
    }
    // pooled rows are aggregates of the others; keep them out of the table
    lines.retain(|l| l.region != "pooled" && l.horizon != "pooled");

    let mut methods: Vec<String> = lines.iter().map(|l| l.method.clone()).collect();
    methods.sort();
    methods.dedup();

    type Key = (String, String);
    let mut cells: BTreeMap<Key, BTreeMap<String, Vec<[f64; 4]>>> = BTreeMap::new();
    for line in &lines {
        cells
            .entry((line.dataset.clone(), line.horizon.clone()))
            .or_default()
            .entry(line.method.clone())
            .or_default()
            .push(line.values);
    }

    let file = std::fs::File::create(out)?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = String::from("dataset,horizon");
    for method in &methods {
        for metric in METRICS {
            header.push_str(&format!(",{method}_{metric}"));
        }
    }
    writeln!(w, "{header}")?;
    for ((dataset, horizon), per_method) in &cells {
        let mut row = format!("{dataset},{horizon}");
        for method in &methods {
            match per_method.get(method) {
                Some(samples) => {
                    for k in 0..4 {
                        let vals: Vec<f64> = samples.iter().map(|s| s[k]).collect();
                        let (m, s) = mean_std(&vals);
                        row.push_str(&format!(",{m:.6}±{s:.6}"));
                    }
                }
                None => {
                    for _ in 0..4 {
                        row.push(',');
                    }
                }
            }
        }
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}
