//! CSV ingestion: `t,y[,region][,view:<name>...]` with strictly increasing
//! time per region. View columns become named sequence views aligned with
//! the series.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One region's series plus named auxiliary views.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionData {
    pub id: String,
    pub t: Vec<i64>,
    pub y: Vec<f64>,
    pub views: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    /// Regions in first-appearance order.
    pub regions: Vec<RegionData>,
}

impl Dataset {
    pub fn region(&self, id: &str) -> Option<&RegionData> {
        self.regions.iter().find(|r| r.id == id)
    }

    /// Sorted view names (identical across regions by construction).
    pub fn view_names(&self) -> Vec<String> {
        self.regions
            .first()
            .map(|r| r.views.keys().cloned().collect())
            .unwrap_or_default()
    }
}

pub fn ingest(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    ingest_from(file, &path.display().to_string())
}

pub fn ingest_from<R: Read>(reader: R, label: &str) -> Result<Dataset> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = csv_reader
        .headers()
        .map_err(|e| Error::DataFormat(format!("{label}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.len() < 2 || headers[0] != "t" || headers[1] != "y" {
        return Err(Error::DataFormat(format!(
            "{label}: header must start with t,y — got {}",
            headers.join(",")
        )));
    }
    let mut region_col = None;
    let mut view_cols = Vec::new();
    for (i, h) in headers.iter().enumerate().skip(2) {
        if h == "region" {
            if region_col.is_some() {
                return Err(Error::DataFormat(format!("{label}: duplicate region column")));
            }
            region_col = Some(i);
        } else if let Some(name) = h.strip_prefix("view:") {
            if name.is_empty() {
                return Err(Error::DataFormat(format!(
                    "{label}: view column {i} has an empty name"
                )));
            }
            view_cols.push((i, name.to_string()));
        } else {
            return Err(Error::DataFormat(format!(
                "{label}: unexpected column '{h}' (want region or view:<name>)"
            )));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut regions: BTreeMap<String, RegionData> = BTreeMap::new();
    for (idx, row) in csv_reader.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| Error::DataFormat(format!("{label}:{line}: {e}")))?;
        if row.len() != headers.len() {
            return Err(Error::DataFormat(format!(
                "{label}:{line}: expected {} columns, got {}",
                headers.len(),
                row.len()
            )));
        }
        let t: i64 = row[0].trim().parse().map_err(|_| {
            Error::DataFormat(format!("{label}:{line}: column t is not an integer"))
        })?;
        let y: f64 = row[1].trim().parse().map_err(|_| {
            Error::DataFormat(format!("{label}:{line}: column y is not a number"))
        })?;
        if !y.is_finite() {
            return Err(Error::DataFormat(format!("{label}:{line}: column y is not finite")));
        }
        let region_id = match region_col {
            Some(i) => row[i].trim().to_string(),
            None => "r0".to_string(),
        };
        let entry = regions.entry(region_id.clone()).or_insert_with(|| {
            order.push(region_id.clone());
            RegionData {
                id: region_id.clone(),
                t: Vec::new(),
                y: Vec::new(),
                views: view_cols.iter().map(|(_, n)| (n.clone(), Vec::new())).collect(),
            }
        });
        if let Some(&last) = entry.t.last() {
            if t <= last {
                return Err(Error::DataFormat(format!(
                    "{label}:{line}: t must be strictly increasing within region '{region_id}' ({t} after {last})"
                )));
            }
        }
        entry.t.push(t);
        entry.y.push(y);
        for (col, name) in &view_cols {
            let v: f64 = row[*col].trim().parse().map_err(|_| {
                Error::DataFormat(format!(
                    "{label}:{line}: view column '{name}' is not a number"
                ))
            })?;
            entry.views.get_mut(name).expect("view registered").push(v);
        }
    }
    if regions.is_empty() {
        return Err(Error::EmptyInput(format!("{label}: no data rows")));
    }
    let regions = order
        .into_iter()
        .map(|id| regions.remove(&id).expect("ordered region exists"))
        .collect();
    Ok(Dataset { regions })
}

/// Writes a dataset back out in the ingestion schema (region column present
/// only when there are several regions; view columns sorted by name).
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let multi = dataset.regions.len() > 1;
    let view_names = dataset.view_names();
    let mut header = vec!["t".to_string(), "y".to_string()];
    if multi {
        header.push("region".to_string());
    }
    header.extend(view_names.iter().map(|n| format!("view:{n}")));
    w.write_record(&header)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for region in &dataset.regions {
        for i in 0..region.t.len() {
            let mut row = vec![region.t[i].to_string(), fmt_float(region.y[i])];
            if multi {
                row.push(region.id.clone());
            }
            for name in &view_names {
                row.push(fmt_float(region.views[name][i]));
            }
            w.write_record(&row)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip float formatting (what `Display` gives for f64).
fn fmt_float(v: f64) -> String {
    format!("{v}")
}
