use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Metrics that need external scoring models; present in every report as
/// not-applicable so outside scorers can fill them in.
pub const RESERVED_METRICS: [&str; 6] = ["pesq", "dnsmos", "nisqa", "speechbertscore", "sim_o", "dwer"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FileMetrics {
    pub id: String,
    /// `None` marks a metric as not applicable.
    pub metrics: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub files: Vec<FileMetrics>,
    pub aggregate: BTreeMap<String, Option<f64>>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, metrics: BTreeMap<String, f64>) {
        let mut m: BTreeMap<String, Option<f64>> = metrics
            .into_iter()
            .map(|(k, v)| (k, v.is_finite().then_some(v)))
            .collect();
        for r in RESERVED_METRICS {
            m.entry(r.to_string()).or_insert(None);
        }
        self.files.push(FileMetrics { id: id.into(), metrics: m });
    }

    /// Mean of each metric over the files where it is defined.
    pub fn finalize(&mut self) {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for f in &self.files {
            for (k, v) in &f.metrics {
                let e = sums.entry(k.clone()).or_insert((0.0, 0));
                if let Some(v) = v {
                    e.0 += v;
                    e.1 += 1;
                }
            }
        }
        self.aggregate = sums
            .into_iter()
            .map(|(k, (s, n))| (k, (n > 0).then(|| s / n as f64)))
            .collect();
    }

    fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self.files.iter().flat_map(|f| f.metrics.keys().cloned()).collect();
        cols.sort();
        cols.dedup();
        cols
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// One row per file plus a final `mean` row; undefined values are `NA`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let cols = self.columns();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string()];
        header.extend(cols.iter().cloned());
        w.write_record(&header)?;
        let fmt = |v: Option<&Option<f64>>| match v {
            Some(Some(x)) => format!("{x:.6}"),
            _ => "NA".to_string(),
        };
        for f in &self.files {
            let mut row = vec![f.id.clone()];
            row.extend(cols.iter().map(|c| fmt(f.metrics.get(c))));
            w.write_record(&row)?;
        }
        let mut row = vec!["mean".to_string()];
        row.extend(cols.iter().map(|c| fmt(self.aggregate.get(c))));
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }
}
