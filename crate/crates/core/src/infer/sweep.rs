use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::pipeline::{infill, FlowSettings};
use crate::error::Result;
use crate::eval::lsd;
use crate::fmse::Fmse;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub nfe: Vec<usize>,
    pub cfg_strength: Vec<f64>,
    pub sway: Vec<f64>,
    /// Timed repetitions per cell; the median is reported.
    pub repeats: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            nfe: vec![1, 2, 4, 8, 16, 32],
            cfg_strength: vec![0.0, 0.25, 0.5, 1.0, 2.0],
            sway: vec![0.0, -0.5, -1.0],
            repeats: 1,
        }
    }
}

/// Raw log-mels and conditioning tokens of one evaluation item.
#[derive(Debug, Clone)]
pub struct SweepItem {
    pub id: String,
    pub clean_mel: Array2<f64>,
    pub degraded_mel: Array2<f64>,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub item: String,
    pub nfe: usize,
    pub cfg_strength: f64,
    pub sway: f64,
    pub lsd: f64,
    /// Median wall-clock of the flow-generation stage, milliseconds.
    pub flow_ms: f64,
}

/// Run every grid cell on every item.
pub fn run_sweep(model: &Fmse, items: &[SweepItem], grid: &SweepGrid, seed: u64) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &nfe in &grid.nfe {
        for &cfg_strength in &grid.cfg_strength {
            for &sway in &grid.sway {
                let settings = FlowSettings {
                    nfe,
                    cfg_strength,
                    sway,
                    seed,
                    ..FlowSettings::default()
                };
                for item in items {
                    let mut times = Vec::with_capacity(grid.repeats.max(1));
                    let mut mel = None;
                    for _ in 0..grid.repeats.max(1) {
                        let t0 = Instant::now();
                        mel = Some(infill(model, &item.degraded_mel, &item.tokens, None, false, &settings)?);
                        times.push(t0.elapsed().as_secs_f64() * 1e3);
                    }
                    times.sort_by(f64::total_cmp);
                    rows.push(SweepRow {
                        item: item.id.clone(),
                        nfe,
                        cfg_strength,
                        sway,
                        lsd: lsd(&item.clean_mel, &mel.expect("at least one repeat"))?,
                        flow_ms: times[times.len() / 2],
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
