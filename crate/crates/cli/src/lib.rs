//! Library side of the `xil` binary: experiment runs, replay checks,
//! heatmap clustering and SVG output.

pub mod run;
pub mod svg;

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use xil_core::explain::read_heatmaps_dir;
use xil_core::session::{write_metrics_csv, Session};
use xil_core::spray::{run_spray_records, ClusterReport, SprayConfig};

pub use run::{run_experiment, Summary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub points: usize,
    /// The replayed `metrics.csv` matches the persisted one byte for byte.
    pub identical: bool,
}

/// Rebuilds the session in `dir` from its feedback log, writes the
/// replayed metrics to `out/metrics.csv` and compares bytes with
/// `dir/metrics.csv`.
pub fn replay_session(dir: &Path, out: &Path) -> Result<ReplayOutcome> {
    let session = Session::replay(dir).with_context(|| format!("replaying {}", dir.display()))?;
    fs::create_dir_all(out)?;
    let replayed = out.join("metrics.csv");
    write_metrics_csv(&replayed, session.metrics())?;
    let original = fs::read(dir.join("metrics.csv")).with_context(|| format!("reading {}/metrics.csv", dir.display()))?;
    Ok(ReplayOutcome {
        points: session.metrics().len(),
        identical: fs::read(&replayed)? == original,
    })
}

/// Clusters every heatmap file in `dir`; writes `clusters.json` and
/// `tsne.svg` to `out`.
pub fn spray_dir(dir: &Path, config: &SprayConfig, out: &Path) -> Result<ClusterReport> {
    let records = read_heatmaps_dir(dir).with_context(|| format!("reading heatmaps from {}", dir.display()))?;
    anyhow::ensure!(!records.is_empty(), "no heatmaps found in {}", dir.display());
    let report = run_spray_records(&records, config)?;
    fs::create_dir_all(out)?;
    run::write_clusters(out, &report)?;
    Ok(report)
}
