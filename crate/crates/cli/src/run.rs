use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xil_core::experiment::{probe_heatmaps, ExperimentManifest};
use xil_core::explain::write_heatmaps_csv;
use xil_core::session::{run_xil, RunStatus, Session, SimulatedOracle};
use xil_core::spray::{run_spray_records, ClusterReport};

use crate::svg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub labeled: usize,
    pub queries: usize,
    pub lambda1: f64,
    pub clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, sd }
    }
}

/// `summary.json`. Contains no timings, so reruns compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub strategy: String,
    pub seeds: Vec<SeedOutcome>,
    pub failed: Vec<SeedFailure>,
    pub train_accuracy: MeanSd,
    pub test_accuracy: MeanSd,
}

impl Summary {
    pub fn ok(&self) -> bool {
        self.failed.is_empty()
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn run_seed(manifest: &ExperimentManifest, seed: u64, base_dir: &Path, dir: &Path) -> Result<SeedOutcome> {
    let spec = manifest.session_spec(seed, base_dir)?;
    let mut session = Session::start(spec, base_dir.to_path_buf())?;
    fs::create_dir_all(dir)?;
    // a rerun into the same directory starts a fresh log
    let log = dir.join("feedback.jsonl");
    if log.exists() {
        fs::remove_file(&log)?;
    }
    session.persist_to(dir)?;
    let mut oracle = SimulatedOracle::new(session.train_set());
    if run_xil(&mut session, &mut oracle)? != RunStatus::Finished {
        anyhow::bail!("simulated oracle stopped early");
    }
    session.checkpoint()?;

    let records = probe_heatmaps(session.model(), session.test_set(), manifest.probe)?;
    // own directory, so `xil spray <seed-dir>/heatmaps` sees nothing else
    fs::create_dir_all(dir.join("heatmaps"))?;
    write_heatmaps_csv(&dir.join("heatmaps").join("probe.csv"), &records)?;
    let clusters = run_spray_records(&records, &manifest.spray)?;
    write_clusters(dir, &clusters)?;

    let metrics = session.metrics();
    let series = vec![
        ("train".to_string(), metrics.iter().map(|m| (m.labeled as f64, m.train_accuracy)).collect()),
        ("test".to_string(), metrics.iter().map(|m| (m.labeled as f64, m.test_accuracy)).collect()),
    ];
    fs::write(
        dir.join("accuracy.svg"),
        svg::line_chart(&format!("{} seed {seed}", manifest.name), "labeled instances", "accuracy", &series),
    )?;
    let last = metrics.last().context("no metrics recorded")?;
    Ok(SeedOutcome {
        seed,
        train_accuracy: last.train_accuracy,
        test_accuracy: last.test_accuracy,
        labeled: last.labeled,
        queries: session.step(),
        lambda1: last.lambda1,
        clusters: clusters.k,
    })
}

/// `clusters.json` plus a t-SNE scatter.
pub fn write_clusters(dir: &Path, report: &ClusterReport) -> Result<()> {
    fs::write(dir.join("clusters.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(
        dir.join("tsne.svg"),
        svg::scatter(&format!("{} strategy clusters", report.k), &report.tsne_coords, &report.labels),
    )?;
    Ok(())
}

/// Runs every seed with the simulated oracle (in parallel on `threads`
/// workers, default all cores) and writes per-seed directories plus merged
/// `summary.json`, `accuracy.md` and `accuracy.svg` under `out`.
pub fn run_experiment(manifest: &ExperimentManifest, base_dir: &Path, out: &Path, threads: Option<usize>) -> Result<Summary> {
    manifest.validate()?;
    fs::create_dir_all(out)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build()?;
    let results: Vec<(u64, Result<SeedOutcome>)> = pool.install(|| {
        manifest
            .seeds
            .par_iter()
            .map(|&seed| {
                log::info!("{}: seed {seed} started", manifest.name);
                let r = run_seed(manifest, seed, base_dir, &seed_dir(out, seed));
                match &r {
                    Ok(o) => log::info!("{}: seed {seed} test accuracy {:.3}", manifest.name, o.test_accuracy),
                    Err(e) => log::error!("{}: seed {seed} failed: {e:#}", manifest.name),
                }
                (seed, r)
            })
            .collect()
    });

    let mut seeds = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(o) => seeds.push(o),
            Err(e) => failed.push(SeedFailure { seed, error: format!("{e:#}") }),
        }
    }
    let train: Vec<f64> = seeds.iter().map(|s| s.train_accuracy).collect();
    let test: Vec<f64> = seeds.iter().map(|s| s.test_accuracy).collect();
    let summary = Summary {
        name: manifest.name.clone(),
        strategy: manifest.strategy.name(),
        train_accuracy: MeanSd::of(&train),
        test_accuracy: MeanSd::of(&test),
        seeds,
        failed,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    fs::write(out.join("accuracy.md"), accuracy_table(&summary))?;
    let series: Vec<(String, Vec<(f64, f64)>)> = summary
        .seeds
        .iter()
        .filter_map(|s| {
            let pts = xil_core::session::read_metrics_csv(&seed_dir(out, s.seed).join("metrics.csv")).ok()?;
            Some((format!("seed {}", s.seed), pts.iter().map(|m| (m.labeled as f64, m.test_accuracy)).collect()))
        })
        .collect();
    fs::write(
        out.join("accuracy.svg"),
        svg::line_chart(&format!("{} test accuracy", manifest.name), "labeled instances", "accuracy", &series),
    )?;
    Ok(summary)
}

/// Markdown table of final accuracies, mean ± sd over seeds.
pub fn accuracy_table(summary: &Summary) -> String {
    let pct = |m: MeanSd| format!("{:.1} ± {:.1}", 100.0 * m.mean, 100.0 * m.sd);
    let mut s = format!(
        "| experiment | strategy | seeds | train % | test % |\n|---|---|---|---|---|\n| {} | {} | {} | {} | {} |\n",
        summary.name,
        summary.strategy,
        summary.seeds.len(),
        pct(summary.train_accuracy),
        pct(summary.test_accuracy)
    );
    if !summary.failed.is_empty() {
        s.push_str("\nFailed seeds:\n");
        for f in &summary.failed {
            s.push_str(&format!("- {}: {}\n", f.seed, f.error));
        }
    }
    s
}
