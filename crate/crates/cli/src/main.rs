use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use xil_core::experiment::ExperimentManifest;
use xil_core::spray::SprayConfig;

#[derive(Parser)]
#[command(name = "xil", version, about = "Explanatory interactive learning, headless")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment manifest with the simulated user.
    Run {
        manifest: PathBuf,
        /// Output directory [default: runs/<name>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this seed instead of the manifest's list.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for seeds run in parallel [default: all cores].
        #[arg(long)]
        threads: Option<usize>,
        /// Loop config JSON replacing the manifest's.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Cluster a directory of heatmap files (CSV or JSON).
    Spray {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Spray config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve the REST API.
    Serve {
        /// TOML service config; XIL_* environment variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Replay a persisted session and check its metrics reproduce.
    Replay {
        session: PathBuf,
        /// Where the replayed metrics.csv goes [default: <session>/replay].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn global_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            manifest,
            out,
            seed,
            threads,
            config,
        } => {
            let mut m = ExperimentManifest::load(&manifest)?;
            if let Some(s) = seed {
                m.seeds = vec![s];
            }
            if let Some(c) = config {
                m.config = Some(read_json(&c)?);
            }
            let base = manifest.parent().unwrap_or(Path::new("."));
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(&m.name));
            let summary = xil_cli::run_experiment(&m, base, &out, threads)?;
            print!("{}", xil_cli::run::accuracy_table(&summary));
            println!("wrote {}", out.display());
            if summary.ok() {
                Ok(ExitCode::SUCCESS)
            } else {
                let failed: Vec<String> = summary.failed.iter().map(|f| f.seed.to_string()).collect();
                eprintln!("failed seeds: {}", failed.join(", "));
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Spray {
            dir,
            out,
            seed,
            threads,
            config,
        } => {
            global_threads(threads)?;
            let mut c: SprayConfig = match config {
                Some(p) => read_json(&p)?,
                None => SprayConfig::default(),
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            let out = out.unwrap_or_else(|| dir.clone());
            let r = xil_cli::spray_dir(&dir, &c, &out)?;
            println!(
                "{} heatmaps, k = {}{}; wrote {}",
                r.labels.len(),
                r.k,
                if r.weak_gap { " (weak eigengap)" } else { "" },
                out.join("clusters.json").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { config, threads } => {
            global_threads(threads)?;
            let config = xil_service::ServiceConfig::load(config.as_deref())?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(xil_service::serve(config))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay { session, out } => {
            let out = out.unwrap_or_else(|| session.join("replay"));
            let r = xil_cli::replay_session(&session, &out)?;
            if r.identical {
                println!("replay reproduces metrics.csv ({} points)", r.points);
                Ok(ExitCode::SUCCESS)
            } else {
                println!("replayed metrics differ from {}", session.join("metrics.csv").display());
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
