use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::Result;
use crate::manifest::RunManifest;
use crate::pgm::Plane;
use crate::pipeline::{self, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "misr", version, about = "Multi-view super-resolution experiments on synthetic volumes")]
pub struct Cli {
    /// Worker threads for subject-level parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Override the configured base seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate ground-truth volumes and their low-resolution acquisitions.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct every subject from 1..=N views and score the results.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated solver names; defaults to the configured solvers.
        #[arg(long, value_delimiter = ',')]
        solver: Option<Vec<String>>,
        /// Record wall-clock times in the CSV (makes it run-dependent).
        #[arg(long)]
        timings: bool,
    },
    /// Paired runs with and without noise weighting on two mixed-scale views.
    AblateWeights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        solver: Option<Vec<String>>,
        #[arg(long)]
        timings: bool,
    },
    /// Write 8-bit PGM slices of an MVOL1 volume.
    ExportSlices {
        volume: PathBuf,
        #[arg(long, default_value = "sagittal")]
        plane: Plane,
        /// Comma-separated slice indices; defaults to the centre slice.
        #[arg(long, value_delimiter = ',')]
        positions: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a metrics or ablation CSV as a Markdown table.
    Report {
        csv: PathBuf,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Reads a run configuration, or the configuration embedded in a manifest.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match RunConfig::load(path) {
        Ok(c) => c,
        Err(e) => match RunManifest::read(path) {
            Ok(m) => m.config,
            Err(_) => return Err(e),
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    Ok(cfg)
}

/// Acquisition plane names from a solve manifest next to `csv`, if present.
fn view_names(csv: &Path) -> Vec<String> {
    let manifest = csv.parent().unwrap_or(Path::new(".")).join("manifest-solve.toml");
    RunManifest::read(&manifest)
        .map(|m| {
            m.config
                .acquisitions
                .iter()
                .map(|a| {
                    let mut n = a.plane.name().to_string();
                    n[..1].make_ascii_uppercase();
                    n
                })
                .collect()
        })
        .unwrap_or_default()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            pipeline::cmd_simulate(&cfg, &out, &RunOptions { jobs: cli.jobs, ..Default::default() })?;
        }
        Command::Solve { config, out, solver, timings } => {
            let cfg = load_config(&config, cli.seed)?;
            let opts = RunOptions { jobs: cli.jobs, solvers: solver, csv_timings: timings };
            pipeline::cmd_solve(&cfg, &out, &opts)?;
            println!("{}", out.join(pipeline::METRICS_FILE).display());
        }
        Command::AblateWeights { config, out, solver, timings } => {
            let cfg = load_config(&config, cli.seed)?;
            let opts = RunOptions { jobs: cli.jobs, solvers: solver, csv_timings: timings };
            pipeline::cmd_ablate(&cfg, &out, &opts)?;
            println!("{}", out.join(pipeline::ABLATION_FILE).display());
        }
        Command::ExportSlices { volume, plane, positions, out } => {
            for p in pipeline::cmd_export_slices(&volume, plane, positions.as_deref(), &out)? {
                println!("{}", p.display());
            }
        }
        Command::Report { csv, out } => {
            let md = crate::report::render(&csv, &view_names(&csv))?;
            match out {
                Some(path) => std::fs::write(&path, md).map_err(|source| crate::HarnessError::Io { path, source })?,
                None => print!("{md}"),
            }
        }
    }
    Ok(())
}
