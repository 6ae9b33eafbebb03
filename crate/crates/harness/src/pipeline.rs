//! Experiment orchestration: simulate, solve, and the weighting ablation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use misr_core::metrics::{psnr, ssim3d};
use misr_core::phantoms::{degrade, generate_phantom, PhantomSpec};
use misr_core::samplers::{solve, Solution, Weighting};
use misr_core::{Measurement, MixturePrior, SliceProfileOperator, Volume};
use rayon::prelude::*;

use crate::config::{RunConfig, SolverSpec};
use crate::error::{HarnessError, IoContext, Result};
use crate::manifest::{MeasurementMeta, RunManifest, SubjectMeta, Timing};
use crate::mvol;
use crate::table::{CsvLog, Row, Status, ABLATION_HEADER, SOLVE_HEADER};

pub const DATA_RANGE: f64 = 2.0;
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// `--solver` selection.
    pub solvers: Option<Vec<String>>,
    /// Write measured `wall_ms` into the CSV instead of `NA`. Timings make
    /// the CSV bytes run-dependent; the manifest always records them.
    pub csv_timings: bool,
}

pub fn subject_dir(out: &Path, index: usize) -> PathBuf {
    out.join(subject_name(index))
}

fn subject_name(index: usize) -> String {
    format!("subject_{index:03}")
}

pub fn lr_file_name(m: &Measurement) -> String {
    format!("lr_{}_k{}.mvol", crate::pgm::Plane::from_axis(m.axis()), m.scale_factor())
}

pub fn sr_file_name(solver: &str, n: usize) -> String {
    format!("sr_{solver}_n{n}.mvol")
}

/// Runs `work(i)` for `i in 0..n` on `jobs` threads and hands results to
/// `sink` strictly in index order as soon as each prefix is complete.
pub fn ordered_for_each<R: Send>(
    jobs: usize,
    n: usize,
    work: impl Fn(usize) -> R + Sync,
    mut sink: impl FnMut(usize, R) -> Result<()>,
) -> Result<()> {
    if jobs == 1 || n <= 1 {
        for i in 0..n {
            sink(i, work(i))?;
        }
        return Ok(());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HarnessError::Config(format!("--jobs: {e}")))?;
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::scope(|scope| {
        let work = &work;
        scope.spawn(move || {
            pool.install(|| {
                (0..n).into_par_iter().for_each_with(tx, |tx, i| {
                    let _ = tx.send((i, work(i)));
                })
            })
        });
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (i, r) in rx {
            pending.insert(i, r);
            while let Some(r) = pending.remove(&next) {
                sink(next, r)?;
                next += 1;
            }
        }
        Ok(())
    })
}

/// Ground truth for subject `index`: a generated phantom or a loaded input.
pub fn ground_truth(cfg: &RunConfig, index: usize) -> Result<Volume> {
    match &cfg.phantom.inputs {
        Some(inputs) => mvol::read(&inputs[index]),
        None => {
            let dims = cfg.grid()?;
            let spec = PhantomSpec { seed: cfg.subject_seed(index), ..cfg.phantom_template(dims) };
            Ok(generate_phantom(&spec)?)
        }
    }
}

/// Ground truth plus its configured acquisitions at noise level `sigma_base`.
pub fn make_subject(cfg: &RunConfig, index: usize, sigma_base: f64) -> Result<(Volume, Vec<Measurement>)> {
    let truth = ground_truth(cfg, index)?;
    let axes: Vec<_> = cfg.acquisitions.iter().map(|a| a.axis()).collect();
    let ks: Vec<_> = cfg.acquisitions.iter().map(|a| a.k).collect();
    let ms = degrade(&truth, &axes, &ks, sigma_base, cfg.noise_seed(index))?;
    Ok((truth, ms))
}

/// Result of one solver run on one measurement subset.
pub struct Cell {
    pub row: Row,
    pub volume: Option<Volume>,
    pub wall_ms: f64,
}

/// Solves, scores and times one cell. Solver errors become FAILED rows.
pub fn run_cell(
    prior: &MixturePrior,
    truth: &Volume,
    ms: &[Measurement],
    spec: &SolverSpec,
    subject: usize,
    seed: u64,
    weighting: Option<Weighting>,
) -> Result<Cell> {
    let mut cfg = spec.build(seed)?;
    if let Some(w) = weighting {
        cfg.weighting = w;
    }
    let start = Instant::now();
    let outcome: misr_core::Result<Solution> = solve(prior, ms, &cfg);
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut row = Row {
        subject,
        solver: cfg.solver.name().to_string(),
        weighting: None,
        sigma_base: None,
        ks: ms.iter().map(|m| m.scale_factor()).collect(),
        psnr: None,
        ssim: None,
        wall_ms: None,
        seed,
        status: Status::Failed,
    };
    let volume = match outcome {
        Ok(sol) => {
            for w in &sol.warnings {
                log::warn!("subject {subject} {}: {w}", row.solver);
            }
            row.psnr = Some(psnr(&sol.volume, truth, DATA_RANGE)?);
            row.ssim = match ssim3d(&sol.volume, truth) {
                Ok(s) => Some(s),
                Err(e) => {
                    log::warn!("SSIM skipped: {e}");
                    None
                }
            };
            row.status = Status::Ok;
            Some(sol.volume)
        }
        Err(e) => {
            log::error!("subject {subject} {} with {} views failed: {e}", row.solver, ms.len());
            None
        }
    };
    Ok(Cell { row, volume, wall_ms })
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<RunManifest> {
    let started = Instant::now();
    std::fs::create_dir_all(out).at(out)?;
    let grid = cfg.grid()?;
    for a in &cfg.acquisitions {
        let n = grid[a.axis().index()];
        if n % a.k != 0 {
            log::info!("{} k={}: {n} voxels is not a multiple of k; LR grid keeps {} slices", a.plane, a.k, n / a.k);
        }
    }
    let mut manifest = RunManifest::new("simulate", cfg);
    let work = |i: usize| -> Result<(Vec<String>, f64)> {
        let t0 = Instant::now();
        let (truth, ms) = make_subject(cfg, i, cfg.sigma_base)?;
        let dir = subject_dir(out, i);
        std::fs::create_dir_all(&dir).at(&dir)?;
        let name = subject_name(i);
        mvol::write(&dir.join("hr.mvol"), &truth)?;
        let mut files = vec![format!("{name}/hr.mvol")];
        let mut metas = Vec::new();
        for m in &ms {
            let file = lr_file_name(m);
            mvol::write(&dir.join(&file), &m.y)?;
            files.push(format!("{name}/{file}"));
            metas.push(MeasurementMeta {
                plane: crate::pgm::Plane::from_axis(m.axis()),
                k: m.scale_factor(),
                sigma: m.sigma,
                file,
                lr_dims: m.y.dims(),
            });
        }
        let meta = SubjectMeta {
            subject: i,
            phantom_seed: cfg.subject_seed(i),
            noise_seed: cfg.noise_seed(i),
            hr_file: "hr.mvol".into(),
            hr_dims: truth.dims(),
            measurements: metas,
        };
        meta.write(&dir.join("subject.toml"))?;
        files.push(format!("{name}/subject.toml"));
        Ok((files, t0.elapsed().as_secs_f64() * 1e3))
    };
    ordered_for_each(opts.jobs, cfg.subjects, work, |i, r| {
        let (files, ms) = r?;
        for f in files {
            manifest.add_file(out, &f)?;
        }
        manifest.timings.push(Timing { cell: subject_name(i), wall_ms: ms });
        Ok(())
    })?;
    manifest.total_wall_ms = started.elapsed().as_secs_f64() * 1e3;
    manifest.write(&out.join("manifest-simulate.toml"))?;
    log::info!("simulated {} subjects into {}", cfg.subjects, out.display());
    Ok(manifest)
}

/// Loads a subject written by [`cmd_simulate`].
pub fn load_subject(out: &Path, index: usize) -> Result<(Volume, Vec<Measurement>)> {
    let dir = subject_dir(out, index);
    let meta = SubjectMeta::read(&dir.join("subject.toml"))?;
    let truth = mvol::read(&dir.join(&meta.hr_file))?;
    let ms = meta
        .measurements
        .iter()
        .map(|mm| {
            let y = mvol::read(&dir.join(&mm.file))?;
            let op = SliceProfileOperator::new(mm.plane.normal(), mm.k, truth.dims())?;
            Ok(Measurement::new(y, op, mm.sigma)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((truth, ms))
}

pub fn cmd_solve(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<RunManifest> {
    let started = Instant::now();
    let solvers = cfg.select_solvers(opts.solvers.as_deref())?;
    let prior = cfg.build_prior()?;
    log::info!("prior: {} exemplars, tau {:.4}", prior.components().len(), prior.components()[0].tau2.sqrt());
    let mut manifest = RunManifest::new("solve", cfg);
    let mut log_csv = CsvLog::create(&out.join(METRICS_FILE), SOLVE_HEADER)?;
    let mut sr_files = Vec::new();
    let work = |i: usize| -> Result<Vec<(Cell, String)>> {
        let (truth, ms) = load_subject(out, i)?;
        let dir = subject_dir(out, i);
        let mut cells = Vec::new();
        for spec in &solvers {
            for n in 1..=ms.len() {
                let cell = run_cell(&prior, &truth, &ms[..n], spec, i, cfg.subject_seed(i), None)?;
                let file = sr_file_name(&cell.row.solver, n);
                if let Some(v) = &cell.volume {
                    mvol::write(&dir.join(&file), v)?;
                }
                cells.push((cell, file));
            }
        }
        Ok(cells)
    };
    ordered_for_each(opts.jobs, cfg.subjects, work, |i, cells| {
        for (mut cell, file) in cells? {
            manifest.timings.push(Timing {
                cell: format!("{}/{}", subject_name(i), file.trim_end_matches(".mvol")),
                wall_ms: cell.wall_ms,
            });
            if opts.csv_timings {
                cell.row.wall_ms = Some(cell.wall_ms);
            }
            log_csv.push(&cell.row)?;
            if cell.volume.is_some() {
                sr_files.push(format!("{}/{file}", subject_name(i)));
            }
        }
        Ok(())
    })?;
    log_csv.finish()?;
    manifest.add_file(out, METRICS_FILE)?;
    for f in sr_files {
        manifest.add_file(out, &f)?;
    }
    manifest.total_wall_ms = started.elapsed().as_secs_f64() * 1e3;
    manifest.write(&out.join("manifest-solve.toml"))?;
    Ok(manifest)
}

/// Noise levels swept by the ablation.
pub fn ablation_sigmas(cfg: &RunConfig) -> Vec<f64> {
    cfg.ablation.as_ref().and_then(|a| a.sigma_base.clone()).unwrap_or_else(|| vec![cfg.sigma_base])
}

pub fn check_ablation(cfg: &RunConfig) -> Result<()> {
    match cfg.acquisitions.as_slice() {
        [a, b] if a.k != b.k => Ok(()),
        _ => Err(HarnessError::Config(
            "ablate-weights needs exactly two acquisitions with different scale factors".into(),
        )),
    }
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<RunManifest> {
    let started = Instant::now();
    check_ablation(cfg)?;
    let solvers = cfg.select_solvers(opts.solvers.as_deref())?;
    let prior = cfg.build_prior()?;
    std::fs::create_dir_all(out).at(out)?;
    let sigmas = ablation_sigmas(cfg);
    let mut manifest = RunManifest::new("ablate-weights", cfg);
    let mut log_csv = CsvLog::create(&out.join(ABLATION_FILE), ABLATION_HEADER)?;
    let jobs: Vec<(f64, usize)> = sigmas.iter().flat_map(|&s| (0..cfg.subjects).map(move |i| (s, i))).collect();
    let work = |j: usize| -> Result<Vec<Cell>> {
        let (sigma, i) = jobs[j];
        let (truth, ms) = make_subject(cfg, i, sigma)?;
        let mut cells = Vec::new();
        for spec in &solvers {
            for (label, w) in [("weighted", Weighting::Noise), ("uniform", Weighting::Uniform)] {
                let mut cell = run_cell(&prior, &truth, &ms, spec, i, cfg.subject_seed(i), Some(w))?;
                cell.row.weighting = Some(label);
                cell.row.sigma_base = Some(sigma);
                cells.push(cell);
            }
        }
        Ok(cells)
    };
    ordered_for_each(opts.jobs, jobs.len(), work, |j, cells| {
        let (sigma, i) = jobs[j];
        for mut cell in cells? {
            manifest.timings.push(Timing {
                cell: format!(
                    "sigma{sigma}/{}/{}/{}",
                    subject_name(i),
                    cell.row.solver,
                    cell.row.weighting.unwrap_or_default()
                ),
                wall_ms: cell.wall_ms,
            });
            if opts.csv_timings {
                cell.row.wall_ms = Some(cell.wall_ms);
            }
            log_csv.push(&cell.row)?;
        }
        Ok(())
    })?;
    log_csv.finish()?;
    manifest.add_file(out, ABLATION_FILE)?;
    manifest.total_wall_ms = started.elapsed().as_secs_f64() * 1e3;
    manifest.write(&out.join("manifest-ablate.toml"))?;
    Ok(manifest)
}

/// Writes one PGM per position; `None` exports the centre slice.
pub fn cmd_export_slices(
    volume: &Path,
    plane: crate::pgm::Plane,
    positions: Option<&[usize]>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let v = mvol::read(volume)?;
    let centre = [crate::pgm::slice_count(&v, plane) / 2];
    let positions = positions.unwrap_or(&centre);
    let images = positions.iter().map(|&p| crate::pgm::extract_slice(&v, plane, p)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).at(out)?;
    let stem = volume.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    let mut written = Vec::new();
    for (img, p) in images.iter().zip(positions) {
        let path = out.join(format!("{stem}_{plane}_{p:03}.pgm"));
        img.write(&path)?;
        written.push(path);
    }
    Ok(written)
}
