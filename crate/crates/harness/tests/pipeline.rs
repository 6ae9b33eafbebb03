use std::path::{Path, PathBuf};
use std::process::Command;

use misr::config::RunConfig;
use misr::manifest::RunManifest;
use misr::pgm::{extract_slice, Plane};
use misr::pipeline::{self, RunOptions};
use misr::table::{check_seal, Seal, ABLATION_HEADER, SOLVE_HEADER};
use misr::{mvol, HarnessError};
use misr_core::phantoms::{generate_phantom, PhantomSpec};
use misr_core::Volume;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Compares against a checked-in fixture; `MISR_BLESS=1` rewrites it.
fn golden(name: &str, actual: &[u8]) {
    let path = fixture(name);
    if std::env::var_os("MISR_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read(&path).unwrap_or_else(|_| panic!("missing fixture {}", path.display()));
    assert!(expected == actual, "{name} differs from fixture");
}

const TWO_BY_TWO: &str = r#"
name = "files"
subjects = 2
seed = 3

[phantom]
dims = [16, 16, 16]

[prior]
exemplars = 4

[[acquisition]]
plane = "axial"
k = 8

[[acquisition]]
plane = "coronal"
k = 8

[[solver]]
name = "dps"
steps = 4
"#;

fn mvol_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for sub in std::fs::read_dir(dir).unwrap() {
        let sub = sub.unwrap().path();
        if sub.is_dir() {
            for f in std::fs::read_dir(&sub).unwrap() {
                let f = f.unwrap().path();
                if f.extension().is_some_and(|e| e == "mvol") {
                    out.push(f);
                }
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_writes_expected_files_reproducibly() {
    let cfg = RunConfig::parse(TWO_BY_TWO).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = pipeline::cmd_simulate(&cfg, a.path(), &RunOptions::default()).unwrap();
    pipeline::cmd_simulate(&cfg, b.path(), &RunOptions { jobs: 2, ..Default::default() }).unwrap();
    let files = mvol_files(a.path());
    let names: Vec<_> = files.iter().map(|f| f.file_name().unwrap().to_str().unwrap().to_string()).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("lr_")).count(), 4);
    assert_eq!(names.iter().filter(|n| *n == "hr.mvol").count(), 2);
    assert!(a.path().join("manifest-simulate.toml").exists());
    for f in &files {
        let other = b.path().join(f.strip_prefix(a.path()).unwrap());
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(other).unwrap());
    }
    assert_eq!(m.seeds.len(), 2);
    assert!(m.stale_files(a.path()).is_empty());
}

#[test]
fn lr_grid_uses_floor_division() {
    let text = TWO_BY_TWO.replace("dims = [16, 16, 16]", "dims = [16, 18, 21]");
    let cfg = RunConfig::parse(&text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    pipeline::cmd_simulate(&cfg, dir.path(), &RunOptions::default()).unwrap();
    let ax = mvol::read(&dir.path().join("subject_000/lr_axial_k8.mvol")).unwrap();
    let cor = mvol::read(&dir.path().join("subject_000/lr_coronal_k8.mvol")).unwrap();
    assert_eq!(ax.dims(), [16, 18, 2]);
    assert_eq!(cor.dims(), [16, 2, 21]);
    assert_eq!(ax.spacing(), [1.0, 1.0, 8.0]);
}

#[test]
fn solve_rows_and_manifest_round_trip() {
    let cfg = RunConfig::parse(TWO_BY_TWO).unwrap();
    let dir = tempfile::tempdir().unwrap();
    pipeline::cmd_simulate(&cfg, dir.path(), &RunOptions::default()).unwrap();
    let opts = RunOptions { solvers: Some(vec!["dps".into(), "pnp-admm".into()]), ..Default::default() };
    pipeline::cmd_solve(&cfg, dir.path(), &opts).unwrap();
    let csv = std::fs::read(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(check_seal(&csv), Seal::Valid);
    let text = String::from_utf8(csv.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], SOLVE_HEADER);
    // 2 subjects x 2 solvers x 2 subsets, then the checksum.
    assert_eq!(lines.len(), 1 + 8 + 1);
    assert!(lines[1].starts_with("0,dps,1,8,") && lines[2].starts_with("0,dps,2,8;8,"));
    assert!(lines[1..9].iter().all(|l| l.ends_with(",OK") && l.contains(",NA,")));
    assert!(dir.path().join("subject_001/sr_pnp-admm_n2.mvol").exists());

    // A manifest is also a valid --config and reproduces the outputs.
    let manifest_path = dir.path().join("manifest-solve.toml");
    let m = RunManifest::read(&manifest_path).unwrap();
    assert_eq!(m.config_hash, cfg.hash());
    let again = tempfile::tempdir().unwrap();
    let cfg2 = misr::cli::load_config(&manifest_path, None).unwrap();
    pipeline::cmd_simulate(&cfg2, again.path(), &RunOptions::default()).unwrap();
    pipeline::cmd_solve(&cfg2, again.path(), &opts).unwrap();
    assert_eq!(std::fs::read(again.path().join("metrics.csv")).unwrap(), csv);
    assert!(m.stale_files(again.path()).is_empty());
}

#[test]
fn diverging_solver_is_recorded_and_run_continues() {
    let text =
        TWO_BY_TWO.replace("steps = 4", "steps = 4\nzeta = 1e6\nmax_correction_rms = 0.0\ndivergence_limit = 1.0");
    let cfg = RunConfig::parse(&text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    pipeline::cmd_simulate(&cfg, dir.path(), &RunOptions::default()).unwrap();
    pipeline::cmd_solve(&cfg, dir.path(), &RunOptions::default()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.ends_with(",FAILED") && r.contains(",NA,NA,")), "{rows:?}");
}

#[test]
fn config_errors() {
    let no_acq = TWO_BY_TWO.split("[[acquisition]]").next().unwrap().to_string();
    assert!(matches!(RunConfig::parse(&no_acq), Err(HarnessError::Config(_))));
    let typo = TWO_BY_TWO.replace("k = 8\n\n[[acquisition]]", "k = 8\nkk = 2\n\n[[acquisition]]");
    let msg = RunConfig::parse(&typo).unwrap_err().to_string();
    assert!(msg.contains("kk") && msg.contains("line"), "{msg}");
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(TWO_BY_TWO).unwrap();
    assert!(pipeline::cmd_ablate(&cfg, dir.path(), &RunOptions::default()).is_err());
}

#[test]
fn golden_csv_row() {
    let text = r#"
name = "golden"
subjects = 1
seed = 11

[phantom]
dims = [16, 16, 16]

[prior]
exemplars = 4
tau = 0.3

[[acquisition]]
plane = "axial"
k = 4

[[solver]]
name = "dps"
steps = 8
"#;
    let cfg = RunConfig::parse(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    pipeline::cmd_simulate(&cfg, dir.path(), &RunOptions::default()).unwrap();
    pipeline::cmd_solve(&cfg, dir.path(), &RunOptions::default()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    golden("golden_row.csv", format!("{row}\n").as_bytes());
}

#[test]
fn ablation_pairs_share_seeds() {
    let text = TWO_BY_TWO.replace(
        "k = 8\n\n[[acquisition]]\nplane = \"coronal\"\nk = 8",
        "k = 4\n\n[[acquisition]]\nplane = \"coronal\"\nk = 16",
    ) + "\n[[solver]]\nname = \"dmap\"\nsteps = 4\n";
    let cfg = RunConfig::parse(&text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = pipeline::cmd_ablate(&cfg, dir.path(), &RunOptions::default()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> =
        csv.lines().skip(1).filter(|l| !l.starts_with('#')).map(|l| l.split(',').collect()).collect();
    assert_eq!(csv.lines().next().unwrap(), ABLATION_HEADER);
    assert_eq!(rows.len(), 2 * 2 * 2);
    for pair in rows.chunks(2) {
        assert_eq!((pair[0][2], pair[1][2]), ("weighted", "uniform"));
        assert_eq!(pair[0][9], pair[1][9]);
        assert_eq!(pair[0][5], "4;16");
    }
    assert_eq!(m.seeds[1].solver_seed, rows[7][9].parse::<u64>().unwrap());
}

#[test]
fn golden_sagittal_slice() {
    let mut spec = PhantomSpec::new([20, 16, 12], 4);
    spec.bias_amplitude = Some(0.1);
    let v = generate_phantom(&spec).unwrap();
    let img = extract_slice(&v, Plane::Sagittal, 10).unwrap();
    assert_eq!((img.width, img.height), (16, 12));
    golden("sagittal_center.pgm", &img.encode());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.mvol");
    mvol::write(&path, &v).unwrap();
    let written = pipeline::cmd_export_slices(&path, Plane::Sagittal, None, dir.path()).unwrap();
    assert_eq!(std::fs::read(&written[0]).unwrap(), img.encode());
    let err = pipeline::cmd_export_slices(&path, Plane::Axial, Some(&[3, 12]), dir.path()).unwrap_err();
    assert!(err.to_string().contains("0..=11"), "{err}");
    let flat = dir.path().join("flat.mvol");
    mvol::write(&flat, &Volume::filled([4, 4, 4], [1.0; 3], -0.2).unwrap()).unwrap();
    let out = pipeline::cmd_export_slices(&flat, Plane::Coronal, Some(&[0]), dir.path()).unwrap();
    assert!(std::fs::read(&out[0]).unwrap().ends_with(&[127u8; 16]));
}

#[test]
fn binary_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TWO_BY_TWO).unwrap();
    let out = dir.path().join("out");
    let bin = env!("CARGO_BIN_EXE_misr");
    let run = |args: &[&str]| {
        let o = Command::new(bin).args(args).env("MISR_LOG", "warn").output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let (c, d) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    run(&["simulate", "--config", c, "--out", d, "--seed", "9"]);
    run(&["solve", "--config", c, "--out", d, "--seed", "9", "--jobs", "2", "--solver", "dps"]);
    let md = run(&["report", out.join("metrics.csv").to_str().unwrap()]);
    assert!(md.contains("| Method | Scale | Axial | Axial & Coronal |"), "{md}");
    assert!(md.contains("| dps | 8× |"), "{md}");
    let slices = run(&[
        "export-slices",
        out.join("subject_000/hr.mvol").to_str().unwrap(),
        "--plane",
        "axial",
        "--positions",
        "0,8",
        "--out",
        d,
    ]);
    assert_eq!(slices.lines().count(), 2);
    let m = RunManifest::read(&out.join("manifest-simulate.toml")).unwrap();
    assert_eq!(m.seeds[0].phantom_seed, 9);

    let bad = Command::new(bin).args(["simulate", "--config", "/nonexistent.toml", "--out", d]).output().unwrap();
    assert!(!bad.status.success());
}
