//! Markdown summaries of metrics files.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use misr_core::metrics::Summary;

use crate::error::Result;
use crate::table::{read_records, Record, Seal};

fn cell(recs: &[&Record]) -> String {
    let ok: Vec<&&Record> = recs.iter().filter(|r| r.ok).collect();
    if ok.is_empty() {
        return format!("FAILED ({})", recs.len());
    }
    let p = Summary::of(&ok.iter().filter_map(|r| r.psnr).filter(|v| v.is_finite()).collect::<Vec<_>>());
    let ssims: Vec<f64> = ok.iter().filter_map(|r| r.ssim).collect();
    let mut s = format!("{:.2} ± {:.2}", p.mean, p.std);
    if !ssims.is_empty() {
        let q = Summary::of(&ssims);
        let _ = write!(s, " / {:.4} ± {:.4}", q.mean, q.std);
    }
    let failed = recs.len() - ok.len();
    if failed > 0 {
        let _ = write!(s, " ({failed} failed)");
    }
    s
}

/// Scale label of a row: its distinct factors, e.g. `4×` or `4×/16×`.
fn scale_label(ks: &str) -> String {
    let mut seen: Vec<&str> = Vec::new();
    for k in ks.split(';') {
        if !seen.contains(&k) {
            seen.push(k);
        }
    }
    seen.iter().map(|k| format!("{k}×")).collect::<Vec<_>>().join("/")
}

/// Table grouped like the per-method, per-scale comparison: one column per
/// number of views. `view_names` labels the columns when known.
pub fn solve_table(recs: &[Record], view_names: &[String]) -> String {
    let max_n = recs.iter().map(|r| r.n).max().unwrap_or(0);
    // The scale of a (solver, subject) series is read from its largest subset.
    let mut groups: BTreeMap<(String, String), BTreeMap<usize, Vec<&Record>>> = BTreeMap::new();
    let mut order: Vec<(String, String)> = Vec::new();
    let full: BTreeMap<(String, usize), String> =
        recs.iter().filter(|r| r.n == max_n).map(|r| ((r.solver.clone(), r.subject), r.ks.clone())).collect();
    for r in recs {
        let ks = full.get(&(r.solver.clone(), r.subject)).cloned().unwrap_or_else(|| r.ks.clone());
        let key = (scale_label(&ks), r.solver.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().entry(r.n).or_default().push(r);
    }
    let mut s = String::from("| Method | Scale |");
    for n in 1..=max_n {
        let label = if view_names.len() >= n { view_names[..n].join(" & ") } else { format!("{n} views") };
        let _ = write!(s, " {label} |");
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(max_n));
    s.push('\n');
    for key in order {
        let by_n = &groups[&key];
        let _ = write!(s, "| {} | {} |", key.1, key.0);
        for n in 1..=max_n {
            let c = by_n.get(&n).map(|v| cell(v)).unwrap_or_else(|| "-".into());
            let _ = write!(s, " {c} |");
        }
        s.push('\n');
    }
    s
}

/// Uniform rows, weighted rows, and the noise level.
type Arms<'a> = (Vec<&'a Record>, Vec<&'a Record>, f64);

/// Weighted against uniform PSNR per solver and noise level.
pub fn ablation_table(recs: &[Record]) -> String {
    let mut groups: BTreeMap<(String, u64), Arms> = BTreeMap::new();
    for r in recs {
        let sigma = r.sigma_base.unwrap_or(f64::NAN);
        let e = groups.entry((r.solver.clone(), sigma.to_bits())).or_insert((Vec::new(), Vec::new(), sigma));
        match r.weighting.as_deref() {
            Some("weighted") => e.1.push(r),
            _ => e.0.push(r),
        }
    }
    let mut s = String::from("| Method | σ_base | w/o NW | w/ NW | gap (dB) |\n|---|---|---|---|---|\n");
    for ((solver, _), (uniform, weighted, sigma)) in &groups {
        let mean =
            |v: &[&Record]| Summary::of(&v.iter().filter(|r| r.ok).filter_map(|r| r.psnr).collect::<Vec<_>>()).mean;
        let _ = writeln!(
            s,
            "| {solver} | {sigma} | {} | {} | {:+.3} |",
            cell(uniform),
            cell(weighted),
            mean(weighted) - mean(uniform)
        );
    }
    s
}

/// Renders a metrics or ablation CSV, noting an unsealed or altered file.
pub fn render(csv: &Path, view_names: &[String]) -> Result<String> {
    let (recs, seal) = read_records(csv)?;
    let mut s = format!("# {}\n\n", csv.display());
    match seal {
        Seal::Valid => {}
        Seal::Missing => s.push_str("> Warning: no checksum line; the run did not finish.\n\n"),
        Seal::Mismatch => s.push_str("> Warning: checksum mismatch; the file was modified after the run.\n\n"),
    }
    if recs.iter().any(|r| r.weighting.is_some()) {
        s.push_str(&ablation_table(&recs));
    } else {
        s.push_str(&solve_table(&recs, view_names));
    }
    s.push_str("\nCells: PSNR mean ± std (dB) / SSIM mean ± std over subjects.\n");
    Ok(s)
}
