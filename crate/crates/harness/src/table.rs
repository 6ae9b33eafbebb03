//! Metrics CSV files: fixed float formatting, append-only writes and a
//! trailing checksum line over every preceding byte.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{HarnessError, IoContext, Result};

pub const SOLVE_HEADER: &str = "subject,solver,N,ks,psnr,ssim,wall_ms,seed,status";
pub const ABLATION_HEADER: &str = "subject,solver,weighting,sigma_base,N,ks,psnr,ssim,wall_ms,seed,status";
pub const CHECKSUM_PREFIX: &str = "# checksum sha256=";

/// `%g`-style formatting with 6 significant digits.
pub fn sig6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-4..6).contains(&exp) {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        trim_zeros(&format!("{:.*}", (5 - exp) as usize, v)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), sig6)
}

pub fn format_ks(ks: &[usize]) -> String {
    ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Failed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "OK",
            Status::Failed => "FAILED",
        }
    }
}

/// One solver run on one subject and one measurement subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub subject: usize,
    pub solver: String,
    /// `Some` in ablation files: "weighted" or "uniform".
    pub weighting: Option<&'static str>,
    pub sigma_base: Option<f64>,
    pub ks: Vec<usize>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub wall_ms: Option<f64>,
    pub seed: u64,
    pub status: Status,
}

impl Row {
    pub fn to_line(&self) -> String {
        let tail = format!(
            "{},{},{},{},{},{},{}",
            self.ks.len(),
            format_ks(&self.ks),
            opt(self.psnr),
            opt(self.ssim),
            opt(self.wall_ms),
            self.seed,
            self.status.as_str()
        );
        match self.weighting {
            Some(w) => format!("{},{},{},{},{}", self.subject, self.solver, w, opt(self.sigma_base), tail),
            None => format!("{},{},{}", self.subject, self.solver, tail),
        }
    }
}

/// Writes rows as they arrive and seals the file with a checksum.
pub struct CsvLog {
    path: PathBuf,
    file: File,
    hasher: Sha256,
}

impl CsvLog {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let file = File::create(path).at(path)?;
        let mut log = CsvLog { path: path.to_path_buf(), file, hasher: Sha256::new() };
        log.line(header)?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        let bytes = format!("{s}\n");
        self.hasher.update(bytes.as_bytes());
        self.file.write_all(bytes.as_bytes()).at(&self.path)?;
        self.file.flush().at(&self.path)
    }

    pub fn push(&mut self, row: &Row) -> Result<()> {
        self.line(&row.to_line())
    }

    pub fn finish(mut self) -> Result<()> {
        let digest = hex::encode(std::mem::take(&mut self.hasher).finalize());
        let tail = format!("{CHECKSUM_PREFIX}{digest}\n");
        self.file.write_all(tail.as_bytes()).at(&self.path)?;
        self.file.sync_all().at(&self.path)
    }
}

/// Outcome of checking the trailing checksum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Seal {
    Valid,
    /// No checksum line: the run was interrupted.
    Missing,
    Mismatch,
}

pub fn check_seal(bytes: &[u8]) -> Seal {
    let text = match std::str::from_utf8(bytes) {
        Ok(t) => t,
        Err(_) => return Seal::Mismatch,
    };
    let body_end = text.trim_end_matches('\n').rfind('\n').map_or(0, |i| i + 1);
    let last = text[body_end..].trim_end();
    match last.strip_prefix(CHECKSUM_PREFIX) {
        None => Seal::Missing,
        Some(hex_digest) => {
            if hex::encode(Sha256::digest(&bytes[..body_end])) == hex_digest {
                Seal::Valid
            } else {
                Seal::Mismatch
            }
        }
    }
}

/// A parsed row, as read back by `report`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub subject: usize,
    pub solver: String,
    pub weighting: Option<String>,
    pub sigma_base: Option<f64>,
    pub n: usize,
    pub ks: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub ok: bool,
}

pub fn read_records(path: &Path) -> Result<(Vec<Record>, Seal)> {
    let bytes = std::fs::read(path).at(path)?;
    let seal = check_seal(&bytes);
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes.as_slice());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Format { path: path.to_path_buf(), msg: format!("missing column '{name}'") })
    };
    let (c_subject, c_solver, c_n, c_ks, c_psnr, c_ssim, c_status) =
        (col("subject")?, col("solver")?, col("N")?, col("ks")?, col("psnr")?, col("ssim")?, col("status")?);
    let c_weight = headers.iter().position(|h| h == "weighting");
    let c_sigma = headers.iter().position(|h| h == "sigma_base");
    let bad = |msg: String| HarnessError::Format { path: path.to_path_buf(), msg };
    let num = |s: &str| -> Option<f64> { s.parse().ok() };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(Record {
            subject: rec[c_subject].parse().map_err(|_| bad(format!("bad subject '{}'", &rec[c_subject])))?,
            solver: rec[c_solver].to_string(),
            weighting: c_weight.map(|c| rec[c].to_string()),
            sigma_base: c_sigma.and_then(|c| num(&rec[c])),
            n: rec[c_n].parse().map_err(|_| bad(format!("bad N '{}'", &rec[c_n])))?,
            ks: rec[c_ks].to_string(),
            psnr: num(&rec[c_psnr]),
            ssim: num(&rec[c_ssim]),
            ok: &rec[c_status] == "OK",
        });
    }
    Ok((out, seal))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(32.663_987), "32.664");
        assert_eq!(sig6(0.912_345_67), "0.912346");
        assert_eq!(sig6(1234567.0), "1.23457e+06");
        assert_eq!(sig6(0.000_012_345_67), "1.23457e-05");
        assert_eq!(sig6(100.0), "100");
        assert_eq!(sig6(-2.5), "-2.5");
        assert_eq!(sig6(f64::INFINITY), "inf");
        assert_eq!(sig6(999_999.7), "1e+06");
    }

    #[test]
    fn seal_detects_truncation_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut log = CsvLog::create(&path, SOLVE_HEADER).unwrap();
        let row = Row {
            subject: 0,
            solver: "dps".into(),
            weighting: None,
            sigma_base: None,
            ks: vec![4, 4],
            psnr: Some(30.5),
            ssim: None,
            wall_ms: None,
            seed: 9,
            status: Status::Ok,
        };
        log.push(&row).unwrap();
        assert_eq!(check_seal(&std::fs::read(&path).unwrap()), Seal::Missing);
        log.finish().unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(check_seal(&bytes), Seal::Valid);
        let mut tampered = bytes.clone();
        tampered[SOLVE_HEADER.len() + 1] = b'1';
        assert_eq!(check_seal(&tampered), Seal::Mismatch);
        let (recs, seal) = read_records(&path).unwrap();
        assert_eq!(seal, Seal::Valid);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].ks, "4;4");
        assert_eq!(recs[0].ssim, None);
        assert_eq!(row.to_line(), "0,dps,2,4;4,30.5,NA,NA,9,OK");
    }
}
