//! Reference-based image quality: PSNR and volumetric SSIM.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume};

pub const DEFAULT_DATA_RANGE: f64 = 2.0;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `10 log10(range^2 / mse)`; `f64::INFINITY` for identical volumes.
pub fn psnr(x: &Volume, reference: &Volume, data_range: f64) -> Result<f64> {
    x.check_same_dims(reference)?;
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(Error::param("data_range must be positive"));
    }
    let sse: f64 = x.data().iter().zip(reference.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / x.len() as f64;
    Ok(10.0 * libm::log10(data_range * data_range / mse))
}

/// Normalized 1D Gaussian window of `2 * SSIM_RADIUS + 1` taps.
pub fn ssim_window() -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut w: Vec<f64> = (-r..=r).map(|i| libm::exp(-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of a flat x-fastest field.
fn filter_valid(data: &[f64], dims: Dims, w: &[f64]) -> (Vec<f64>, Dims) {
    let taps = w.len();
    let mut cur = data.to_vec();
    let mut cd = dims;
    for axis in 0..3 {
        let mut nd = cd;
        nd[axis] = cd[axis] + 1 - taps;
        let stride = [1, cd[0], cd[0] * cd[1]];
        let mut out = Vec::with_capacity(nd[0] * nd[1] * nd[2]);
        for k in 0..nd[2] {
            for j in 0..nd[1] {
                for i in 0..nd[0] {
                    let base = i + j * cd[0] + k * cd[0] * cd[1];
                    let mut acc = 0.0;
                    for (t, wt) in w.iter().enumerate() {
                        acc += wt * cur[base + t * stride[axis]];
                    }
                    out.push(acc);
                }
            }
        }
        cur = out;
        cd = nd;
    }
    (cur, cd)
}

/// Mean local SSIM over the valid region. Inputs in `[-1, 1]` are mapped to
/// `[0, 1]` so `L = 1`.
pub fn ssim3d(x: &Volume, reference: &Volume) -> Result<f64> {
    x.check_same_dims(reference)?;
    let dims = x.dims();
    let taps = 2 * SSIM_RADIUS + 1;
    if dims.iter().any(|&d| d < taps) {
        return Err(Error::param(alloc::format!("ssim3d needs at least {taps} voxels per axis, got {dims:?}")));
    }
    let a: Vec<f64> = x.data().iter().map(|v| 0.5 * (v + 1.0)).collect();
    let b: Vec<f64> = reference.data().iter().map(|v| 0.5 * (v + 1.0)).collect();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
    let w = ssim_window();
    let (ma, _) = filter_valid(&a, dims, &w);
    let (mb, _) = filter_valid(&b, dims, &w);
    let (maa, _) = filter_valid(&aa, dims, &w);
    let (mbb, _) = filter_valid(&bb, dims, &w);
    let (mab, _) = filter_valid(&ab, dims, &w);
    let mut total = 0.0;
    for i in 0..ma.len() {
        total += ssim_local(ma[i], mb[i], maa[i], mbb[i], mab[i]);
    }
    Ok(total / ma.len() as f64)
}

/// Local SSIM from windowed first and second moments, symmetric in the pair.
pub fn ssim_local(mx: f64, my: f64, mxx: f64, myy: f64, mxy: f64) -> f64 {
    let vx = mxx - mx * mx;
    let vy = myy - my * my;
    let cxy = mxy - mx * my;
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Quality of one reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn evaluate(x: &Volume, reference: &Volume) -> Result<Self> {
        Ok(Self { psnr: psnr(x, reference, DEFAULT_DATA_RANGE)?, ssim: ssim3d(x, reference)? })
    }
}

/// Sample mean and standard deviation (`n - 1` denominator, 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, count: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
        } else {
            0.0
        };
        Self { mean, std, count: n }
    }
}

/// Aggregate over many reports.
pub fn summarize(reports: &[MetricReport]) -> (Summary, Summary) {
    let p: Vec<f64> = reports.iter().map(|r| r.psnr).collect();
    let s: Vec<f64> = reports.iter().map(|r| r.ssim).collect();
    (Summary::of(&p), Summary::of(&s))
}
