//! Slice-selection forward model.
//!
//! A measurement along `axis` with scale factor `k` correlates each line with a
//! Gaussian slice profile whose FWHM equals `k` voxels, then keeps every k-th
//! sample starting at offset `floor(k / 2)`. Out-of-range taps are mirrored
//! about the edge voxel without repeating it (`-1 -> 1`, `n -> n - 2`). HR
//! voxels past the last full stride only contribute through kernel overlap.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::volume::{sample_standard_normal, Axis, Dims, LinearOperator, Volume};

/// `2 * sqrt(2 ln 2)`, the FWHM of a unit-sigma Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Standard deviation (in HR voxels) of the profile for scale factor `k`.
pub fn profile_sigma(k: usize) -> f64 {
    k as f64 / FWHM_PER_SIGMA
}

/// Truncated, renormalized Gaussian taps; radius `ceil(3 sigma)`.
/// `k = 1` is an unblurred acquisition and returns the single tap `[1]`.
pub fn gaussian_profile(k: usize) -> Vec<f64> {
    if k <= 1 {
        return vec![1.0];
    }
    let sigma = profile_sigma(k);
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut taps: Vec<f64> = (-radius..=radius).map(|m| libm::exp(-((m * m) as f64) / (2.0 * sigma * sigma))).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Mirror an index into `0..n` (edge sample not repeated).
pub(crate) fn reflect(idx: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = idx.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Splits a grid into `(outer, len, inner)` around `axis`.
fn line_layout(dims: Dims, axis: Axis) -> (usize, usize, usize) {
    match axis {
        Axis::X => (dims[1] * dims[2], dims[0], 1),
        Axis::Y => (dims[2], dims[1], dims[0]),
        Axis::Z => (1, dims[2], dims[0] * dims[1]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceProfileOperator {
    axis: Axis,
    scale: usize,
    kernel: Vec<f64>,
    hr_dims: Dims,
    lr_dims: Dims,
    // Per LR sample: the kernel-width row of (HR index, weight) after
    // boundary reflection. Forward and adjoint both read this table.
    taps: Vec<(usize, f64)>,
}

impl SliceProfileOperator {
    pub fn new(axis: Axis, scale: usize, hr_dims: Dims) -> Result<Self> {
        if scale == 0 {
            return Err(Error::param("scale factor must be at least 1"));
        }
        Self::with_kernel(axis, scale, gaussian_profile(scale), hr_dims)
    }

    /// Operator with caller-supplied taps (odd length, symmetric, unit sum).
    pub fn with_kernel(axis: Axis, scale: usize, kernel: Vec<f64>, hr_dims: Dims) -> Result<Self> {
        crate::volume::check_dims(hr_dims)?;
        if scale == 0 {
            return Err(Error::param("scale factor must be at least 1"));
        }
        if kernel.len().is_multiple_of(2) {
            return Err(Error::param("kernel length must be odd"));
        }
        let sum: f64 = kernel.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || kernel.iter().any(|t| !t.is_finite()) {
            return Err(Error::param("kernel taps must be finite and sum to 1"));
        }
        let n = hr_dims[axis.index()];
        let m = n / scale;
        if m == 0 {
            return Err(Error::param(alloc::format!(
                "axis {} has {} samples, fewer than scale factor {}",
                axis.name(),
                n,
                scale
            )));
        }
        let mut lr_dims = hr_dims;
        lr_dims[axis.index()] = m;

        let radius = (kernel.len() / 2) as isize;
        let offset = (scale / 2) as isize;
        let mut taps = Vec::with_capacity(m * kernel.len());
        for j in 0..m {
            let center = j as isize * scale as isize + offset;
            for (t, &w) in kernel.iter().enumerate() {
                taps.push((reflect(center + t as isize - radius, n), w));
            }
        }
        Ok(Self { axis, scale, kernel, hr_dims, lr_dims, taps })
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn scale_factor(&self) -> usize {
        self.scale
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn hr_dims(&self) -> Dims {
        self.hr_dims
    }

    pub fn lr_dims(&self) -> Dims {
        self.lr_dims
    }

    /// `x -> Ax`.
    pub fn apply_forward(&self, x: &Volume) -> Result<Volume> {
        if x.dims() != self.hr_dims {
            return Err(Error::Shape { expected: self.hr_dims, found: x.dims() });
        }
        let (outer, n, inner) = line_layout(self.hr_dims, self.axis);
        let m = self.lr_dims[self.axis.index()];
        let width = self.kernel.len();
        let src = x.data();
        let mut out = vec![0.0; outer * m * inner];
        for o in 0..outer {
            for j in 0..m {
                let dst = &mut out[(o * m + j) * inner..(o * m + j + 1) * inner];
                for &(idx, w) in &self.taps[j * width..(j + 1) * width] {
                    let line = &src[(o * n + idx) * inner..(o * n + idx + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(line) {
                        *d += w * s;
                    }
                }
            }
        }
        let mut spacing = x.spacing();
        spacing[self.axis.index()] *= self.scale as f64;
        Ok(Volume::raw(self.lr_dims, spacing, out))
    }

    /// `y -> A^T y`, the exact transpose of [`apply_forward`](Self::apply_forward).
    pub fn apply_adjoint(&self, y: &Volume) -> Result<Volume> {
        if y.dims() != self.lr_dims {
            return Err(Error::Shape { expected: self.lr_dims, found: y.dims() });
        }
        let (outer, n, inner) = line_layout(self.hr_dims, self.axis);
        let m = self.lr_dims[self.axis.index()];
        let width = self.kernel.len();
        let src = y.data();
        let mut out = vec![0.0; outer * n * inner];
        for o in 0..outer {
            for j in 0..m {
                let line = &src[(o * m + j) * inner..(o * m + j + 1) * inner];
                for &(idx, w) in &self.taps[j * width..(j + 1) * width] {
                    let dst = &mut out[(o * n + idx) * inner..(o * n + idx + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(line) {
                        *d += w * s;
                    }
                }
            }
        }
        let mut spacing = y.spacing();
        spacing[self.axis.index()] /= self.scale as f64;
        Ok(Volume::raw(self.hr_dims, spacing, out))
    }
}

impl LinearOperator for SliceProfileOperator {
    fn input_dims(&self) -> Dims {
        self.hr_dims
    }

    fn output_dims(&self) -> Dims {
        self.lr_dims
    }

    fn apply(&self, x: &Volume) -> Result<Volume> {
        self.apply_forward(x)
    }

    fn adjoint(&self, y: &Volume) -> Result<Volume> {
        self.apply_adjoint(y)
    }
}

/// An observed LR volume with its forward operator and noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub y: Volume,
    pub op: SliceProfileOperator,
    pub sigma: f64,
}

impl Measurement {
    pub fn new(y: Volume, op: SliceProfileOperator, sigma: f64) -> Result<Self> {
        if y.dims() != op.lr_dims() {
            return Err(Error::Shape { expected: op.lr_dims(), found: y.dims() });
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::param("noise sigma must be finite and nonnegative"));
        }
        Ok(Self { y, op, sigma })
    }

    pub fn axis(&self) -> Axis {
        self.op.axis()
    }

    pub fn scale_factor(&self) -> usize {
        self.op.scale_factor()
    }

    /// `A x - y`.
    pub fn residual(&self, x: &Volume) -> Result<Volume> {
        self.op.apply_forward(x)?.sub(&self.y)
    }
}

/// `y = A x + (sigma_base / k) * eps` with eps drawn from `rng`.
pub fn simulate_measurement(
    x: &Volume,
    axis: Axis,
    k: usize,
    sigma_base: f64,
    rng: &mut SeededRng,
) -> Result<Measurement> {
    if k < 2 {
        return Err(Error::param("simulated scale factor must be at least 2"));
    }
    if !(sigma_base.is_finite() && sigma_base >= 0.0) {
        return Err(Error::param("sigma_base must be finite and nonnegative"));
    }
    let op = SliceProfileOperator::new(axis, k, x.dims())?;
    let sigma = sigma_base / k as f64;
    let mut y = op.apply_forward(x)?;
    if sigma > 0.0 {
        let eps = sample_standard_normal(rng, y.dims())?;
        y.add_scaled(sigma, &eps)?;
    }
    y.ensure_finite("simulated measurement")?;
    Measurement::new(y, op, sigma)
}

/// Explicit vertical stack `[A_1; ...; A_N]` of operators over one HR grid.
#[derive(Debug, Clone)]
pub struct StackedOperator {
    ops: Vec<SliceProfileOperator>,
}

impl StackedOperator {
    pub fn new(ops: Vec<SliceProfileOperator>) -> Result<Self> {
        let first = ops.first().ok_or_else(|| Error::param("stacked operator needs at least one block"))?;
        let hr = first.hr_dims();
        if let Some(bad) = ops.iter().find(|op| op.hr_dims() != hr) {
            return Err(Error::Shape { expected: hr, found: bad.hr_dims() });
        }
        Ok(Self { ops })
    }

    pub fn ops(&self) -> &[SliceProfileOperator] {
        &self.ops
    }

    pub fn hr_dims(&self) -> Dims {
        self.ops[0].hr_dims()
    }

    /// Total number of rows of the stacked matrix.
    pub fn rows(&self) -> usize {
        self.ops.iter().map(|op| op.lr_dims().iter().product::<usize>()).sum()
    }

    pub fn apply(&self, x: &Volume) -> Result<Vec<Volume>> {
        self.ops.iter().map(|op| op.apply_forward(x)).collect()
    }

    /// `sum_i A_i^T y_i`.
    pub fn adjoint(&self, ys: &[Volume]) -> Result<Volume> {
        if ys.len() != self.ops.len() {
            return Err(Error::param("block count mismatch in stacked adjoint"));
        }
        let mut acc = Volume::zeros(self.hr_dims())?;
        for (op, y) in self.ops.iter().zip(ys) {
            acc.add_scaled(1.0, &op.apply_adjoint(y)?)?;
        }
        Ok(acc)
    }

    /// Flattened stacked product: the concatenation of every `A_i x`.
    pub fn apply_flat(&self, x: &Volume) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.rows());
        for op in &self.ops {
            out.extend_from_slice(op.apply_forward(x)?.data());
        }
        Ok(out)
    }

    /// Adjoint of [`apply_flat`](Self::apply_flat).
    pub fn adjoint_flat(&self, y: &[f64]) -> Result<Volume> {
        if y.len() != self.rows() {
            return Err(Error::param("stacked vector length mismatch"));
        }
        let mut blocks = Vec::with_capacity(self.ops.len());
        let mut start = 0;
        for op in &self.ops {
            let d = op.lr_dims();
            let len = d[0] * d[1] * d[2];
            blocks.push(Volume::from_vec(d, y[start..start + len].to_vec())?);
            start += len;
        }
        self.adjoint(&blocks)
    }
}
