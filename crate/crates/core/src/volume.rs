//! Dense 3D scalar volumes.
//!
//! Data is stored flat in x-fastest order: voxel `(i, j, k)` lives at
//! `i + nx * (j + ny * k)`. Every volume handed across a module boundary holds
//! only finite values.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

/// Acquisition (strided) axis of a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// Flat-index stride of one step along this axis.
    pub fn stride(self, dims: Dims) -> usize {
        match self {
            Axis::X => 1,
            Axis::Y => dims[0],
            Axis::Z => dims[0] * dims[1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
}

pub(crate) fn check_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::param("volume dimensions must be positive"));
    }
    Ok(())
}

fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::param("voxel spacing must be finite and positive"));
    }
    Ok(())
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::param(alloc::format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                dims[0],
                dims[1],
                dims[2]
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("volume data"));
        }
        Ok(Self { dims, spacing, data })
    }

    /// Unit-spaced volume from raw data.
    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        Self::new(dims, [1.0; 3], data)
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f64) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("fill value"));
        }
        Ok(Self { dims, spacing, data: vec![value; dims[0] * dims[1] * dims[2]] })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::filled(dims, [1.0; 3], 0.0)
    }

    /// A zero volume on the same grid as `self`.
    pub fn zeros_like(&self) -> Self {
        Self { dims: self.dims, spacing: self.spacing, data: vec![0.0; self.data.len()] }
    }

    /// Builds a volume from a per-voxel function of `(i, j, k)`.
    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        check_dims(dims)?;
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    /// Same grid, new contents. Used internally where finiteness is checked
    /// by the caller.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self { dims: self.dims, spacing: self.spacing, data }
    }

    pub(crate) fn raw(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
        Self { dims, spacing, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn set_spacing(&mut self, spacing: Spacing) -> Result<()> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn check_same_dims(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape { expected: self.dims, found: other.dims });
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.norm_sq())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scaled(&self, a: f64) -> Volume {
        self.with_data(self.data.iter().map(|v| a * v).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// `self += a * x` in place.
    pub fn add_scaled(&mut self, a: f64, x: &Volume) -> Result<()> {
        self.check_same_dims(x)?;
        for (s, &xv) in self.data.iter_mut().zip(&x.data) {
            *s += a * xv;
        }
        Ok(())
    }

    /// `a * x + b * y`.
    pub fn lin_comb(a: f64, x: &Volume, b: f64, y: &Volume) -> Result<Volume> {
        x.check_same_dims(y)?;
        Ok(x.with_data(x.data.iter().zip(&y.data).map(|(xv, yv)| a * xv + b * yv).collect()))
    }

    pub fn sub(&self, other: &Volume) -> Result<Volume> {
        Volume::lin_comb(1.0, self, -1.0, other)
    }

    pub fn add(&self, other: &Volume) -> Result<Volume> {
        Volume::lin_comb(1.0, self, 1.0, other)
    }
}

/// `a * x + y`; inputs are left untouched.
pub fn axpy(a: f64, x: &Volume, y: &Volume) -> Result<Volume> {
    x.check_same_dims(y)?;
    let out = y.with_data(x.data.iter().zip(&y.data).map(|(xv, yv)| a * xv + yv).collect());
    out.ensure_finite("axpy result")?;
    Ok(out)
}

/// Inner product accumulated strictly left to right.
pub fn dot(x: &Volume, y: &Volume) -> Result<f64> {
    x.check_same_dims(y)?;
    Ok(dot_slices(&x.data, &y.data))
}

pub(crate) fn dot_slices(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// I.i.d. standard normal volume drawn from `rng`.
pub fn sample_standard_normal(rng: &mut SeededRng, dims: Dims) -> Result<Volume> {
    check_dims(dims)?;
    let n = dims[0] * dims[1] * dims[2];
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(rng.next_gaussian());
    }
    Ok(Volume::raw(dims, [1.0; 3], data))
}

/// A linear map between volume grids with an exact adjoint.
pub trait LinearOperator {
    fn input_dims(&self) -> Dims;
    fn output_dims(&self) -> Dims;
    fn apply(&self, x: &Volume) -> Result<Volume>;
    fn adjoint(&self, y: &Volume) -> Result<Volume>;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: Dims, data: &[f64]) -> Volume {
        Volume::from_vec(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn axpy_examples() {
        let v = vol([2, 1, 1], &[1.5, -2.0]);
        let anything = vol([2, 1, 1], &[9.0, 4.0]);
        assert_eq!(axpy(0.0, &anything, &v).unwrap(), v);
        let neg = v.scaled(-1.0);
        assert!(axpy(1.0, &v, &neg).unwrap().data().iter().all(|&x| x == 0.0));
        let r = axpy(2.0, &vol([2, 1, 1], &[1.0, 2.0]), &vol([2, 1, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[5.0, 8.0]);
    }

    #[test]
    fn axpy_rejects_mismatched_dims() {
        let a = Volume::zeros([2, 1, 1]).unwrap();
        let b = Volume::zeros([1, 2, 1]).unwrap();
        assert!(matches!(axpy(1.0, &a, &b), Err(Error::Shape { .. })));
        assert!(matches!(dot(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn dot_examples() {
        let mut e0 = Volume::zeros([3, 1, 1]).unwrap();
        e0.data_mut()[0] = 1.0;
        let mut e1 = Volume::zeros([3, 1, 1]).unwrap();
        e1.data_mut()[1] = 1.0;
        assert_eq!(dot(&e0, &e0).unwrap(), 1.0);
        assert_eq!(dot(&e0, &e1).unwrap(), 0.0);
        assert_eq!(dot(&vol([3, 1, 1], &[1.0, 2.0, 3.0]), &vol([3, 1, 1], &[4.0, 5.0, 6.0])).unwrap(), 32.0);
    }

    #[test]
    fn construction_guards() {
        assert!(Volume::zeros([0, 4, 4]).is_err());
        assert!(Volume::from_vec([2, 2, 1], vec![0.0; 3]).is_err());
        assert!(Volume::from_vec([1, 1, 1], vec![f64::NAN]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
        let mut rng = SeededRng::new(1);
        assert!(sample_standard_normal(&mut rng, [4, 0, 1]).is_err());
    }

    #[test]
    fn x_fastest_layout() {
        let v = Volume::from_fn([2, 3, 4], [1.0; 3], |i, j, k| (i + 10 * j + 100 * k) as f64).unwrap();
        assert_eq!(v.data()[1], 1.0);
        assert_eq!(v.data()[2], 10.0);
        assert_eq!(v.data()[6], 100.0);
        assert_eq!(v.get(1, 2, 3), 321.0);
        assert_eq!(Axis::Z.stride(v.dims()), 6);
    }

    #[test]
    fn normal_sampling_is_deterministic() {
        let a = sample_standard_normal(&mut SeededRng::new(7), [5, 4, 3]).unwrap();
        let b = sample_standard_normal(&mut SeededRng::new(7), [5, 4, 3]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn normal_sampling_moments() {
        let v = sample_standard_normal(&mut SeededRng::new(2024), [100, 100, 100]).unwrap();
        let mean = v.mean();
        let var = v.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 4e-3, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-2, "var {var}");
    }
}
