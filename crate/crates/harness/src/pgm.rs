//! Slice extraction and binary PGM (P5) output.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use misr_core::{Axis, Volume};

use crate::error::{HarnessError, IoContext, Result};

/// Anatomical plane of an exported slice, named by the axis held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    /// Fixed Z; image columns are X, rows are Y.
    Axial,
    /// Fixed Y; columns X, rows Z.
    Coronal,
    /// Fixed X; columns Y, rows Z.
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// The axis normal to the plane, which is also the through-plane axis of
    /// an acquisition in this plane.
    pub fn normal(self) -> Axis {
        match self {
            Plane::Axial => Axis::Z,
            Plane::Coronal => Axis::Y,
            Plane::Sagittal => Axis::X,
        }
    }

    pub fn from_axis(axis: Axis) -> Plane {
        match axis {
            Axis::Z => Plane::Axial,
            Axis::Y => Plane::Coronal,
            Axis::X => Plane::Sagittal,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Plane {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "axial" | "ax" | "z" => Ok(Plane::Axial),
            "coronal" | "cor" | "y" => Ok(Plane::Coronal),
            "sagittal" | "sag" | "x" => Ok(Plane::Sagittal),
            other => Err(format!("unknown plane '{other}' (expected axial, coronal or sagittal)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).at(path)
    }
}

/// Number of slices available in `plane`.
pub fn slice_count(v: &Volume, plane: Plane) -> usize {
    v.dims()[plane.normal().index()]
}

/// One slice mapped to 8 bits with the volume-wide min and max. A constant
/// volume maps to 127.
pub fn extract_slice(v: &Volume, plane: Plane, position: usize) -> Result<Image> {
    let count = slice_count(v, plane);
    if position >= count {
        return Err(HarnessError::Core(misr_core::Error::InvalidParameter(format!(
            "{plane} position {position} out of range; valid positions are 0..={}",
            count - 1
        ))));
    }
    let [nx, ny, nz] = v.dims();
    let (lo, hi) = (v.min(), v.max());
    let range = hi - lo;
    let level = |x: f64| -> u8 {
        if range > 0.0 {
            (255.0 * (x - lo) / range).round().clamp(0.0, 255.0) as u8
        } else {
            127
        }
    };
    let (width, height) = match plane {
        Plane::Axial => (nx, ny),
        Plane::Coronal => (nx, nz),
        Plane::Sagittal => (ny, nz),
    };
    let mut pixels = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let x = match plane {
                Plane::Axial => v.get(c, r, position),
                Plane::Coronal => v.get(c, position, r),
                Plane::Sagittal => v.get(position, c, r),
            };
            pixels.push(level(x));
        }
    }
    Ok(Image { width, height, pixels })
}
