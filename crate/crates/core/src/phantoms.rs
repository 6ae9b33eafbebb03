//! Synthetic ellipsoid phantoms and the degradation pipeline.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::operators::{simulate_measurement, Measurement};
use crate::priors::MixturePrior;
use crate::rng::SeededRng;
use crate::volume::{Axis, Dims, Spacing, Volume};

pub const BACKGROUND: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub seed: u64,
    /// Inclusive range of ellipsoid counts; `(0, 0)` forces an empty phantom.
    pub ellipsoids: (usize, usize),
    /// Interior intensity range, within `[-1, 1]`.
    pub intensity: (f64, f64),
    /// Semi-axis range as fractions of each dimension.
    pub semi_axis: (f64, f64),
    /// Peak amplitude of a smooth quadratic bias field, at most 0.1.
    pub bias_amplitude: Option<f64>,
    /// Draw the base anatomy from a shared template instead of `seed`.
    pub family: Option<Family>,
}

/// A population of related phantoms: every member perturbs the ellipsoids
/// drawn from `template_seed`, with the perturbation drawn from the member's
/// own seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Family {
    pub template_seed: u64,
    /// Center displacement per axis, as a fraction of the dimension.
    pub center_jitter: f64,
    /// Relative semi-axis scaling, `1 +- axis_jitter`.
    pub axis_jitter: f64,
    /// Additive intensity change, clamped back into the intensity range.
    pub intensity_jitter: f64,
}

impl Family {
    pub fn new(template_seed: u64) -> Self {
        Self { template_seed, center_jitter: 0.03, axis_jitter: 0.1, intensity_jitter: 0.15 }
    }
}

impl PhantomSpec {
    pub fn new(dims: Dims, seed: u64) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            seed,
            ellipsoids: (3, 8),
            intensity: (-1.0, 1.0),
            semi_axis: (0.05, 0.4),
            bias_amplitude: None,
            family: None,
        }
    }

    pub fn cube(n: usize, seed: u64) -> Self {
        Self::new([n; 3], seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::param("phantom dims must be positive"));
        }
        let (lo, hi) = self.ellipsoids;
        if lo > hi {
            return Err(Error::param("ellipsoid count range is reversed"));
        }
        let (ilo, ihi) = self.intensity;
        if !(-1.0 <= ilo && ilo <= ihi && ihi <= 1.0) {
            return Err(Error::param("intensity range must lie within [-1, 1]"));
        }
        let (alo, ahi) = self.semi_axis;
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            return Err(Error::param("semi-axis fractions must be positive and ordered"));
        }
        if let Some(b) = self.bias_amplitude {
            if !(0.0..=0.1).contains(&b) {
                return Err(Error::param("bias amplitude must lie in [0, 0.1]"));
            }
        }
        if let Some(f) = &self.family {
            let ok = |v: f64| v.is_finite() && v >= 0.0;
            if !(ok(f.center_jitter) && ok(f.axis_jitter) && f.axis_jitter < 1.0 && ok(f.intensity_jitter)) {
                return Err(Error::param("family jitters must be nonnegative, axis jitter below 1"));
            }
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    /// Rows are the body axes in grid coordinates.
    rot: [[f64; 3]; 3],
    intensity: f64,
}

fn rotation(rng: &mut SeededRng) -> [[f64; 3]; 3] {
    // Uniform random rotation from a unit quaternion.
    let (u1, u2, u3) = (rng.next_f64(), rng.next_f64(), rng.next_f64());
    let tau = 2.0 * core::f64::consts::PI;
    let (a, b) = (libm::sqrt(1.0 - u1), libm::sqrt(u1));
    let (w, x, y, z) =
        (a * libm::sin(tau * u2), a * libm::cos(tau * u2), b * libm::sin(tau * u3), b * libm::cos(tau * u3));
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn smoothstep(e0: f64, e1: f64, v: f64) -> f64 {
    let t = ((v - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Ellipsoid {
    /// Fractional coverage of voxel `p`: 1 inside, 0 outside, smoothstep over
    /// one voxel of signed distance across the boundary.
    fn coverage(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut q = [0.0; 3];
        for (a, row) in self.rot.iter().enumerate() {
            q[a] = (row[0] * d[0] + row[1] * d[1] + row[2] * d[2]) / self.semi[a];
        }
        let rho = libm::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
        // |grad rho| in grid units, evaluated at the boundary point along p.
        let grad = if rho > 0.0 {
            let mut g = [0.0; 3];
            for (a, row) in self.rot.iter().enumerate() {
                let c = q[a] / (rho * self.semi[a]);
                for b in 0..3 {
                    g[b] += c * row[b];
                }
            }
            libm::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2])
        } else {
            1.0 / self.semi[0].max(self.semi[1]).max(self.semi[2])
        };
        let dist = (rho - 1.0) / grad.max(1e-12);
        1.0 - smoothstep(-0.5, 0.5, dist)
    }
}

/// Deterministic phantom: background -1 plus overlapping soft ellipsoids,
/// clipped to `[-1, 1]`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let dims = spec.dims;
    let mut rng = SeededRng::new(spec.family.map_or(spec.seed, |f| f.template_seed));
    let count = rng.int_inclusive(spec.ellipsoids.0, spec.ellipsoids.1);
    let mut shapes: Vec<Ellipsoid> = (0..count)
        .map(|_| {
            let mut center = [0.0; 3];
            let mut semi = [0.0; 3];
            for a in 0..3 {
                let n = dims[a] as f64;
                center[a] = rng.uniform(0.25, 0.75) * (n - 1.0);
                semi[a] = rng.uniform(spec.semi_axis.0, spec.semi_axis.1) * n;
            }
            let rot = rotation(&mut rng);
            let intensity = rng.uniform(spec.intensity.0, spec.intensity.1);
            Ellipsoid { center, semi, rot, intensity }
        })
        .collect();
    if let Some(f) = spec.family {
        rng = SeededRng::new(spec.seed);
        for e in &mut shapes {
            #[allow(clippy::needless_range_loop)]
            for a in 0..3 {
                let n = dims[a] as f64;
                e.center[a] += rng.uniform(-1.0, 1.0) * f.center_jitter * n;
                e.semi[a] *= 1.0 + rng.uniform(-1.0, 1.0) * f.axis_jitter;
            }
            e.intensity =
                (e.intensity + rng.uniform(-1.0, 1.0) * f.intensity_jitter).clamp(spec.intensity.0, spec.intensity.1);
        }
    }
    let bias = spec.bias_amplitude.map(|amp| {
        let c: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        (amp, c)
    });

    Volume::from_fn(dims, spec.spacing, |i, j, k| {
        let p = [i as f64, j as f64, k as f64];
        let mut v = BACKGROUND;
        for e in &shapes {
            let c = e.coverage(p);
            if c > 0.0 {
                v += c * (e.intensity - BACKGROUND);
            }
        }
        if let Some((amp, c)) = &bias {
            // Quadratic in normalized coordinates u in [-1, 1]; |field| <= amp.
            let u = [0, 1, 2].map(|a| {
                let n = dims[a] as f64;
                if n > 1.0 {
                    2.0 * p[a] / (n - 1.0) - 1.0
                } else {
                    0.0
                }
            });
            let f =
                c[0] * u[0] + c[1] * u[1] + c[2] * u[2] + c[3] * u[0] * u[1] + c[4] * u[1] * u[2] + c[5] * u[2] * u[2];
            let norm: f64 = c.iter().map(|x| x.abs()).sum::<f64>().max(1e-12);
            v += amp * f / norm;
        }
        v.clamp(-1.0, 1.0)
    })
}

/// One measurement per `(axis, k)` pair; measurement `i` draws its noise from
/// stream `i` of `seed`.
pub fn degrade(x: &Volume, axes: &[Axis], ks: &[usize], sigma_base: f64, seed: u64) -> Result<Vec<Measurement>> {
    if axes.len() != ks.len() {
        return Err(Error::param("axes and scale factors must have the same length"));
    }
    axes.iter()
        .zip(ks)
        .enumerate()
        .map(|(i, (&axis, &k))| {
            let mut rng = SeededRng::stream(seed, i as u64);
            simulate_measurement(x, axis, k, sigma_base, &mut rng)
        })
        .collect()
}

/// Root-mean-square distance from each volume to its nearest neighbour among
/// the others. Used as the component width of an exemplar mixture: it is the
/// typical distance from an unseen member to the closest exemplar.
pub fn leave_one_out_tau(volumes: &[Volume]) -> Result<f64> {
    if volumes.len() < 2 {
        return Err(Error::param("leave-one-out width needs at least two volumes"));
    }
    let mut acc = 0.0;
    for (j, a) in volumes.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (i, b) in volumes.iter().enumerate() {
            if i != j {
                best = best.min(a.sub(b)?.norm_sq() / a.len() as f64);
            }
        }
        acc += best;
    }
    Ok(libm::sqrt(acc / volumes.len() as f64))
}

/// Equal-weight isotropic mixture over `count` phantoms drawn from `template`
/// with seeds `first_seed..first_seed + count`. `tau: None` uses
/// [`leave_one_out_tau`] on the exemplars.
pub fn exemplar_prior(template: &PhantomSpec, count: usize, first_seed: u64, tau: Option<f64>) -> Result<MixturePrior> {
    let means = (0..count as u64)
        .map(|j| generate_phantom(&PhantomSpec { seed: first_seed + j, ..template.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let tau = match tau {
        Some(t) => t,
        None => leave_one_out_tau(&means)?,
    };
    MixturePrior::uniform(means, tau * tau)
}
