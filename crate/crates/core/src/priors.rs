//! Priors expose the posterior mean `mu0(x_t) = E[x0 | x_t]` under the
//! forward process `x_t = alpha(t) x0 + beta(t) eps`, together with its
//! vector-Jacobian product. The closed-form Gaussian and Gaussian-mixture
//! priors stand in for a learned denoiser.

use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::volume::{dot, dot_slices, Volume};

/// Noise schedule `(alpha, beta)` with `alpha(0) = 1, beta(0) = 0,
/// alpha(1) = 0, beta(1) = 1`.
pub trait FlowSchedule {
    fn alpha(&self, t: f64) -> f64;
    fn beta(&self, t: f64) -> f64;

    /// Noise-to-signal ratio `beta / alpha`.
    fn noise_ratio(&self, t: f64) -> f64 {
        self.beta(t) / self.alpha(t)
    }
}

/// `alpha(t) = 1 - t`, `beta(t) = t`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RectifiedFlow;

impl FlowSchedule for RectifiedFlow {
    fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }

    fn beta(&self, t: f64) -> f64 {
        t
    }
}

/// Time at which `schedule` reaches noise-to-signal ratio `ratio`.
pub fn time_for_noise_ratio(schedule: &dyn FlowSchedule, ratio: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if schedule.noise_ratio(mid) < ratio {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub trait Prior {
    fn schedule(&self) -> &dyn FlowSchedule {
        &RectifiedFlow
    }

    /// `E[x0 | x_t]`.
    fn denoise(&self, x_t: &Volume, t: f64) -> Result<Volume>;

    /// `grad_{x_t} <mu0(x_t), v>`.
    fn vjp(&self, x_t: &Volume, t: f64, v: &Volume) -> Result<Volume>;
}

impl<P: Prior + ?Sized> Prior for &P {
    fn schedule(&self) -> &dyn FlowSchedule {
        (**self).schedule()
    }

    fn denoise(&self, x_t: &Volume, t: f64) -> Result<Volume> {
        (**self).denoise(x_t, t)
    }

    fn vjp(&self, x_t: &Volume, t: f64, v: &Volume) -> Result<Volume> {
        (**self).vjp(x_t, t, v)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::param(alloc::format!("diffusion time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Shrinkage `alpha tau^2 / (alpha^2 tau^2 + beta^2)` of one Gaussian
/// component.
pub fn gaussian_gain(alpha: f64, beta: f64, tau2: f64) -> f64 {
    alpha * tau2 / (alpha * alpha * tau2 + beta * beta)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Variance {
    Isotropic(f64),
    Diagonal(Vec<f64>),
}

/// `x0 ~ N(m, diag(tau^2))`.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: Volume,
    variance: Variance,
}

impl GaussianPrior {
    pub fn isotropic(mean: Volume, tau2: f64) -> Result<Self> {
        if !(tau2.is_finite() && tau2 > 0.0) {
            return Err(Error::param("prior variance must be positive"));
        }
        Ok(Self { mean, variance: Variance::Isotropic(tau2) })
    }

    pub fn diagonal(mean: Volume, tau2: Vec<f64>) -> Result<Self> {
        if tau2.len() != mean.len() {
            return Err(Error::param("diagonal variance length must match the mean"));
        }
        if tau2.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::param("prior variance must be positive"));
        }
        Ok(Self { mean, variance: Variance::Diagonal(tau2) })
    }

    pub fn mean(&self) -> &Volume {
        &self.mean
    }

    pub fn variance(&self) -> &Variance {
        &self.variance
    }

    fn tau2(&self, i: usize) -> f64 {
        match &self.variance {
            Variance::Isotropic(v) => *v,
            Variance::Diagonal(v) => v[i],
        }
    }

    /// Isotropic posterior-mean gain at time `t`; `None` for diagonal priors.
    pub fn gain(&self, t: f64) -> Option<f64> {
        match self.variance {
            Variance::Isotropic(tau2) => {
                let s = self.schedule();
                Some(gaussian_gain(s.alpha(t), s.beta(t), tau2))
            }
            Variance::Diagonal(_) => None,
        }
    }
}

impl Prior for GaussianPrior {
    fn denoise(&self, x_t: &Volume, t: f64) -> Result<Volume> {
        check_time(t)?;
        self.mean.check_same_dims(x_t)?;
        let (a, b) = (self.schedule().alpha(t), self.schedule().beta(t));
        if b == 0.0 {
            return Ok(x_t.clone());
        }
        let data = x_t
            .data()
            .iter()
            .zip(self.mean.data())
            .enumerate()
            .map(|(i, (&x, &m))| m + gaussian_gain(a, b, self.tau2(i)) * (x - a * m))
            .collect();
        Ok(x_t.with_data(data))
    }

    fn vjp(&self, x_t: &Volume, t: f64, v: &Volume) -> Result<Volume> {
        check_time(t)?;
        self.mean.check_same_dims(x_t)?;
        x_t.check_same_dims(v)?;
        let (a, b) = (self.schedule().alpha(t), self.schedule().beta(t));
        if b == 0.0 {
            return Ok(v.clone());
        }
        let data = v.data().iter().enumerate().map(|(i, &vi)| gaussian_gain(a, b, self.tau2(i)) * vi).collect();
        Ok(v.with_data(data))
    }
}

/// One isotropic component of a [`MixturePrior`].
#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Volume,
    pub tau2: f64,
}

/// Default component variance, `0.05^2` in normalized intensity units.
pub const DEFAULT_MIXTURE_TAU2: f64 = 0.05 * 0.05;

/// `x0 ~ sum_k w_k N(m_k, tau_k^2 I)`.
#[derive(Debug, Clone)]
pub struct MixturePrior {
    components: Vec<MixtureComponent>,
}

/// Per-evaluation quantities shared by denoise and VJP.
struct MixtureState {
    resp: Vec<f64>,
    gain: Vec<f64>,
    var: Vec<f64>,
}

impl MixturePrior {
    /// Weights must be positive; they are normalized to sum to one.
    pub fn new(mut components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::param("mixture needs at least one component"));
        }
        for c in &components {
            c.mean.check_same_dims(&components[0].mean)?;
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(Error::param("mixture weights must be positive"));
            }
            if !(c.tau2.is_finite() && c.tau2 > 0.0) {
                return Err(Error::param("mixture variances must be positive"));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        components.iter_mut().for_each(|c| c.weight /= total);
        Ok(Self { components })
    }

    /// Equal weights over `means`, shared variance `tau2`.
    pub fn uniform(means: Vec<Volume>, tau2: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        Self::new(means.into_iter().map(|mean| MixtureComponent { weight: w, mean, tau2 }).collect())
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    fn state(&self, x_t: &Volume, t: f64) -> Result<MixtureState> {
        check_time(t)?;
        self.components[0].mean.check_same_dims(x_t)?;
        let (a, b) = (self.schedule().alpha(t), self.schedule().beta(t));
        let n = x_t.len() as f64;
        let k = self.components.len();
        let mut logp = Vec::with_capacity(k);
        let mut gain = Vec::with_capacity(k);
        let mut var = Vec::with_capacity(k);
        for c in &self.components {
            let s2 = a * a * c.tau2 + b * b;
            let dist: f64 = x_t
                .data()
                .iter()
                .zip(c.mean.data())
                .map(|(x, m)| {
                    let d = x - a * m;
                    d * d
                })
                .sum();
            logp.push(libm::log(c.weight) - 0.5 * n * libm::log(s2) - dist / (2.0 * s2));
            gain.push(gaussian_gain(a, b, c.tau2));
            var.push(s2);
        }
        let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = logp.iter().map(|l| libm::exp(l - max)).collect();
        let z: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= z);
        Ok(MixtureState { resp, gain, var })
    }

    /// Posterior component probabilities given `x_t`.
    pub fn responsibilities(&self, x_t: &Volume, t: f64) -> Result<Vec<f64>> {
        Ok(self.state(x_t, t)?.resp)
    }
}

impl Prior for MixturePrior {
    fn denoise(&self, x_t: &Volume, t: f64) -> Result<Volume> {
        if self.schedule().beta(t) == 0.0 {
            check_time(t)?;
            self.components[0].mean.check_same_dims(x_t)?;
            return Ok(x_t.clone());
        }
        let st = self.state(x_t, t)?;
        let a = self.schedule().alpha(t);
        let mut out = x_t.zeros_like();
        for ((c, &r), &g) in self.components.iter().zip(&st.resp).zip(&st.gain) {
            if r == 0.0 {
                continue;
            }
            for ((o, &x), &m) in out.data_mut().iter_mut().zip(x_t.data()).zip(c.mean.data()) {
                *o += r * (m + g * (x - a * m));
            }
        }
        Ok(out)
    }

    fn vjp(&self, x_t: &Volume, t: f64, v: &Volume) -> Result<Volume> {
        x_t.check_same_dims(v)?;
        if self.schedule().beta(t) == 0.0 {
            check_time(t)?;
            self.components[0].mean.check_same_dims(x_t)?;
            return Ok(v.clone());
        }
        let st = self.state(x_t, t)?;
        let a = self.schedule().alpha(t);
        // mu_k . v = (1 - g_k a) (m_k . v) + g_k (x . v)
        let xv = dot_slices(x_t.data(), v.data());
        let muv: Vec<f64> = self
            .components
            .iter()
            .zip(&st.gain)
            .map(|(c, &g)| (1.0 - g * a) * dot_slices(c.mean.data(), v.data()) + g * xv)
            .collect();
        let mean_muv: f64 = st.resp.iter().zip(&muv).map(|(r, m)| r * m).sum();
        let diag: f64 = st.resp.iter().zip(&st.gain).map(|(r, g)| r * g).sum();

        // J^T v = (sum_k r_k g_k) v - sum_k r_k (mu_k.v - mu0.v) (x - a m_k) / s_k^2
        let mut out = v.scaled(diag);
        for (k, c) in self.components.iter().enumerate() {
            let coef = st.resp[k] * (muv[k] - mean_muv) / st.var[k];
            if coef == 0.0 {
                continue;
            }
            for ((o, &x), &m) in out.data_mut().iter_mut().zip(x_t.data()).zip(c.mean.data()) {
                *o -= coef * (x - a * m);
            }
        }
        Ok(out)
    }
}

/// Central-difference VJP, one coordinate at a time.
///
/// Costs `2 n` denoise calls for an `n`-voxel volume; meant for tests and
/// small grids.
pub fn fd_vjp<P: Prior + ?Sized>(prior: &P, x_t: &Volume, t: f64, v: &Volume, h: f64) -> Result<Volume> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::param("finite-difference step must be positive"));
    }
    x_t.check_same_dims(v)?;
    let mut out = Vec::with_capacity(x_t.len());
    let mut probe = x_t.clone();
    for i in 0..x_t.len() {
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + h;
        let plus = dot(&prior.denoise(&probe, t)?, v)?;
        probe.data_mut()[i] = x0 - h;
        let minus = dot(&prior.denoise(&probe, t)?, v)?;
        probe.data_mut()[i] = x0;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(x_t.with_data(out))
}

/// Flow field `u = eps_hat - x0_hat` implied by a posterior-mean prior.
pub fn flow_field<P: Prior + ?Sized>(prior: &P, x_t: &Volume, t: f64) -> Result<Volume> {
    let (a, b) = (prior.schedule().alpha(t), prior.schedule().beta(t));
    if b == 0.0 {
        return Err(Error::param("flow field undefined at t = 0"));
    }
    let x0 = prior.denoise(x_t, t)?;
    let data = x_t.data().iter().zip(x0.data()).map(|(&x, &m)| (x - a * m) / b - m).collect();
    Ok(x_t.with_data(data))
}

/// Adapts an external flow-field model `u = f(x_t, t)` to the [`Prior`]
/// interface. With `eps_hat = u + x0_hat` and `x_t = alpha x0_hat + beta
/// eps_hat`, the posterior mean is `(x_t - beta u) / (alpha + beta)` for any
/// schedule. The VJP falls back to central differences.
pub struct FlowModelPrior<F> {
    field: F,
    fd_step: f64,
}

impl<F> FlowModelPrior<F>
where
    F: Fn(&Volume, f64) -> Result<Volume>,
{
    pub fn new(field: F, fd_step: f64) -> Self {
        Self { field, fd_step }
    }
}

impl<F> Prior for FlowModelPrior<F>
where
    F: Fn(&Volume, f64) -> Result<Volume>,
{
    fn denoise(&self, x_t: &Volume, t: f64) -> Result<Volume> {
        check_time(t)?;
        let (a, b) = (self.schedule().alpha(t), self.schedule().beta(t));
        let u = (self.field)(x_t, t)?;
        x_t.check_same_dims(&u)?;
        let data = x_t.data().iter().zip(u.data()).map(|(&x, &u)| (x - b * u) / (a + b)).collect();
        Ok(x_t.with_data(data))
    }

    fn vjp(&self, x_t: &Volume, t: f64, v: &Volume) -> Result<Volume> {
        fd_vjp(self, x_t, t, v, self.fd_step)
    }
}

/// Wraps a prior and counts denoise/VJP evaluations.
pub struct CountingPrior<P> {
    inner: P,
    denoise_calls: AtomicUsize,
    vjp_calls: AtomicUsize,
}

impl<P: Prior> CountingPrior<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, denoise_calls: AtomicUsize::new(0), vjp_calls: AtomicUsize::new(0) }
    }

    pub fn denoise_calls(&self) -> usize {
        self.denoise_calls.load(Ordering::Relaxed)
    }

    pub fn vjp_calls(&self) -> usize {
        self.vjp_calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.denoise_calls.store(0, Ordering::Relaxed);
        self.vjp_calls.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: Prior> Prior for CountingPrior<P> {
    fn schedule(&self) -> &dyn FlowSchedule {
        self.inner.schedule()
    }

    fn denoise(&self, x_t: &Volume, t: f64) -> Result<Volume> {
        self.denoise_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.denoise(x_t, t)
    }

    fn vjp(&self, x_t: &Volume, t: f64, v: &Volume) -> Result<Volume> {
        self.vjp_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.vjp(x_t, t, v)
    }
}
