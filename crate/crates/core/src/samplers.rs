//! Reverse-diffusion solvers for one or many measurements.
//!
//! Every solver walks the uniform grid `t_j = 1 - j / T` from pure noise and
//! enforces data consistency through the weighted residual
//! `sum_i w_i ||A_i mu0 - y_i||^2`. Gradients are accumulated per measurement;
//! the stacked operator is never formed.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::operators::Measurement;
use crate::priors::{time_for_noise_ratio, FlowSchedule, Prior};
use crate::rng::SeededRng;
use crate::volume::{sample_standard_normal, Dims, Spacing, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Dps,
    Dmap,
    Dpps,
    PnpAdmm,
    DiffPir,
}

impl SolverKind {
    pub const ALL: [SolverKind; 5] =
        [SolverKind::Dps, SolverKind::Dmap, SolverKind::Dpps, SolverKind::PnpAdmm, SolverKind::DiffPir];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Dps => "dps",
            SolverKind::Dmap => "dmap",
            SolverKind::Dpps => "dpps",
            SolverKind::PnpAdmm => "pnp-admm",
            SolverKind::DiffPir => "diffpir",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dps" => Ok(SolverKind::Dps),
            "dmap" => Ok(SolverKind::Dmap),
            "dpps" => Ok(SolverKind::Dpps),
            "pnp-admm" | "pnp_admm" | "admm" | "pnp" => Ok(SolverKind::PnpAdmm),
            "diffpir" => Ok(SolverKind::DiffPir),
            other => Err(Error::param(alloc::format!("unknown solver '{other}'"))),
        }
    }
}

/// How measurements are weighted against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `w_i ∝ (sigma_i^2 + sigma_floor)^-1`, normalized to sum to N.
    #[default]
    Noise,
    /// `w_i = 1`.
    Uniform,
}

/// Norm used in the likelihood gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualNorm {
    #[default]
    Squared,
    /// `||A mu0 - y||` per measurement, as in the single-image DPS listing.
    Unsquared,
}

/// DMAP inner-loop renormalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DmapProjection {
    /// `x = mu + sqrt(d) sigma (x - mu) / ||x - mu||`.
    #[default]
    Sphere,
    /// `x = mu - sqrt(d) sigma (x - mu) / ||x - mu||^2`, transcribed verbatim.
    Literal,
}

/// DMAP proposal `x_s ~ p(X_s | x_t)` and the radius scale `sigma_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DmapTransition {
    /// `N(alpha_s x0_hat, beta_s^2 I)`, `sigma_t = beta_s`.
    #[default]
    Renoise,
    /// Ancestral DDIM (`eta = 1`) posterior; `sigma_t` is its standard deviation.
    Ancestral,
}

/// Proximal weight of the DiffPIR data step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LambdaSchedule {
    /// `beta_t^2 / alpha_t^2`, clamped to `[1e-4, 1e4]`.
    #[default]
    NoiseToSignal,
    Constant(f64),
}

impl LambdaSchedule {
    pub fn at(&self, schedule: &dyn FlowSchedule, t: f64) -> f64 {
        match *self {
            LambdaSchedule::NoiseToSignal => {
                let r = schedule.noise_ratio(t);
                let l = r * r;
                if l.is_nan() {
                    1e4
                } else {
                    l.clamp(1e-4, 1e4)
                }
            }
            LambdaSchedule::Constant(l) => l,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub solver: SolverKind,
    /// Number of reverse steps `T`.
    pub steps: usize,
    /// Base step size; the per-step size is normalized by the residual.
    pub zeta: f64,
    pub sigma_floor: f64,
    /// DMAP inner iterations `K`.
    pub inner_iters: usize,
    /// DPPS candidates per step.
    pub candidates: usize,
    /// ADMM penalty.
    pub rho: f64,
    pub admm_iters: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub lambda: LambdaSchedule,
    /// DDIM stochasticity of DPS (0 is deterministic). DPPS proposals always
    /// use 1.
    pub eta: f64,
    pub weighting: Weighting,
    pub norm: ResidualNorm,
    pub projection: DmapProjection,
    pub transition: DmapTransition,
    /// Noise variance that scales the ADMM data term,
    /// `sum_i w_i ||A_i x - y_i||^2 / (2 v)`. `None` uses the harmonic mean
    /// of the measurement variances `sigma_i^2`.
    pub data_variance: Option<f64>,
    /// Caps the RMS per-voxel size of one gradient correction. Only binds
    /// where mixture responsibilities switch and the exact Jacobian spikes.
    pub max_correction_rms: Option<f64>,
    /// Abort when the state norm exceeds this.
    pub divergence_limit: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Dps,
            steps: 64,
            zeta: 1.0,
            sigma_floor: 0.01,
            inner_iters: 3,
            candidates: 4,
            rho: 1.0,
            admm_iters: 30,
            cg_iters: 50,
            cg_tol: 1e-8,
            lambda: LambdaSchedule::NoiseToSignal,
            eta: 0.0,
            weighting: Weighting::Noise,
            norm: ResidualNorm::Squared,
            projection: DmapProjection::Sphere,
            transition: DmapTransition::Renoise,
            data_variance: None,
            max_correction_rms: Some(0.1),
            divergence_limit: 1e6,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn new(solver: SolverKind) -> Self {
        Self { solver, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.steps == 0 {
            return Err(Error::param("steps must be at least 1"));
        }
        if self.inner_iters == 0 || self.candidates == 0 || self.admm_iters == 0 || self.cg_iters == 0 {
            return Err(Error::param("iteration counts must be at least 1"));
        }
        if !positive(self.zeta) || !positive(self.rho) || !positive(self.cg_tol) || !positive(self.divergence_limit) {
            return Err(Error::param("zeta, rho, cg_tol and divergence_limit must be positive"));
        }
        if !(self.sigma_floor.is_finite() && self.sigma_floor >= 0.0) {
            return Err(Error::param("sigma_floor must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::param("eta must lie in [0, 1]"));
        }
        if let LambdaSchedule::Constant(l) = self.lambda {
            if !positive(l) {
                return Err(Error::param("constant lambda must be positive"));
            }
        }
        if let Some(c) = self.max_correction_rms {
            if !positive(c) {
                return Err(Error::param("max_correction_rms must be positive"));
            }
        }
        if let Some(v) = self.data_variance {
            if !positive(v) {
                return Err(Error::param("data_variance must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-measurement weights, normalized so they sum to N.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        WeightVector(alloc::vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn raw_inverse_variances(measurements: &[Measurement], sigma_floor: f64) -> Result<Vec<f64>> {
    let vars: Vec<f64> = measurements.iter().map(|m| m.sigma * m.sigma + sigma_floor).collect();
    if vars.iter().all(|&v| v == 0.0) {
        return Ok(alloc::vec![1.0; vars.len()]);
    }
    if vars.contains(&0.0) {
        return Err(Error::param("noise-free measurement mixed with noisy ones needs sigma_floor > 0"));
    }
    Ok(vars.iter().map(|v| 1.0 / v).collect())
}

/// `w_i = (sigma_i^2 + sigma_floor)^-1`, rescaled so `sum w_i = N`.
pub fn compute_weights(measurements: &[Measurement], sigma_floor: f64) -> Result<WeightVector> {
    if measurements.is_empty() {
        return Err(Error::param("at least one measurement is required"));
    }
    let raw = raw_inverse_variances(measurements, sigma_floor)?;
    let total: f64 = raw.iter().sum();
    let n = raw.len() as f64;
    Ok(WeightVector(raw.iter().map(|w| n * w / total).collect()))
}

/// Residual-normalized step `zeta / sqrt(E + 1e-12)` for weighted residual
/// energy `E = sum_i w_i ||A_i mu0 - y_i||^2`.
pub fn step_size(zeta: f64, weighted_energy: f64) -> f64 {
    zeta / libm::sqrt(weighted_energy + 1e-12)
}

/// Weighted multi-measurement data term.
struct DataTerm<'a> {
    measurements: &'a [Measurement],
    weights: Vec<f64>,
    norm: ResidualNorm,
    hr_dims: Dims,
}

impl<'a> DataTerm<'a> {
    fn new(measurements: &'a [Measurement], weights: &WeightVector, norm: ResidualNorm) -> Result<Self> {
        let first = measurements.first().ok_or_else(|| Error::param("at least one measurement is required"))?;
        let hr_dims = first.op.hr_dims();
        for m in measurements {
            if m.op.hr_dims() != hr_dims {
                return Err(Error::Shape { expected: hr_dims, found: m.op.hr_dims() });
            }
        }
        if weights.len() != measurements.len() {
            return Err(Error::param("one weight per measurement is required"));
        }
        Ok(Self { measurements, weights: weights.0.clone(), norm, hr_dims })
    }

    fn from_config(measurements: &'a [Measurement], cfg: &SolverConfig) -> Result<Self> {
        let w = match cfg.weighting {
            Weighting::Noise => compute_weights(measurements, cfg.sigma_floor)?,
            Weighting::Uniform => WeightVector::uniform(measurements.len()),
        };
        Self::new(measurements, &w, cfg.norm)
    }

    /// HR grid spacing implied by the first measurement.
    fn hr_spacing(&self) -> Spacing {
        let m = &self.measurements[0];
        let mut s = m.y.spacing();
        s[m.axis().index()] /= m.scale_factor() as f64;
        s
    }

    fn residuals(&self, x: &Volume) -> Result<Vec<Volume>> {
        self.measurements.iter().map(|m| m.residual(x)).collect()
    }

    fn energy_of(&self, residuals: &[Volume]) -> f64 {
        self.weights.iter().zip(residuals).map(|(w, r)| w * r.norm_sq()).sum()
    }

    fn energy(&self, x: &Volume) -> Result<f64> {
        Ok(self.energy_of(&self.residuals(x)?))
    }

    /// `sum_i w_i vjp(x_t, t, d/dmu ||A_i mu - y_i||^p)` at `mu = mu0`, and the
    /// weighted residual energy.
    fn gradient<P: Prior + ?Sized>(&self, prior: &P, x_t: &Volume, t: f64, mu0: &Volume) -> Result<(Volume, f64)> {
        let residuals = self.residuals(mu0)?;
        let energy = self.energy_of(&residuals);
        let mut grad = x_t.zeros_like();
        for ((m, w), r) in self.measurements.iter().zip(&self.weights).zip(&residuals) {
            let scale = match self.norm {
                ResidualNorm::Squared => 2.0,
                ResidualNorm::Unsquared => {
                    let n = r.norm();
                    if n == 0.0 {
                        continue;
                    }
                    1.0 / n
                }
            };
            let cotangent = m.op.apply_adjoint(r)?.scaled(scale);
            grad.add_scaled(*w, &prior.vjp(x_t, t, &cotangent)?)?;
        }
        Ok((grad, energy))
    }

    /// `sum_i w_i A_i^T A_i x`.
    fn normal(&self, x: &Volume) -> Result<Volume> {
        let mut acc = x.zeros_like();
        for (m, w) in self.measurements.iter().zip(&self.weights) {
            acc.add_scaled(*w, &m.op.apply_adjoint(&m.op.apply_forward(x)?)?)?;
        }
        Ok(acc)
    }

    /// `sum_i w_i A_i^T y_i`.
    fn back_projection(&self) -> Result<Volume> {
        let mut acc = Volume::zeros(self.hr_dims)?;
        for (m, w) in self.measurements.iter().zip(&self.weights) {
            acc.add_scaled(*w, &m.op.apply_adjoint(&m.y)?)?;
        }
        Ok(acc)
    }
}

/// `grad_{x_t} sum_i w_i ||A_i mu0(x_t) - y_i||^2`, with one denoise call.
pub fn likelihood_gradient<P: Prior + ?Sized>(
    prior: &P,
    x_t: &Volume,
    t: f64,
    measurements: &[Measurement],
    weights: &WeightVector,
) -> Result<Volume> {
    let term = DataTerm::new(measurements, weights, ResidualNorm::Squared)?;
    if x_t.dims() != term.hr_dims {
        return Err(Error::Shape { expected: term.hr_dims, found: x_t.dims() });
    }
    let mu0 = prior.denoise(x_t, t)?;
    Ok(term.gradient(prior, x_t, t, &mu0)?.0)
}

/// Index of the candidate minimizing `sum_i w_i ||A_i mu0(c) - y_i||^2`
/// (lowest index on ties) and every candidate's distance.
pub fn select_closest<P: Prior + ?Sized>(
    prior: &P,
    s: f64,
    candidates: &[Volume],
    measurements: &[Measurement],
    weights: &WeightVector,
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::param("no candidates to select from"));
    }
    let term = DataTerm::new(measurements, weights, ResidualNorm::Squared)?;
    let mut dists = Vec::with_capacity(candidates.len());
    for c in candidates {
        dists.push(term.energy(&prior.denoise(c, s)?)?);
    }
    Ok((argmin_first(&dists), dists))
}

fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Uniform time grid `t_j = 1 - j / T`, `j = 0..=T`.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|j| (steps - j) as f64 / steps as f64).collect()
}

/// Deterministic DDIM update from a given `x0_hat`.
fn ddim_from_x0(schedule: &dyn FlowSchedule, x_t: &Volume, x0: &Volume, t: f64, s: f64) -> Volume {
    if s == 0.0 {
        return x0.clone();
    }
    let (at, bt) = (schedule.alpha(t), schedule.beta(t));
    let (a_s, b_s) = (schedule.alpha(s), schedule.beta(s));
    let data = x_t
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&x, &m)| {
            let eps = (x - at * m) / bt;
            a_s * m + b_s * eps
        })
        .collect();
    x_t.with_data(data)
}

/// Ancestral DDIM update with stochasticity `eta`; always consumes one
/// volume of Gaussian draws.
fn ddim_stochastic_from_x0(
    schedule: &dyn FlowSchedule,
    x_t: &Volume,
    x0: &Volume,
    t: f64,
    s: f64,
    eta: f64,
    rng: &mut SeededRng,
) -> Result<Volume> {
    let z = sample_standard_normal(rng, x_t.dims())?;
    let (at, bt) = (schedule.alpha(t), schedule.beta(t));
    let (a_s, b_s) = (schedule.alpha(s), schedule.beta(s));
    let ratio = if a_s > 0.0 { (at * b_s) / (a_s * bt) } else { 0.0 };
    let var = (eta * eta * b_s * b_s * (1.0 - ratio * ratio)).max(0.0);
    let sigma = libm::sqrt(var);
    let keep = libm::sqrt((b_s * b_s - var).max(0.0));
    let data = x_t
        .data()
        .iter()
        .zip(x0.data())
        .zip(z.data())
        .map(|((&x, &m), &zi)| {
            let eps = (x - at * m) / bt;
            a_s * m + keep * eps + sigma * zi
        })
        .collect();
    Ok(x_t.with_data(data))
}

/// One deterministic DDIM step `t -> s`; returns `(x_s, x0_hat)`.
pub fn ddim_step<P: Prior + ?Sized>(prior: &P, x_t: &Volume, t: f64, s: f64) -> Result<(Volume, Volume)> {
    if !(0.0 <= s && s <= t && t <= 1.0) {
        return Err(Error::param("ddim_step needs 0 <= s <= t <= 1"));
    }
    let x0 = prior.denoise(x_t, t)?;
    if s == t {
        return Ok((x_t.clone(), x0));
    }
    Ok((ddim_from_x0(prior.schedule(), x_t, &x0, t, s), x0))
}

/// DMAP renormalization of `x` about `mu` with radius `radius`; returns
/// `false` (and leaves `x` alone) when `||x - mu|| < 1e-12`.
pub fn dmap_renormalize(x: &mut Volume, mu: &Volume, radius: f64, projection: DmapProjection) -> Result<bool> {
    let dev = x.sub(mu)?;
    let n = dev.norm();
    if n < 1e-12 {
        return Ok(false);
    }
    let coef = match projection {
        DmapProjection::Sphere => radius / n,
        DmapProjection::Literal => -radius / (n * n),
    };
    *x = Volume::lin_comb(1.0, mu, coef, &dev)?;
    Ok(true)
}

/// Conjugate gradients for an SPD operator. Stops when
/// `||b - A x|| <= tol ||b||`.
pub fn conjugate_gradient(
    apply: impl Fn(&Volume) -> Result<Volume>,
    b: &Volume,
    x0: &Volume,
    max_iters: usize,
    tol: f64,
) -> Result<CgOutcome> {
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok(CgOutcome { x: b.zeros_like(), iterations: 0, converged: true, relative_residual: 0.0 });
    }
    let mut x = x0.clone();
    let mut r = b.sub(&apply(&x)?)?;
    let mut p = r.clone();
    let mut rs = r.norm_sq();
    let target = tol * bnorm;
    let mut iterations = 0;
    while libm::sqrt(rs) > target && iterations < max_iters {
        let ap = apply(&p)?;
        let pap = crate::volume::dot(&p, &ap)?;
        if pap.is_nan() || pap <= 0.0 {
            break;
        }
        let alpha = rs / pap;
        x.add_scaled(alpha, &p)?;
        r.add_scaled(-alpha, &ap)?;
        let rs_new = r.norm_sq();
        p = Volume::lin_comb(1.0, &r, rs_new / rs, &p)?;
        rs = rs_new;
        iterations += 1;
    }
    let relative_residual = libm::sqrt(rs) / bnorm;
    x.ensure_finite("conjugate gradient iterate")?;
    Ok(CgOutcome { x, iterations, converged: relative_residual <= tol, relative_residual })
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Volume,
    pub iterations: usize,
    pub converged: bool,
    pub relative_residual: f64,
}

/// Solver output with diagnostics.
#[derive(Debug, Clone)]
pub struct Solution {
    pub volume: Volume,
    /// Denoise evaluations performed.
    pub nfe: usize,
    /// Inner least-squares solves that hit `cg_iters` before `cg_tol`.
    pub cg_unconverged: usize,
    /// DPPS: chosen candidate index per step.
    pub selections: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Solution {
    fn new(volume: Volume) -> Self {
        Self { volume, nfe: 0, cg_unconverged: 0, selections: Vec::new(), warnings: Vec::new() }
    }
}

/// `x -= zeta_t * grad`, with the step shortened to the trust radius.
fn apply_correction(x: &mut Volume, grad: &Volume, zeta_t: f64, cfg: &SolverConfig) -> Result<()> {
    let mut scale = zeta_t;
    if let Some(rms) = cfg.max_correction_rms {
        let limit = rms * libm::sqrt(grad.len() as f64);
        let len = zeta_t * grad.norm();
        if len > limit {
            scale *= limit / len;
        }
    }
    x.add_scaled(-scale, grad)
}

fn guard(x: &Volume, solver: SolverKind, step: usize, limit: f64) -> Result<()> {
    let norm = x.norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite(solver.name()));
    }
    if norm > limit {
        return Err(Error::Divergence { solver: solver.name(), step, norm });
    }
    Ok(())
}

fn finish(mut sol: Solution, spacing: Spacing) -> Result<Solution> {
    sol.volume.ensure_finite("solver output")?;
    sol.volume.set_spacing(spacing)?;
    Ok(sol)
}

/// Dispatches on `cfg.solver`.
pub fn solve<P: Prior + ?Sized>(prior: &P, measurements: &[Measurement], cfg: &SolverConfig) -> Result<Solution> {
    cfg.validate()?;
    match cfg.solver {
        SolverKind::Dps => run_dps(prior, measurements, cfg),
        SolverKind::Dmap => run_dmap(prior, measurements, cfg),
        SolverKind::Dpps => run_dpps(prior, measurements, cfg),
        SolverKind::PnpAdmm => run_pnp_admm(prior, measurements, cfg),
        SolverKind::DiffPir => run_diffpir(prior, measurements, cfg),
    }
}

fn with_kind(cfg: &SolverConfig, kind: SolverKind) -> SolverConfig {
    SolverConfig { solver: kind, ..cfg.clone() }
}

/// DPS; a single measurement is the single-image case.
pub fn solve_dps<P: Prior + ?Sized>(prior: &P, measurements: &[Measurement], cfg: &SolverConfig) -> Result<Volume> {
    solve(prior, measurements, &with_kind(cfg, SolverKind::Dps)).map(|s| s.volume)
}

pub fn solve_dmap<P: Prior + ?Sized>(prior: &P, measurements: &[Measurement], cfg: &SolverConfig) -> Result<Volume> {
    solve(prior, measurements, &with_kind(cfg, SolverKind::Dmap)).map(|s| s.volume)
}

pub fn solve_dpps<P: Prior + ?Sized>(prior: &P, measurements: &[Measurement], cfg: &SolverConfig) -> Result<Volume> {
    solve(prior, measurements, &with_kind(cfg, SolverKind::Dpps)).map(|s| s.volume)
}

pub fn solve_pnp_admm<P: Prior + ?Sized>(
    prior: &P,
    measurements: &[Measurement],
    cfg: &SolverConfig,
) -> Result<Volume> {
    solve(prior, measurements, &with_kind(cfg, SolverKind::PnpAdmm)).map(|s| s.volume)
}

pub fn solve_diffpir<P: Prior + ?Sized>(prior: &P, measurements: &[Measurement], cfg: &SolverConfig) -> Result<Volume> {
    solve(prior, measurements, &with_kind(cfg, SolverKind::DiffPir)).map(|s| s.volume)
}

fn run_dps<P: Prior + ?Sized>(prior: &P, measurements: &[Measurement], cfg: &SolverConfig) -> Result<Solution> {
    let term = DataTerm::from_config(measurements, cfg)?;
    let sched = prior.schedule();
    let mut rng = SeededRng::new(cfg.seed);
    let mut x = sample_standard_normal(&mut rng, term.hr_dims)?;
    let times = time_grid(cfg.steps);
    let mut nfe = 0;
    for (j, w) in times.windows(2).enumerate() {
        let (t, s) = (w[0], w[1]);
        let mu0 = prior.denoise(&x, t)?;
        nfe += 1;
        let mut x_s = if cfg.eta > 0.0 {
            ddim_stochastic_from_x0(sched, &x, &mu0, t, s, cfg.eta, &mut rng)?
        } else {
            ddim_from_x0(sched, &x, &mu0, t, s)
        };
        // Gradient taken at x_t, applied to x_s.
        let (grad, energy) = term.gradient(prior, &x, t, &mu0)?;
        apply_correction(&mut x_s, &grad, step_size(cfg.zeta, energy), cfg)?;
        guard(&x_s, cfg.solver, j, cfg.divergence_limit)?;
        x = x_s;
    }
    let mut sol = Solution::new(x);
    sol.nfe = nfe;
    finish(sol, term.hr_spacing())
}

/// Mean and standard deviation of the DMAP proposal.
fn dmap_transition(
    sched: &dyn FlowSchedule,
    x_t: &Volume,
    x0: &Volume,
    t: f64,
    s: f64,
    kind: DmapTransition,
) -> (Volume, f64) {
    let (at, bt) = (sched.alpha(t), sched.beta(t));
    let (a_s, b_s) = (sched.alpha(s), sched.beta(s));
    match kind {
        DmapTransition::Renoise => (x0.scaled(a_s), b_s),
        DmapTransition::Ancestral => {
            let ratio = if a_s > 0.0 { (at * b_s) / (a_s * bt) } else { 0.0 };
            let var = (b_s * b_s * (1.0 - ratio * ratio)).max(0.0);
            let keep = libm::sqrt((b_s * b_s - var).max(0.0));
            let data = x_t.data().iter().zip(x0.data()).map(|(&x, &m)| a_s * m + keep * (x - at * m) / bt).collect();
            (x_t.with_data(data), libm::sqrt(var))
        }
    }
}

fn run_dmap<P: Prior + ?Sized>(prior: &P, measurements: &[Measurement], cfg: &SolverConfig) -> Result<Solution> {
    let term = DataTerm::from_config(measurements, cfg)?;
    let sched = prior.schedule();
    let mut rng = SeededRng::new(cfg.seed);
    let mut x = sample_standard_normal(&mut rng, term.hr_dims)?;
    let sqrt_d = libm::sqrt(x.len() as f64);
    let times = time_grid(cfg.steps);
    let mut nfe = 0;
    for (j, w) in times.windows(2).enumerate() {
        let (t, s) = (w[0], w[1]);
        let x0 = prior.denoise(&x, t)?;
        nfe += 1;
        let (mu_s, sigma) = dmap_transition(sched, &x, &x0, t, s, cfg.transition);
        let z = sample_standard_normal(&mut rng, x.dims())?;
        let mut x_s = Volume::lin_comb(1.0, &mu_s, sigma, &z)?;
        if sigma > 0.0 {
            let radius = sqrt_d * sigma;
            for _ in 0..cfg.inner_iters {
                let mu0 = prior.denoise(&x_s, s)?;
                nfe += 1;
                let (grad, energy) = term.gradient(prior, &x_s, s, &mu0)?;
                apply_correction(&mut x_s, &grad, step_size(cfg.zeta, energy), cfg)?;
                dmap_renormalize(&mut x_s, &mu_s, radius, cfg.projection)?;
            }
        }
        guard(&x_s, cfg.solver, j, cfg.divergence_limit)?;
        x = x_s;
    }
    let mut sol = Solution::new(x);
    sol.nfe = nfe;
    finish(sol, term.hr_spacing())
}

fn run_dpps<P: Prior + ?Sized>(prior: &P, measurements: &[Measurement], cfg: &SolverConfig) -> Result<Solution> {
    let term = DataTerm::from_config(measurements, cfg)?;
    let sched = prior.schedule();
    let mut rng = SeededRng::new(cfg.seed);
    let mut x = sample_standard_normal(&mut rng, term.hr_dims)?;
    let times = time_grid(cfg.steps);
    let mut nfe = 0;
    let mut cached: Option<Volume> = None;
    let mut selections = Vec::with_capacity(cfg.steps);
    for (j, w) in times.windows(2).enumerate() {
        let (t, s) = (w[0], w[1]);
        let mu0 = match cached.take() {
            Some(m) => m,
            None => {
                nfe += 1;
                prior.denoise(&x, t)?
            }
        };
        let (grad, energy) = term.gradient(prior, &x, t, &mu0)?;
        let zeta_t = step_size(cfg.zeta, energy);
        let mut best: Option<(f64, usize, Volume, Volume)> = None;
        for c in 0..cfg.candidates {
            let mut cand = ddim_stochastic_from_x0(sched, &x, &mu0, t, s, 1.0, &mut rng)?;
            apply_correction(&mut cand, &grad, zeta_t, cfg)?;
            let mu_c = prior.denoise(&cand, s)?;
            nfe += 1;
            let dist = term.energy(&mu_c)?;
            if best.as_ref().is_none_or(|b| dist < b.0) {
                best = Some((dist, c, cand, mu_c));
            }
        }
        let (_, idx, cand, mu_c) = best.expect("at least one candidate");
        guard(&cand, cfg.solver, j, cfg.divergence_limit)?;
        selections.push(idx);
        x = cand;
        cached = Some(mu_c);
    }
    let mut sol = Solution::new(x);
    sol.nfe = nfe;
    sol.selections = selections;
    finish(sol, term.hr_spacing())
}

/// Harmonic mean of the measurement noise variances `sigma_i^2`. Falls back
/// to `sigma_i^2 + sigma_floor` when some measurement is noise-free, and to 1
/// when that is zero too.
fn measured_data_variance(measurements: &[Measurement], sigma_floor: f64) -> Result<f64> {
    let n = measurements.len() as f64;
    if measurements.iter().all(|m| m.sigma > 0.0) {
        return Ok(n / measurements.iter().map(|m| 1.0 / (m.sigma * m.sigma)).sum::<f64>());
    }
    if sigma_floor > 0.0 {
        let raw = raw_inverse_variances(measurements, sigma_floor)?;
        return Ok(n / raw.iter().sum::<f64>());
    }
    Ok(1.0)
}

fn run_pnp_admm<P: Prior + ?Sized>(prior: &P, measurements: &[Measurement], cfg: &SolverConfig) -> Result<Solution> {
    let term = DataTerm::from_config(measurements, cfg)?;
    let sched = prior.schedule();
    let v = match cfg.data_variance {
        Some(v) => v,
        None => measured_data_variance(measurements, cfg.sigma_floor)?,
    };
    let inv_v = 1.0 / v;
    let rho = cfg.rho;
    // Denoiser noise level 1/sqrt(rho) on the x0 scale.
    let t_eff = time_for_noise_ratio(sched, 1.0 / libm::sqrt(rho)).clamp(0.02, 0.98);
    let a_eff = sched.alpha(t_eff);

    let bp = term.back_projection()?.scaled(inv_v);
    let mut x = Volume::zeros(term.hr_dims)?;
    let mut z = x.clone();
    let mut u = x.clone();
    let mut sol = Solution::new(x.clone());
    for it in 0..cfg.admm_iters {
        let mut rhs = bp.clone();
        rhs.add_scaled(rho, &z.sub(&u)?)?;
        let cg = conjugate_gradient(
            |p| {
                let mut out = term.normal(p)?.scaled(inv_v);
                out.add_scaled(rho, p)?;
                Ok(out)
            },
            &rhs,
            &x,
            cfg.cg_iters,
            cfg.cg_tol,
        )?;
        if !cg.converged {
            sol.cg_unconverged += 1;
            sol.warnings.push(alloc::format!(
                "admm iteration {it}: CG stopped at relative residual {:.3e}",
                cg.relative_residual
            ));
        }
        x = cg.x;
        let v_in = x.add(&u)?.scaled(a_eff);
        z = prior.denoise(&v_in, t_eff)?;
        sol.nfe += 1;
        u.add_scaled(1.0, &x)?;
        u.add_scaled(-1.0, &z)?;
        if !(z.is_finite() && u.is_finite()) {
            return Err(Error::NonFinite("pnp-admm iterate"));
        }
        guard(&z, cfg.solver, it, cfg.divergence_limit)?;
    }
    sol.volume = z;
    finish(sol, term.hr_spacing())
}

fn run_diffpir<P: Prior + ?Sized>(prior: &P, measurements: &[Measurement], cfg: &SolverConfig) -> Result<Solution> {
    let term = DataTerm::from_config(measurements, cfg)?;
    let sched = prior.schedule();
    let mut rng = SeededRng::new(cfg.seed);
    let mut x = sample_standard_normal(&mut rng, term.hr_dims)?;
    let bp = term.back_projection()?;
    let times = time_grid(cfg.steps);
    let mut sol = Solution::new(x.clone());
    for (j, w) in times.windows(2).enumerate() {
        let (t, s) = (w[0], w[1]);
        let x0 = prior.denoise(&x, t)?;
        sol.nfe += 1;
        let lambda = cfg.lambda.at(sched, t);
        let mut rhs = bp.clone();
        rhs.add_scaled(lambda, &x0)?;
        let cg = conjugate_gradient(
            |p| {
                let mut out = term.normal(p)?;
                out.add_scaled(lambda, p)?;
                Ok(out)
            },
            &rhs,
            &x0,
            cfg.cg_iters,
            cfg.cg_tol,
        )?;
        if !cg.converged {
            sol.cg_unconverged += 1;
            sol.warnings
                .push(alloc::format!("diffpir step {j}: CG stopped at relative residual {:.3e}", cg.relative_residual));
        }
        x = ddim_from_x0(sched, &x, &cg.x, t, s);
        guard(&x, cfg.solver, j, cfg.divergence_limit)?;
    }
    sol.volume = x;
    finish(sol, term.hr_spacing())
}
