//! Run configuration. TOML with unknown keys rejected; see `CONFIG.md`.

use std::path::{Path, PathBuf};

use misr_core::phantoms::{exemplar_prior, Family, PhantomSpec};
use misr_core::samplers::{
    DmapProjection, DmapTransition, LambdaSchedule, ResidualNorm, SolverConfig, SolverKind, Weighting,
};
use misr_core::{Axis, MixturePrior};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, IoContext, Result};
use crate::pgm::Plane;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default = "one")]
    pub subjects: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sigma_base")]
    pub sigma_base: f64,
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default, rename = "acquisition")]
    pub acquisitions: Vec<Acquisition>,
    #[serde(default, rename = "solver")]
    pub solvers: Vec<SolverSpec>,
    #[serde(default)]
    pub ablation: Option<AblationConfig>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// Generated phantom grid. Ignored when `inputs` is set.
    pub dims: Option<[usize; 3]>,
    /// Draw subjects as jittered members of one template phantom.
    pub family_seed: Option<u64>,
    pub bias_amplitude: Option<f64>,
    /// Ground-truth MVOL1 volumes to use instead of phantoms, one per subject.
    pub inputs: Option<Vec<PathBuf>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default = "default_exemplars")]
    pub exemplars: usize,
    #[serde(default = "default_exemplar_seed")]
    pub exemplar_seed: u64,
    /// Component width; omitted means the leave-one-out estimate.
    pub tau: Option<f64>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { exemplars: default_exemplars(), exemplar_seed: default_exemplar_seed(), tau: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Acquisition {
    pub plane: Plane,
    pub k: usize,
}

impl Acquisition {
    pub fn axis(&self) -> Axis {
        self.plane.normal()
    }
}

/// Solver settings; every field except `name` overrides the library default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub name: String,
    pub steps: Option<usize>,
    pub zeta: Option<f64>,
    pub sigma_floor: Option<f64>,
    pub inner_iters: Option<usize>,
    pub candidates: Option<usize>,
    pub rho: Option<f64>,
    pub admm_iters: Option<usize>,
    pub cg_iters: Option<usize>,
    pub cg_tol: Option<f64>,
    /// Constant HQS weight; omitted means the noise-to-signal schedule.
    pub lambda: Option<f64>,
    pub eta: Option<f64>,
    /// "noise" or "uniform".
    pub weighting: Option<String>,
    /// "squared" or "unsquared".
    pub norm: Option<String>,
    /// "sphere" or "literal".
    pub projection: Option<String>,
    /// "renoise" or "ancestral".
    pub transition: Option<String>,
    pub data_variance: Option<f64>,
    /// Trust-region RMS cap; 0 disables it.
    pub max_correction_rms: Option<f64>,
    pub divergence_limit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Noise levels to sweep; omitted means the top-level `sigma_base`.
    pub sigma_base: Option<Vec<f64>>,
}

fn one() -> usize {
    1
}
fn default_sigma_base() -> f64 {
    0.1
}
fn default_exemplars() -> usize {
    16
}
fn default_exemplar_seed() -> u64 {
    1_000_000
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn choice<T: Copy>(field: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(n, _)| n.eq_ignore_ascii_case(value)).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        config_err(format!("solver.{field}: unknown value '{value}' (expected one of {})", names.join(", ")))
    })
}

impl SolverSpec {
    pub fn named(name: &str) -> Self {
        SolverSpec { name: name.to_string(), ..Default::default() }
    }

    pub fn kind(&self) -> Result<SolverKind> {
        self.name.parse().map_err(|e: misr_core::Error| config_err(format!("solver.name: {e}")))
    }

    pub fn build(&self, seed: u64) -> Result<SolverConfig> {
        let mut c = SolverConfig::new(self.kind()?);
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            steps,
            zeta,
            sigma_floor,
            inner_iters,
            candidates,
            rho,
            admm_iters,
            cg_iters,
            cg_tol,
            eta,
            divergence_limit
        );
        if let Some(l) = self.lambda {
            c.lambda = LambdaSchedule::Constant(l);
        }
        if let Some(w) = &self.weighting {
            c.weighting = choice("weighting", w, &[("noise", Weighting::Noise), ("uniform", Weighting::Uniform)])?;
        }
        if let Some(n) = &self.norm {
            c.norm = choice("norm", n, &[("squared", ResidualNorm::Squared), ("unsquared", ResidualNorm::Unsquared)])?;
        }
        if let Some(p) = &self.projection {
            c.projection =
                choice("projection", p, &[("sphere", DmapProjection::Sphere), ("literal", DmapProjection::Literal)])?;
        }
        if let Some(t) = &self.transition {
            c.transition = choice(
                "transition",
                t,
                &[("renoise", DmapTransition::Renoise), ("ancestral", DmapTransition::Ancestral)],
            )?;
        }
        if self.data_variance.is_some() {
            c.data_variance = self.data_variance;
        }
        if let Some(r) = self.max_correction_rms {
            c.max_correction_rms = if r > 0.0 { Some(r) } else { None };
        }
        c.seed = seed;
        c.validate().map_err(|e| config_err(format!("solver '{}': {e}", self.name)))?;
        Ok(c)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|e| match e {
            HarnessError::Config(msg) => config_err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let max_seed = i64::MAX as u64;
        if self.seed.checked_add(self.subjects as u64).is_none_or(|s| s > max_seed)
            || self.prior.exemplar_seed > max_seed
        {
            return Err(config_err("seeds must stay below 2^63 so they round-trip through TOML integers"));
        }
        if self.subjects == 0 {
            return Err(config_err("subjects must be at least 1"));
        }
        if !(self.sigma_base >= 0.0 && self.sigma_base.is_finite()) {
            return Err(config_err("sigma_base must be finite and non-negative"));
        }
        match (&self.phantom.inputs, self.phantom.dims) {
            (Some(inputs), _) if inputs.len() != self.subjects => {
                return Err(config_err(format!(
                    "phantom.inputs lists {} volumes but subjects = {}",
                    inputs.len(),
                    self.subjects
                )))
            }
            (None, None) => return Err(config_err("phantom: set either dims or inputs")),
            (None, Some(d)) if d.contains(&0) => return Err(config_err("phantom.dims must be positive")),
            _ => {}
        }
        if self.acquisitions.is_empty() {
            return Err(config_err("at least one [[acquisition]] is required"));
        }
        for (i, a) in self.acquisitions.iter().enumerate() {
            if a.k == 0 {
                return Err(config_err(format!("acquisition[{i}].k must be at least 1")));
            }
        }
        if self.prior.exemplars < 2 && self.prior.tau.is_none() {
            return Err(config_err("prior: the leave-one-out width needs at least two exemplars; set prior.tau"));
        }
        if let Some(t) = self.prior.tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(config_err("prior.tau must be positive"));
            }
        }
        for (i, a) in self.acquisitions.iter().enumerate() {
            if self.acquisitions[..i].contains(a) {
                return Err(config_err(format!("acquisition[{i}] repeats {} k={}", a.plane, a.k)));
            }
        }
        let mut kinds = Vec::new();
        for s in &self.solvers {
            s.build(0)?;
            let kind = s.kind()?;
            if kinds.contains(&kind) {
                return Err(config_err(format!("solver '{kind}' is configured twice")));
            }
            kinds.push(kind);
        }
        Ok(())
    }

    /// Phantom seed for subject `index`.
    pub fn subject_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }

    /// Noise seed for subject `index`, a separate stream from the phantom.
    pub fn noise_seed(&self, index: usize) -> u64 {
        // Masked to 63 bits so it fits a TOML integer in the manifest.
        misr_core::SeededRng::derive_seed(self.subject_seed(index), 0x4e4f495345) & (i64::MAX as u64)
    }

    pub fn phantom_template(&self, dims: [usize; 3]) -> PhantomSpec {
        let mut spec = PhantomSpec::new(dims, 0);
        spec.bias_amplitude = self.phantom.bias_amplitude;
        spec.family = self.phantom.family_seed.map(Family::new);
        spec
    }

    /// Ground-truth grid: the phantom dims, or the first input's dims.
    pub fn grid(&self) -> Result<[usize; 3]> {
        match (&self.phantom.inputs, self.phantom.dims) {
            (Some(inputs), _) => Ok(crate::mvol::read(&inputs[0])?.dims()),
            (None, Some(d)) => Ok(d),
            (None, None) => Err(config_err("phantom: set either dims or inputs")),
        }
    }

    pub fn build_prior(&self) -> Result<MixturePrior> {
        let template = self.phantom_template(self.grid()?);
        Ok(exemplar_prior(&template, self.prior.exemplars, self.prior.exemplar_seed, self.prior.tau)?)
    }

    /// Configured solvers, optionally restricted or replaced by `--solver`.
    pub fn select_solvers(&self, names: Option<&[String]>) -> Result<Vec<SolverSpec>> {
        let picked: Vec<SolverSpec> = match names {
            None if self.solvers.is_empty() => {
                return Err(config_err("no [[solver]] configured and no --solver given"))
            }
            None => self.solvers.clone(),
            Some(names) => names
                .iter()
                .map(|n| {
                    let kind: SolverKind =
                        n.parse().map_err(|e: misr_core::Error| config_err(format!("--solver: {e}")))?;
                    Ok(self
                        .solvers
                        .iter()
                        .find(|s| s.kind().ok() == Some(kind))
                        .cloned()
                        .unwrap_or_else(|| SolverSpec::named(kind.name())))
                })
                .collect::<Result<_>>()?,
        };
        Ok(picked)
    }
}
