//! TOML run configuration. Every table rejects unknown keys.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceSpec, SpectrumOptions, DEFAULT_SITE_BUDGET};
use crate::free_energy::{content_digest, EpsilonPolicy, Estimator, FitKind, LatticeSize, Model, ModelConfig, StepPolicy, SweepSpec};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Model,
    pub covariance: CovarianceSpec,
    pub lattice: LatticeBlock,
    pub time: TimeBlock,
    pub sweep: SweepBlock,
    #[serde(default)]
    pub spectrum: SpectrumBlock,
    #[serde(default)]
    pub fit: Option<FitBlock>,
    #[serde(default)]
    pub checks: ChecksBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeBlock {
    pub d: usize,
    /// Sites per axis.
    #[serde(default)]
    pub extent: Option<usize>,
    /// Physical side length (Brownian model); the site count is `ceil(width / ε)`.
    #[serde(default)]
    pub width: Option<f64>,
    /// Fixed ε (Brownian model).
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Prefactor of the automatic ε (Brownian model).
    #[serde(default)]
    pub epsilon_prefactor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeBlock {
    pub horizons: Vec<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Transfer,
    Montecarlo,
}

fn default_n_paths() -> usize {
    1000
}

fn default_checkpoint_every() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub betas: Vec<f64>,
    pub n_replicas: usize,
    pub seed: u64,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    /// Work items between checkpoint flushes.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_clip() -> f64 {
    1e-3
}

fn default_budget() -> usize {
    DEFAULT_SITE_BUDGET
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumBlock {
    #[serde(default = "default_clip")]
    pub clip_threshold: f64,
    #[serde(default = "default_budget")]
    pub site_budget: usize,
}

impl Default for SpectrumBlock {
    fn default() -> Self {
        Self { clip_threshold: default_clip(), site_budget: default_budget() }
    }
}

fn default_gamma() -> f64 {
    0.5
}

fn default_beta_max() -> f64 {
    f64::INFINITY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitBlock {
    pub kind: FitKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
}

fn default_covariance_replicas() -> usize {
    2000
}

fn default_pair_replicas() -> usize {
    100_000
}

fn default_pair_duration() -> f64 {
    1.0
}

fn default_annealed_replicas() -> usize {
    10_000
}

fn default_check_steps() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksBlock {
    #[serde(default = "default_covariance_replicas")]
    pub covariance_replicas: usize,
    #[serde(default = "default_check_steps")]
    pub covariance_steps: usize,
    #[serde(default = "default_pair_replicas")]
    pub pair_replicas: usize,
    #[serde(default = "default_pair_duration")]
    pub pair_duration: f64,
    #[serde(default = "default_annealed_replicas")]
    pub annealed_replicas: usize,
}

impl Default for ChecksBlock {
    fn default() -> Self {
        Self {
            covariance_replicas: default_covariance_replicas(),
            covariance_steps: default_check_steps(),
            pair_replicas: default_pair_replicas(),
            pair_duration: default_pair_duration(),
            annealed_replicas: default_annealed_replicas(),
        }
    }
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Content hash of everything except the output location.
    pub fn digest(&self) -> String {
        let mut view = self.clone();
        view.output = OutputBlock { dir: PathBuf::new() };
        content_digest(&view)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let l = &self.lattice;
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        let size = match (l.extent, l.width) {
            (Some(e), None) => LatticeSize::Sites(e),
            (None, Some(w)) if self.model == Model::BrownianEps => LatticeSize::Width(w),
            (None, Some(_)) => return bad("lattice.width applies to the brownian-eps model only"),
            (None, None) => return bad("lattice needs extent or width"),
            (Some(_), Some(_)) => return bad("lattice.extent and lattice.width are exclusive"),
        };
        let epsilon = match (self.model, l.epsilon, l.epsilon_prefactor) {
            (Model::LatticeWalk, None, None) => EpsilonPolicy::Fixed(1.0),
            (Model::LatticeWalk, _, _) => return bad("ε settings apply to the brownian-eps model only"),
            (Model::BrownianEps, Some(e), None) => EpsilonPolicy::Fixed(e),
            (Model::BrownianEps, None, p) => EpsilonPolicy::Auto { prefactor: p.unwrap_or(1.0) },
            (Model::BrownianEps, Some(_), Some(_)) => return bad("lattice.epsilon and lattice.epsilon_prefactor are exclusive"),
        };
        let estimator = match self.sweep.method {
            Method::Transfer => Estimator::Transfer,
            Method::Montecarlo => Estimator::MonteCarlo { n_paths: self.sweep.n_paths },
        };
        Ok(ModelConfig {
            model: self.model,
            covariance: self.covariance.clone(),
            d: l.d,
            size,
            epsilon,
            dt: self.time.dt.map_or(StepPolicy::Auto, StepPolicy::Fixed),
            estimator,
            spectrum: SpectrumOptions { clip_threshold: self.spectrum.clip_threshold, site_budget: self.spectrum.site_budget },
        })
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        if self.sweep.checkpoint_every == 0 {
            return Err(Error::InvalidParameter("sweep.checkpoint_every must be positive".into()));
        }
        Ok(SweepSpec {
            model: self.model_config()?,
            betas: self.sweep.betas.clone(),
            horizons: self.time.horizons.clone(),
            n_replicas: self.sweep.n_replicas,
            seed: self.sweep.seed,
        })
    }
}
