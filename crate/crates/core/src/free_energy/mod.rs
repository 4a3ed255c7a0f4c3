//! Free energy `p_t(β) = E[log Z_t] / t` over environment replicas.
//!
//! A sweep is planned once ([`SweepPlan`]) and then executed as independent
//! work items, one per (group, replica). A group is a set of β values sharing
//! one lattice and one time step, so a single pass over the environment yields
//! `log Z` for every β and every horizon of the group. Results are reduced by
//! key, which makes the output independent of scheduling and lets callers
//! checkpoint and resume at replica granularity.

mod fit;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covariance::{CovarianceSpec, Lattice, SpectrumOptions};
use crate::environment::{sample_slab, Coarsened, FieldSampler, TimeGrid, SLAB_BUDGET};
use crate::partition::{montecarlo_logz, propagate, PathSampler, WalkKernel, BOUNDARY_FLAG};
use crate::seeding::{mix, Domain};
use crate::stats::mean_stderr;
use crate::{exec, Error, Result};

pub use fit::{fit_log_corrected, fit_power_law, FitKind, FitResidual, ScalingFit, BOOTSTRAP_RESAMPLES};
pub use report::{invariant_report, CheckStatus, InvariantCheck, InvariantReport};

/// Minimum replica count for a free energy estimate.
pub const MIN_REPLICAS: usize = 2;

/// Reference path law.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Model {
    /// Continuous-time simple random walk on `Z^d`.
    #[serde(rename = "lattice-walk")]
    LatticeWalk,
    /// Brownian motion observed through its ε-discretization.
    #[serde(rename = "brownian-eps")]
    BrownianEps,
}

impl Model {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::LatticeWalk => "lattice-walk",
            Self::BrownianEps => "brownian-eps",
        }
    }
}

/// How ε is chosen in the Brownian model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum EpsilonPolicy {
    Fixed(f64),
    /// `prefactor · β^{-1/(1+3H)}` with `H` the Hölder exponent of the
    /// covariance; β below 1 is treated as 1.
    Auto { prefactor: f64 },
}

/// How the time step is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum StepPolicy {
    Fixed(f64),
    /// `min(walk limit, 0.1 / (β_max² q0))`, where the walk limit is `0.05/d`
    /// for the lattice walk and `0.1 ε²/d` for the Brownian model.
    Auto,
}

/// Lattice extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum LatticeSize {
    Sites(usize),
    /// Physical side length; the site count follows from ε.
    Width(f64),
}

/// Estimator of `log Z` per replica.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Estimator {
    Transfer,
    MonteCarlo { n_paths: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub model: Model,
    pub covariance: CovarianceSpec,
    pub d: usize,
    pub size: LatticeSize,
    pub epsilon: EpsilonPolicy,
    pub dt: StepPolicy,
    pub estimator: Estimator,
    pub spectrum: SpectrumOptions,
}

impl ModelConfig {
    /// Lattice-walk model with automatic time step and transfer estimator.
    pub fn lattice_walk(covariance: CovarianceSpec, d: usize, extent: usize) -> Self {
        Self {
            model: Model::LatticeWalk,
            covariance,
            d,
            size: LatticeSize::Sites(extent),
            epsilon: EpsilonPolicy::Fixed(1.0),
            dt: StepPolicy::Auto,
            estimator: Estimator::Transfer,
            spectrum: SpectrumOptions::default(),
        }
    }

    /// Brownian model with automatic ε and time step.
    pub fn brownian(covariance: CovarianceSpec, d: usize, width: f64) -> Self {
        Self {
            model: Model::BrownianEps,
            covariance,
            d,
            size: LatticeSize::Width(width),
            epsilon: EpsilonPolicy::Auto { prefactor: 1.0 },
            dt: StepPolicy::Auto,
            estimator: Estimator::Transfer,
            spectrum: SpectrumOptions::default(),
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = StepPolicy::Fixed(dt);
        self
    }

    pub fn with_epsilon(mut self, epsilon: EpsilonPolicy) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_estimator(mut self, estimator: Estimator) -> Self {
        self.estimator = estimator;
        self
    }

    /// ε used at inverse temperature `beta` (1 for the lattice walk).
    pub fn epsilon_at(&self, beta: f64) -> Result<f64> {
        if self.model == Model::LatticeWalk {
            return Ok(1.0);
        }
        let eps = match self.epsilon {
            EpsilonPolicy::Fixed(e) => e,
            EpsilonPolicy::Auto { prefactor } => {
                let h = self.covariance.holder_exponent().ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "automatic ε needs a Hölder exponent; family {} has none",
                        self.covariance.family_name()
                    ))
                })?;
                prefactor * beta.max(1.0).powf(-1.0 / (1.0 + 3.0 * h))
            }
        };
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidParameter(format!("ε must be positive, got {eps}")));
        }
        Ok(eps)
    }

    /// Time step before alignment to the horizons.
    pub fn raw_dt(&self, epsilon: f64, beta_max: f64) -> Result<f64> {
        let dt = match self.dt {
            StepPolicy::Fixed(dt) => dt,
            StepPolicy::Auto => {
                let d = self.d as f64;
                let walk = match self.model {
                    Model::LatticeWalk => 0.05 / d,
                    Model::BrownianEps => 0.1 * epsilon * epsilon / d,
                };
                let weight = 0.1 / (beta_max * beta_max * self.covariance.q0());
                walk.min(weight)
            }
        };
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        Ok(dt)
    }

    fn lattice(&self, epsilon: f64) -> Result<Lattice> {
        let extent = match self.size {
            LatticeSize::Sites(l) => l,
            LatticeSize::Width(w) => {
                if !(w > 0.0 && w.is_finite()) {
                    return Err(Error::InvalidParameter(format!("width must be positive, got {w}")));
                }
                ((w / epsilon).ceil() as usize).max(3)
            }
        };
        let lattice = Lattice::new(self.d, extent, epsilon)?;
        lattice.check_budget(self.spectrum.site_budget)?;
        Ok(lattice)
    }

    fn kernel(&self, dt: f64, epsilon: f64) -> Result<WalkKernel> {
        match self.model {
            Model::LatticeWalk => WalkKernel::lattice_walk(self.d, dt),
            Model::BrownianEps => WalkKernel::brownian(self.d, dt, epsilon),
        }
    }
}

/// Everything that determines the numbers of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSpec {
    pub model: ModelConfig,
    /// Strictly increasing, non-negative.
    pub betas: Vec<f64>,
    /// Strictly increasing integer multiples of the first.
    pub horizons: Vec<f64>,
    pub n_replicas: usize,
    pub seed: u64,
}

/// Hex prefix of the SHA-256 of a value's JSON form.
pub fn content_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// One estimate of `p_t(β)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeEnergyPoint {
    pub beta: f64,
    pub t: f64,
    pub n_steps: usize,
    pub model: Model,
    pub epsilon: Option<f64>,
    /// Replica mean of `log Z_t / t`.
    pub mean_p: f64,
    pub stderr: f64,
    pub n_replicas: usize,
    /// Replica mean of the endpoint mass near the periodic seam.
    pub boundary_mass: f64,
    /// Monte Carlo estimates with too few effective samples.
    pub unreliable: usize,
    /// Set by [`extrapolate_in_t`].
    pub stabilized: Option<bool>,
    pub t_monotone: Option<bool>,
}

impl FreeEnergyPoint {
    /// `β² q0 / 2 - p`, the distance to the annealed bound.
    pub fn margin(&self, q0: f64) -> f64 {
        self.beta * self.beta * q0 / 2.0 - self.mean_p
    }

    pub fn boundary_flagged(&self) -> bool {
        self.boundary_mass > BOUNDARY_FLAG
    }
}

/// Points ordered by β at one horizon policy.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeEnergyCurve {
    pub model: Model,
    pub d: usize,
    pub family: String,
    pub q0: f64,
    pub digest: String,
    pub seed: u64,
    pub points: Vec<FreeEnergyPoint>,
    /// Smallest second divided difference in β of per-replica `log Z`, over
    /// groups with at least three β values.
    pub min_convexity: Option<f64>,
}

/// One row of the curve CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub model: String,
    pub d: usize,
    pub family: String,
    pub params_digest: String,
    pub beta: f64,
    pub t: f64,
    pub n_steps: usize,
    pub epsilon: Option<f64>,
    pub n_replicas: usize,
    pub mean_p: f64,
    pub stderr: f64,
    pub margin: f64,
    pub stabilized: Option<bool>,
    pub boundary_mass: f64,
    pub seed: u64,
}

impl FreeEnergyCurve {
    pub fn rows(&self) -> Vec<CurveRow> {
        self.points.iter().map(|p| self.row(p)).collect()
    }

    pub fn row(&self, p: &FreeEnergyPoint) -> CurveRow {
        CurveRow {
            model: self.model.as_str().into(),
            d: self.d,
            family: self.family.clone(),
            params_digest: self.digest.clone(),
            beta: p.beta,
            t: p.t,
            n_steps: p.n_steps,
            epsilon: p.epsilon,
            n_replicas: p.n_replicas,
            mean_p: p.mean_p,
            stderr: p.stderr,
            margin: p.margin(self.q0),
            stabilized: p.stabilized,
            boundary_mass: p.boundary_mass,
            seed: self.seed,
        }
    }
}

/// β values sharing a lattice and a time step.
#[derive(Debug)]
pub struct GroupPlan {
    /// Indices into [`SweepSpec::betas`].
    pub beta_index: Vec<usize>,
    pub epsilon: f64,
    pub dt: f64,
    /// Step count of each horizon.
    pub checkpoints: Vec<usize>,
    pub kernel: WalkKernel,
    sampler: FieldSampler,
}

impl GroupPlan {
    pub fn lattice(&self) -> &Lattice {
        self.sampler.lattice()
    }

    pub fn grid(&self) -> TimeGrid {
        let n = *self.checkpoints.last().expect("at least one horizon");
        TimeGrid::new(n as f64 * self.dt, n).expect("validated grid")
    }
}

/// Output of one work item: `log Z` of one replica for every β of a group at
/// every horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaResult {
    pub group: usize,
    pub replica: u64,
    /// `[β in group][horizon]`.
    pub log_z: Vec<Vec<f64>>,
    pub boundary_mass: Vec<Vec<f64>>,
    /// Monte Carlo effective sample sizes, same shape (empty for transfer).
    #[serde(default)]
    pub ess: Vec<Vec<f64>>,
}

/// A validated sweep, ready to run item by item.
#[derive(Debug)]
pub struct SweepPlan {
    pub spec: SweepSpec,
    pub groups: Vec<GroupPlan>,
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

impl SweepPlan {
    pub fn new(spec: SweepSpec) -> Result<Self> {
        let m = &spec.model;
        m.covariance.validate()?;
        if m.d == 0 {
            return Err(Error::InvalidParameter("d must be at least 1".into()));
        }
        if spec.betas.is_empty() || !strictly_increasing(&spec.betas) || spec.betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(Error::InvalidParameter("β grid must be non-empty, finite, non-negative and strictly increasing".into()));
        }
        if spec.horizons.is_empty() || !strictly_increasing(&spec.horizons) || !(spec.horizons[0] > 0.0) {
            return Err(Error::InvalidParameter("horizons must be positive and strictly increasing".into()));
        }
        let t0 = spec.horizons[0];
        let multiples: Vec<usize> = spec
            .horizons
            .iter()
            .map(|t| {
                let r = t / t0;
                if (r - r.round()).abs() > 1e-9 * r {
                    Err(Error::OffGrid(*t))
                } else {
                    Ok(r.round() as usize)
                }
            })
            .collect::<Result<_>>()?;
        if spec.n_replicas < MIN_REPLICAS {
            return Err(Error::InvalidParameter(format!("need at least {MIN_REPLICAS} replicas")));
        }
        if let Estimator::MonteCarlo { n_paths } = m.estimator {
            if n_paths < 100 {
                return Err(Error::InvalidParameter("Monte Carlo needs at least 100 paths".into()));
            }
        }

        let auto_eps = m.model == Model::BrownianEps && matches!(m.epsilon, EpsilonPolicy::Auto { .. });
        let index_sets: Vec<Vec<usize>> = if auto_eps {
            (0..spec.betas.len()).map(|i| vec![i]).collect()
        } else {
            vec![(0..spec.betas.len()).collect()]
        };
        let mut groups = Vec::with_capacity(index_sets.len());
        for beta_index in index_sets {
            let beta_max = beta_index.iter().map(|&i| spec.betas[i]).fold(0.0, f64::max);
            let epsilon = m.epsilon_at(beta_max)?;
            let raw = m.raw_dt(epsilon, beta_max)?;
            let n0 = (t0 / raw - 1e-9).ceil().max(1.0) as usize;
            let dt = t0 / n0 as f64;
            let checkpoints: Vec<usize> = multiples.iter().map(|k| k * n0).collect();
            let lattice = m.lattice(epsilon)?;
            let kernel = m.kernel(dt, epsilon)?;
            if let Estimator::MonteCarlo { .. } = m.estimator {
                let steps = *checkpoints.last().unwrap();
                if lattice.sites().saturating_mul(steps) > SLAB_BUDGET {
                    return Err(Error::BudgetExceeded { sites: lattice.sites().saturating_mul(steps), budget: SLAB_BUDGET });
                }
            }
            let sampler = FieldSampler::new(&m.covariance, &lattice, &m.spectrum)?;
            groups.push(GroupPlan { beta_index, epsilon, dt, checkpoints, kernel, sampler });
        }
        Ok(Self { spec, groups })
    }

    pub fn n_items(&self) -> usize {
        self.groups.len() * self.spec.n_replicas
    }

    /// `(group, replica)` of item `i`; replicas vary fastest.
    pub fn item(&self, i: usize) -> (usize, u64) {
        (i / self.spec.n_replicas, (i % self.spec.n_replicas) as u64)
    }

    pub fn run_item(&self, i: usize) -> Result<ReplicaResult> {
        let (g, replica) = self.item(i);
        let group = &self.groups[g];
        let betas: Vec<f64> = group.beta_index.iter().map(|&b| self.spec.betas[b]).collect();
        let grid = group.grid();
        match self.spec.model.estimator {
            Estimator::Transfer => {
                let mut stream = group.sampler.stream(grid, self.spec.seed, replica);
                let p = propagate(&mut stream, &betas, &group.kernel, &group.checkpoints)?;
                Ok(ReplicaResult { group: g, replica, log_z: p.log_z, boundary_mass: p.boundary_mass, ess: Vec::new() })
            }
            Estimator::MonteCarlo { n_paths } => {
                let path_sampler = match self.spec.model.model {
                    Model::LatticeWalk => PathSampler::JumpProcess,
                    Model::BrownianEps => PathSampler::Brownian,
                };
                let path_seed = mix(self.spec.seed, Domain::Path, replica);
                let shape = || vec![Vec::with_capacity(group.checkpoints.len()); betas.len()];
                let (mut log_z, mut boundary, mut ess) = (shape(), shape(), shape());
                for &n in &group.checkpoints {
                    let slab = sample_slab(&group.sampler, TimeGrid::new(n as f64 * group.dt, n)?, self.spec.seed, replica)?;
                    for (b, &beta) in betas.iter().enumerate() {
                        let est = montecarlo_logz(&slab, beta, &path_sampler, n_paths, path_seed)?;
                        log_z[b].push(est.log_z);
                        boundary[b].push(est.boundary_mass);
                        ess[b].push(est.ess.unwrap_or(f64::INFINITY));
                    }
                }
                Ok(ReplicaResult { group: g, replica, log_z, boundary_mass: boundary, ess })
            }
        }
    }

    /// Runs every item not already in `done`, in parallel.
    pub fn run_missing(&self, done: &BTreeMap<usize, ReplicaResult>) -> Result<BTreeMap<usize, ReplicaResult>> {
        let todo: Vec<usize> = (0..self.n_items()).filter(|i| !done.contains_key(i)).collect();
        let fresh = exec::map_indexed(todo.len(), |j| self.run_item(todo[j]));
        let mut all = done.clone();
        for (i, r) in todo.into_iter().zip(fresh) {
            all.insert(i, r?);
        }
        Ok(all)
    }

    /// Keyed reduction of completed items into per-(β, t) points.
    pub fn assemble(&self, results: &BTreeMap<usize, ReplicaResult>) -> Result<SweepResult> {
        if results.len() != self.n_items() {
            return Err(Error::ShapeMismatch(format!("{} of {} work items present", results.len(), self.n_items())));
        }
        let spec = &self.spec;
        let nh = spec.horizons.len();
        let mut points = vec![Vec::with_capacity(nh); spec.betas.len()];
        let mut min_convexity: Option<f64> = None;
        for (g, group) in self.groups.iter().enumerate() {
            let items: Vec<&ReplicaResult> = (0..spec.n_replicas).map(|r| &results[&(g * spec.n_replicas + r)]).collect();
            for (local, &b) in group.beta_index.iter().enumerate() {
                let beta = spec.betas[b];
                for (h, &t) in spec.horizons.iter().enumerate() {
                    let values: Vec<f64> = items.iter().map(|r| r.log_z[local][h] / t).collect();
                    if let Some(bad) = items.iter().find(|r| !r.log_z[local][h].is_finite()) {
                        return Err(Error::NonFinite(format!("replica {} at β = {beta}, t = {t}", bad.replica)));
                    }
                    let (mean_p, stderr) = mean_stderr(&values);
                    let boundary = items.iter().map(|r| r.boundary_mass[local][h]).sum::<f64>() / items.len() as f64;
                    let unreliable = items.iter().filter(|r| r.ess.get(local).is_some_and(|e| e[h] < 10.0)).count();
                    points[b].push(FreeEnergyPoint {
                        beta,
                        t,
                        n_steps: group.checkpoints[h],
                        model: spec.model.model,
                        epsilon: (spec.model.model == Model::BrownianEps).then_some(group.epsilon),
                        mean_p,
                        stderr,
                        n_replicas: spec.n_replicas,
                        boundary_mass: boundary,
                        unreliable,
                        stabilized: None,
                        t_monotone: None,
                    });
                }
            }
            if group.beta_index.len() >= 3 {
                let betas: Vec<f64> = group.beta_index.iter().map(|&b| spec.betas[b]).collect();
                for r in &items {
                    for h in 0..nh {
                        let ys: Vec<f64> = r.log_z.iter().map(|v| v[h]).collect();
                        let c = min_second_difference(&betas, &ys);
                        min_convexity = Some(min_convexity.map_or(c, |m| m.min(c)));
                    }
                }
            }
        }
        Ok(SweepResult { spec: spec.clone(), points, min_convexity, digest: content_digest(spec) })
    }
}

/// Smallest second difference on a sorted, possibly uneven grid: the change
/// in slope times the local mean spacing, which is `y₊ - 2y + y₋` on a
/// uniform grid.
pub fn min_second_difference(x: &[f64], y: &[f64]) -> f64 {
    let mut min = f64::INFINITY;
    for i in 1..x.len().saturating_sub(1) {
        let left = (y[i] - y[i - 1]) / (x[i] - x[i - 1]);
        let right = (y[i + 1] - y[i]) / (x[i + 1] - x[i]);
        let scale = 0.5 * (x[i + 1] - x[i - 1]);
        min = min.min((right - left) * scale);
    }
    min
}

/// All points of a sweep, indexed `[β][horizon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub points: Vec<Vec<FreeEnergyPoint>>,
    pub min_convexity: Option<f64>,
    pub digest: String,
}

impl SweepResult {
    fn curve_with(&self, points: Vec<FreeEnergyPoint>) -> FreeEnergyCurve {
        let m = &self.spec.model;
        FreeEnergyCurve {
            model: m.model,
            d: m.d,
            family: m.covariance.family_name().into(),
            q0: m.covariance.q0(),
            digest: self.digest.clone(),
            seed: self.spec.seed,
            points,
            min_convexity: self.min_convexity,
        }
    }

    /// Every (β, t) point, β-major.
    pub fn all_points(&self) -> FreeEnergyCurve {
        self.curve_with(self.points.iter().flatten().cloned().collect())
    }

    /// One point per β: the largest horizon, extrapolated when there are at
    /// least three horizons.
    pub fn curve(&self) -> FreeEnergyCurve {
        let points = self
            .points
            .iter()
            .map(|by_t| if by_t.len() >= 3 { extrapolate_in_t(by_t).expect("same β") } else { by_t.last().unwrap().clone() })
            .collect();
        self.curve_with(points)
    }
}

/// Runs a whole sweep.
pub fn beta_sweep(spec: SweepSpec) -> Result<SweepResult> {
    let plan = SweepPlan::new(spec)?;
    let results = plan.run_missing(&BTreeMap::new())?;
    plan.assemble(&results)
}

/// `p_t(β)` at one β and one horizon.
pub fn estimate_pt(model: &ModelConfig, beta: f64, t: f64, n_replicas: usize, seed: u64) -> Result<FreeEnergyPoint> {
    let sweep = beta_sweep(SweepSpec { model: model.clone(), betas: vec![beta], horizons: vec![t], n_replicas, seed })?;
    Ok(sweep.points[0][0].clone())
}

/// `p_t(β)` at time steps `base_dt / 2^j` for `j = 0..=levels`. Every level
/// sums increments of the finest grid, so all levels see the same Brownian
/// environment and their differences isolate the discretization effect.
pub fn dt_refinement(model: &ModelConfig, beta: f64, t: f64, base_dt: f64, levels: u32, n_replicas: usize, seed: u64) -> Result<Vec<FreeEnergyPoint>> {
    if n_replicas < MIN_REPLICAS {
        return Err(Error::InvalidParameter(format!("need at least {MIN_REPLICAS} replicas")));
    }
    let base_steps = TimeGrid::with_dt(t, base_dt)?.n_steps;
    let factor_max = 1usize << levels;
    let fine = TimeGrid::new(t, base_steps * factor_max)?;
    let epsilon = model.epsilon_at(beta)?;
    let lattice = model.lattice(epsilon)?;
    let sampler = FieldSampler::new(&model.covariance, &lattice, &model.spectrum)?;
    let per_replica = exec::map_indexed(n_replicas, |r| -> Result<Vec<(f64, f64)>> {
        (0..=levels)
            .map(|j| {
                let factor = factor_max >> j;
                let mut source = Coarsened::new(sampler.stream(fine, seed, r as u64), factor)?;
                let kernel = model.kernel(fine.dt() * factor as f64, epsilon)?;
                let p = propagate(&mut source, &[beta], &kernel, &[fine.n_steps / factor])?;
                Ok((p.log_z[0][0], p.boundary_mass[0][0]))
            })
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((0..=levels as usize)
        .map(|j| {
            let values: Vec<f64> = per_replica.iter().map(|v| v[j].0 / t).collect();
            let (mean_p, stderr) = mean_stderr(&values);
            FreeEnergyPoint {
                beta,
                t,
                n_steps: base_steps << j,
                model: model.model,
                epsilon: (model.model == Model::BrownianEps).then_some(epsilon),
                mean_p,
                stderr,
                n_replicas,
                boundary_mass: per_replica.iter().map(|v| v[j].1).sum::<f64>() / n_replicas as f64,
                unreliable: 0,
                stabilized: None,
                t_monotone: None,
            }
        })
        .collect())
}

/// Largest-horizon point of a geometric horizon sequence, with a
/// stabilization flag `|p_last - p_prev| ≤ max(2 se, 0.02 p_last)` and a
/// monotonicity flag (nondecreasing within 3 se).
pub fn extrapolate_in_t(points: &[FreeEnergyPoint]) -> Result<FreeEnergyPoint> {
    if points.len() < 3 {
        return Err(Error::InvalidParameter("need at least three horizons".into()));
    }
    if points.windows(2).any(|w| w[0].beta != w[1].beta || !(w[0].t < w[1].t)) {
        return Err(Error::InvalidParameter("points must share β and have increasing t".into()));
    }
    let monotone = points.windows(2).all(|w| {
        let se = (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
        w[1].mean_p >= w[0].mean_p - 3.0 * se
    });
    let last = &points[points.len() - 1];
    let prev = &points[points.len() - 2];
    let se = (last.stderr.powi(2) + prev.stderr.powi(2)).sqrt();
    let stabilized = (last.mean_p - prev.mean_p).abs() <= (2.0 * se).max(0.02 * last.mean_p.abs());
    Ok(FreeEnergyPoint { stabilized: Some(stabilized), t_monotone: Some(monotone), ..last.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn white(d: usize, l: usize) -> ModelConfig {
        ModelConfig::lattice_walk(CovarianceSpec::white_noise(1.0), d, l)
    }

    fn point(beta: f64, t: f64, p: f64, se: f64) -> FreeEnergyPoint {
        FreeEnergyPoint {
            beta,
            t,
            n_steps: 1,
            model: Model::LatticeWalk,
            epsilon: None,
            mean_p: p,
            stderr: se,
            n_replicas: 2,
            boundary_mass: 0.0,
            unreliable: 0,
            stabilized: None,
            t_monotone: None,
        }
    }

    #[test]
    fn beta_zero_point_is_exact() {
        let p = estimate_pt(&white(1, 9), 0.0, 1.0, 8, 3).unwrap();
        assert_eq!((p.mean_p, p.stderr), (0.0, 0.0));
    }

    #[test]
    fn auto_dt_rules() {
        let m = white(2, 9);
        assert!((m.raw_dt(1.0, 0.0).unwrap() - 0.025).abs() < 1e-15);
        assert!((m.raw_dt(1.0, 10.0).unwrap() - 0.001).abs() < 1e-15);
        let b = ModelConfig::brownian(CovarianceSpec::powered_exponential(1.0, 0.5, 1.0), 1, 8.0);
        assert!((b.epsilon_at(32.0).unwrap() - 32f64.powf(-0.4)).abs() < 1e-15);
        assert_eq!(b.epsilon_at(0.0).unwrap(), 1.0);
        assert!((b.raw_dt(0.5, 0.0).unwrap() - 0.025).abs() < 1e-15);
        let w = ModelConfig::brownian(CovarianceSpec::white_noise(1.0), 1, 8.0);
        assert!(w.epsilon_at(2.0).is_err());
    }

    #[test]
    fn horizons_must_be_multiples() {
        let spec = SweepSpec { model: white(1, 9), betas: vec![1.0], horizons: vec![1.0, 1.5], n_replicas: 2, seed: 0 };
        assert!(matches!(SweepPlan::new(spec), Err(Error::OffGrid(_))));
    }

    #[test]
    fn sweep_shares_steps_across_horizons() {
        let spec = SweepSpec { model: white(1, 11), betas: vec![0.0, 1.0, 2.0], horizons: vec![0.5, 1.0, 2.0], n_replicas: 4, seed: 9 };
        let plan = SweepPlan::new(spec).unwrap();
        assert_eq!(plan.groups.len(), 1);
        let g = &plan.groups[0];
        assert_eq!(g.checkpoints, vec![20, 40, 80]);
        let res = beta_sweep(plan.spec.clone()).unwrap();
        assert_eq!(res.points[0][2].mean_p, 0.0);
        let direct = estimate_pt(&plan.spec.model.clone().with_dt(g.dt), 2.0, 1.0, 4, 9).unwrap();
        assert_eq!(direct.mean_p, res.points[2][1].mean_p);
        assert!(res.min_convexity.unwrap() >= -1e-9);
        let curve = res.curve();
        assert_eq!(curve.points.len(), 3);
        assert_eq!(curve.points[1].t, 2.0);
        assert!(curve.points[0].stabilized.unwrap());
    }

    #[test]
    fn resumed_items_reduce_identically() {
        let spec = SweepSpec { model: white(1, 9), betas: vec![0.5, 1.0], horizons: vec![1.0], n_replicas: 6, seed: 5 };
        let plan = SweepPlan::new(spec).unwrap();
        let full = plan.run_missing(&BTreeMap::new()).unwrap();
        let partial: BTreeMap<usize, ReplicaResult> = full.iter().filter(|(i, _)| *i % 2 == 0).map(|(i, r)| (*i, r.clone())).collect();
        let resumed = plan.run_missing(&partial).unwrap();
        assert_eq!(plan.assemble(&full).unwrap(), plan.assemble(&resumed).unwrap());
        assert!(plan.assemble(&partial).is_err());
    }

    #[test]
    fn extrapolation_flags() {
        let same: Vec<_> = [1.0, 2.0, 4.0].iter().map(|&t| point(1.0, t, 0.3, 0.01)).collect();
        let e = extrapolate_in_t(&same).unwrap();
        assert_eq!((e.t, e.mean_p, e.stabilized, e.t_monotone), (4.0, 0.3, Some(true), Some(true)));
        let zero: Vec<_> = [1.0, 2.0, 4.0].iter().map(|&t| point(0.0, t, 0.0, 0.0)).collect();
        assert_eq!(extrapolate_in_t(&zero).unwrap().stabilized, Some(true));
        let drifting = vec![point(1.0, 1.0, 0.5, 0.01), point(1.0, 2.0, 0.3, 0.01), point(1.0, 4.0, 0.1, 0.01)];
        let e = extrapolate_in_t(&drifting).unwrap();
        assert_eq!((e.stabilized, e.t_monotone), (Some(false), Some(false)));
        assert!(extrapolate_in_t(&same[..2]).is_err());
    }

    #[test]
    fn second_difference_on_uneven_grid() {
        let x = [0.0, 1.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        assert!((min_second_difference(&x, &y) - 4.5).abs() < 1e-12);
        let lin: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        assert!(min_second_difference(&x, &lin).abs() < 1e-12);
    }

    #[test]
    fn digest_is_stable_hex() {
        let spec = SweepSpec { model: white(1, 9), betas: vec![1.0], horizons: vec![1.0], n_replicas: 2, seed: 0 };
        let a = content_digest(&spec);
        assert_eq!(a.len(), 16);
        assert_eq!(a, content_digest(&spec.clone()));
        assert_ne!(a, content_digest(&SweepSpec { seed: 1, ..spec }));
    }

    #[test]
    fn refinement_levels_share_the_environment() {
        let pts = dt_refinement(&white(1, 11), 1.0, 1.0, 0.05, 2, 4, 2).unwrap();
        assert_eq!(pts.iter().map(|p| p.n_steps).collect::<Vec<_>>(), vec![20, 40, 80]);
        let direct = estimate_pt(&white(1, 11).with_dt(0.0125), 1.0, 1.0, 4, 2).unwrap();
        assert!((pts[2].mean_p - direct.mean_p).abs() < 1e-12);
        let zero = dt_refinement(&white(1, 11), 0.0, 1.0, 0.05, 1, 4, 2).unwrap();
        assert!(zero.iter().all(|p| p.mean_p == 0.0));
    }
}
