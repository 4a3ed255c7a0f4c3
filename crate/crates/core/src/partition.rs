//! `log Z_t` for a frozen environment.
//!
//! Three estimators of the same discrete-time model:
//!
//! * [`transfer_matrix_logz`]: Feynman–Kac propagation of the unnormalized
//!   endpoint density, weight at the occupied site first, then one kernel step.
//! * [`enumerate_logz`]: the exact sum over all `(2d+1)^n` trajectories
//!   (small instances only, used as an oracle).
//! * [`montecarlo_logz`]: mean of `exp(β(-H_t))` over sampled paths.
//!
//! The transfer matrix keeps a normalized density and accumulates
//! `log Σ_x π_k(x) w_k(x)`; the kernel is stochastic, so its mass is treated
//! as exactly conserved. With all weights equal to one this gives `log Z = 0`
//! exactly.

use rand::Rng;

use crate::covariance::Lattice;
use crate::environment::{EnvironmentSlab, FieldSampler, IncrementSource, TimeGrid};
use crate::exec;
use crate::polymer::{self, hamiltonian, JumpPath};
use crate::seeding::{stream_rng, Domain};
use crate::stats::mean_stderr;
use crate::{Error, Result};

/// Boundary mass above which an estimate is flagged.
pub const BOUNDARY_FLAG: f64 = 1e-3;

/// Largest admissible total hop probability `2d · p_hop`.
pub const MAX_HOP_TOTAL: f64 = 0.1;

/// One time step of a lazy nearest-neighbour walk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WalkKernel {
    pub d: usize,
    pub dt: f64,
    /// Probability of moving to one given neighbour.
    pub hop: f64,
}

impl WalkKernel {
    fn checked(d: usize, dt: f64, hop: f64) -> Result<Self> {
        if d == 0 || !(dt > 0.0) || !(hop >= 0.0) {
            return Err(Error::InvalidParameter(format!("bad kernel d={d}, dt={dt}, hop={hop}")));
        }
        if 2.0 * d as f64 * hop > MAX_HOP_TOTAL * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "total hop probability {} exceeds {MAX_HOP_TOTAL}; reduce dt",
                2.0 * d as f64 * hop
            )));
        }
        Ok(Self { d, dt, hop })
    }

    /// Rate-`2d` simple random walk on `Z^d`: hop probability `δt` per neighbour.
    pub fn lattice_walk(d: usize, dt: f64) -> Result<Self> {
        Self::checked(d, dt, dt)
    }

    /// Walk on `εZ^d` with generator `(1/2ε²) Σ (f(x ± ε e_i) - f(x))`, the
    /// lattice approximation of standard Brownian motion.
    pub fn brownian(d: usize, dt: f64, epsilon: f64) -> Result<Self> {
        Self::checked(d, dt, dt / (2.0 * epsilon * epsilon))
    }

    pub fn stay(&self) -> f64 {
        1.0 - 2.0 * self.d as f64 * self.hop
    }

    fn check_source(&self, lattice: &Lattice, dt: f64) -> Result<()> {
        if lattice.d != self.d {
            return Err(Error::ShapeMismatch("kernel and lattice dimensions differ".into()));
        }
        if ((dt - self.dt) / self.dt).abs() > 1e-9 {
            return Err(Error::ShapeMismatch(format!("kernel dt {} differs from grid dt {dt}", self.dt)));
        }
        Ok(())
    }

    /// `out = K v` on the periodic lattice.
    fn apply(&self, lattice: &Lattice, v: &[f64], out: &mut [f64]) {
        let l = lattice.extent;
        let stay = self.stay();
        let hop = self.hop;
        if self.d == 1 {
            for x in 0..l {
                let left = v[if x == 0 { l - 1 } else { x - 1 }];
                let right = v[if x == l - 1 { 0 } else { x + 1 }];
                out[x] = stay * v[x] + hop * (left + right);
            }
            return;
        }
        let strides: Vec<usize> = (0..self.d).map(|i| l.pow((self.d - 1 - i) as u32)).collect();
        for x in 0..v.len() {
            let mut acc = 0.0;
            for &s in &strides {
                let c = (x / s) % l;
                let up = if c == l - 1 { x - (l - 1) * s } else { x + s };
                let down = if c == 0 { x + (l - 1) * s } else { x - s };
                acc += v[up] + v[down];
            }
            out[x] = stay * v[x] + hop * acc;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Transfer,
    Enumerate,
    MonteCarlo,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Transfer => "transfer",
            Self::Enumerate => "enumerate",
            Self::MonteCarlo => "montecarlo",
        }
    }
}

/// `log Z_t` with its statistical error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionEstimate {
    pub log_z: f64,
    /// Zero for deterministic methods.
    pub stderr: f64,
    pub method: Method,
    /// Polymer endpoint mass within two sites of the periodic seam.
    pub boundary_mass: f64,
    /// Effective sample size (Monte Carlo only).
    pub ess: Option<f64>,
}

impl PartitionEstimate {
    pub fn boundary_flagged(&self) -> bool {
        self.boundary_mass > BOUNDARY_FLAG
    }

    /// Monte Carlo estimates with fewer than 10 effective samples are unreliable.
    pub fn reliable(&self) -> bool {
        self.ess.is_none_or(|e| e >= 10.0)
    }
}

/// `log Z` for several β and several horizons from one pass over a source.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    /// Horizons in grid steps.
    pub checkpoints: Vec<usize>,
    /// `log_z[b][h]` for `betas[b]` at `checkpoints[h]`.
    pub log_z: Vec<Vec<f64>>,
    pub boundary_mass: Vec<Vec<f64>>,
}

fn seam_mask(lattice: &Lattice) -> Vec<bool> {
    (0..lattice.sites()).map(|i| lattice.near_seam(i)).collect()
}

/// Runs the transfer matrix for every β in `betas` on the same environment,
/// recording `log Z` after each horizon in `checkpoints` (grid steps, sorted).
pub fn propagate<S: IncrementSource>(
    source: &mut S,
    betas: &[f64],
    kernel: &WalkKernel,
    checkpoints: &[usize],
) -> Result<Propagation> {
    let lattice = source.lattice().clone();
    kernel.check_source(&lattice, source.dt())?;
    if betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
        return Err(Error::InvalidParameter("β must be finite and non-negative".into()));
    }
    if checkpoints.windows(2).any(|w| w[1] < w[0]) || checkpoints.last().is_some_and(|&c| c > source.n_steps()) {
        return Err(Error::InvalidParameter("checkpoints must be sorted and within the grid".into()));
    }
    let n = lattice.sites();
    let origin = 0usize;
    let seam = seam_mask(&lattice);
    let mut densities: Vec<Vec<f64>> = betas
        .iter()
        .map(|_| {
            let mut u = vec![0.0; n];
            u[origin] = 1.0;
            u
        })
        .collect();
    let mut acc = vec![0.0f64; betas.len()];
    let mut log_z = vec![Vec::with_capacity(checkpoints.len()); betas.len()];
    let mut boundary = vec![Vec::with_capacity(checkpoints.len()); betas.len()];
    let mut inc = vec![0.0; n];
    let mut weighted = vec![0.0; n];
    let mut next_cp = 0;

    let record = |densities: &Vec<Vec<f64>>, acc: &Vec<f64>, log_z: &mut Vec<Vec<f64>>, boundary: &mut Vec<Vec<f64>>| {
        for (b, u) in densities.iter().enumerate() {
            let total: f64 = u.iter().sum();
            let edge: f64 = u.iter().zip(&seam).filter(|(_, &s)| s).map(|(v, _)| v).sum();
            log_z[b].push(acc[b]);
            boundary[b].push(edge / total);
        }
    };

    while next_cp < checkpoints.len() && checkpoints[next_cp] == 0 {
        record(&densities, &acc, &mut log_z, &mut boundary);
        next_cp += 1;
    }
    let last = checkpoints.last().copied().unwrap_or(0);
    for k in 0..last {
        source.fill_step(k, &mut inc);
        for (b, &beta) in betas.iter().enumerate() {
            let u = &mut densities[b];
            let mut mass = 0.0;
            let mut total = 0.0;
            for ((wv, &uv), &dw) in weighted.iter_mut().zip(u.iter()).zip(&inc) {
                *wv = uv * (beta * dw).exp();
                mass += *wv;
                total += uv;
            }
            let ratio = mass / total;
            if !(ratio.is_finite() && ratio > 0.0) {
                return Err(Error::NonFinite(format!("transfer step {k} at β = {beta}: weight sum {mass}")));
            }
            acc[b] += ratio.ln();
            let inv = 1.0 / mass;
            for wv in weighted.iter_mut() {
                *wv *= inv;
            }
            kernel.apply(&lattice, &weighted, u);
        }
        while next_cp < checkpoints.len() && checkpoints[next_cp] == k + 1 {
            record(&densities, &acc, &mut log_z, &mut boundary);
            next_cp += 1;
        }
    }
    Ok(Propagation { checkpoints: checkpoints.to_vec(), log_z, boundary_mass: boundary })
}

/// Transfer-matrix `log Z_t` over the full slab horizon.
pub fn transfer_matrix_logz(slab: &EnvironmentSlab, beta: f64, kernel: &WalkKernel) -> Result<PartitionEstimate> {
    transfer_matrix_logz_source(&mut &*slab, beta, kernel)
}

/// Transfer-matrix `log Z_t` for any increment source.
pub fn transfer_matrix_logz_source<S: IncrementSource>(source: &mut S, beta: f64, kernel: &WalkKernel) -> Result<PartitionEstimate> {
    let n = source.n_steps();
    let p = propagate(source, &[beta], kernel, &[n])?;
    Ok(PartitionEstimate {
        log_z: p.log_z[0][0],
        stderr: 0.0,
        method: Method::Transfer,
        boundary_mass: p.boundary_mass[0][0],
        ess: None,
    })
}

/// Number of trajectories enumerated by [`enumerate_logz`].
pub fn enumeration_count(d: usize, n_steps: usize) -> Option<u64> {
    (2 * d as u64 + 1).checked_pow(n_steps as u32)
}

/// Exact `log Z` by summing over every discrete-time trajectory.
pub fn enumerate_logz(slab: &EnvironmentSlab, beta: f64, kernel: &WalkKernel) -> Result<PartitionEstimate> {
    let lattice = slab.lattice();
    kernel.check_source(lattice, slab.grid().dt())?;
    let n = slab.grid().n_steps;
    let count = enumeration_count(kernel.d, n);
    if n > 14 || count.is_none_or(|c| c > 100_000_000) {
        return Err(Error::TooLarge(format!("(2d+1)^n = {}^{n} trajectories", 2 * kernel.d + 1)));
    }
    let d = kernel.d;
    let moves: Vec<(Option<(usize, i64)>, f64)> = std::iter::once((None, kernel.stay()))
        .chain((0..d).flat_map(|a| [(Some((a, 1)), kernel.hop), (Some((a, -1)), kernel.hop)]))
        .collect();

    struct Walk<'a> {
        slab: &'a EnvironmentSlab,
        lattice: &'a Lattice,
        beta: f64,
        moves: &'a [(Option<(usize, i64)>, f64)],
        total: f64,
        seam: f64,
    }
    impl Walk<'_> {
        fn visit(&mut self, k: usize, site: &mut Vec<i64>, weight: f64) {
            if k == self.slab.grid().n_steps {
                self.total += weight;
                if self.lattice.near_seam(self.lattice.index_of(site)) {
                    self.seam += weight;
                }
                return;
            }
            let w = weight * (self.beta * self.slab.increment(k, self.lattice.index_of(site))).exp();
            for &(mv, p) in self.moves {
                if let Some((axis, sign)) = mv {
                    site[axis] += sign;
                    self.visit(k + 1, site, w * p);
                    site[axis] -= sign;
                } else {
                    self.visit(k + 1, site, w * p);
                }
            }
        }
    }
    let mut walk = Walk { slab, lattice, beta, moves: &moves, total: 0.0, seam: 0.0 };
    walk.visit(0, &mut vec![0; d], 1.0);
    if !(walk.total.is_finite() && walk.total > 0.0) {
        return Err(Error::NonFinite(format!("enumerated Z = {}", walk.total)));
    }
    Ok(PartitionEstimate {
        log_z: walk.total.ln(),
        stderr: 0.0,
        method: Method::Enumerate,
        boundary_mass: walk.seam / walk.total,
        ess: None,
    })
}

/// Reference path law for [`montecarlo_logz`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PathSampler {
    /// Discrete-time walk with the transfer-matrix kernel (same model).
    Kernel(WalkKernel),
    /// Continuous-time walk with exponential holding times, snapped to the grid.
    JumpProcess,
    /// ε-discretized Brownian motion; ε is the slab lattice spacing and the
    /// fine resolution is at most ε²/100.
    Brownian,
}

fn sample_kernel_path(kernel: &WalkKernel, grid: &TimeGrid, rng: &mut impl Rng) -> Result<JumpPath> {
    let d = kernel.d;
    let n = grid.n_steps;
    let stay = kernel.stay();
    let mut starts = vec![0usize];
    let mut current = vec![0i64; d];
    let mut sites = current.clone();
    for k in 0..n.saturating_sub(1) {
        let u: f64 = rng.random();
        if u < stay {
            continue;
        }
        let m = (((u - stay) / kernel.hop) as usize).min(2 * d - 1);
        current[m / 2] += if m.is_multiple_of(2) { 1 } else { -1 };
        starts.push(k + 1);
        sites.extend_from_slice(&current);
    }
    JumpPath::from_segments(d, grid.dt(), n, starts, sites)
}

/// Fine Brownian resolution for band width `epsilon` that divides `t`.
pub fn brownian_resolution(t: f64, epsilon: f64) -> f64 {
    let target = epsilon * epsilon / 100.0;
    t / (t / target).ceil()
}

fn sample_reference_path(sampler: &PathSampler, slab: &EnvironmentSlab, rng: &mut impl Rng) -> Result<JumpPath> {
    let grid = slab.grid();
    let d = slab.lattice().d;
    match sampler {
        PathSampler::Kernel(k) => sample_kernel_path(k, grid, rng),
        PathSampler::JumpProcess => polymer::sample_jump_path_with(d, grid.horizon, grid, rng),
        PathSampler::Brownian => {
            let eps = slab.lattice().spacing;
            let h = brownian_resolution(grid.horizon, eps);
            polymer::discretize_brownian_path_with(d, grid.horizon, eps, h, rng)?.embedded_path(grid)
        }
    }
}

/// Monte Carlo `log Z` over `n_paths` reference paths, with delta-method
/// standard error and effective sample size.
pub fn montecarlo_logz(slab: &EnvironmentSlab, beta: f64, sampler: &PathSampler, n_paths: usize, seed: u64) -> Result<PartitionEstimate> {
    if n_paths < 100 {
        return Err(Error::InvalidParameter(format!("need at least 100 paths, got {n_paths}")));
    }
    if let PathSampler::Kernel(k) = sampler {
        k.check_source(slab.lattice(), slab.grid().dt())?;
    }
    let lattice = slab.lattice();
    let samples = exec::map_indexed(n_paths, |i| -> Result<(f64, bool)> {
        let mut rng = stream_rng(seed, Domain::Path, i as u64, 0);
        let path = sample_reference_path(sampler, slab, &mut rng)?;
        let energy = hamiltonian(&path, slab)?;
        let last = path.site(path.n_segments() - 1);
        Ok((energy, lattice.near_seam(lattice.index_of(last))))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let exponents: Vec<f64> = samples.iter().map(|(e, _)| beta * e).collect();
    let max = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = exponents.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let (mean_w, se_w) = mean_stderr(&weights);
    let seam: f64 = weights.iter().zip(&samples).filter(|(_, s)| s.1).map(|(w, _)| w).sum();
    let log_z = max + mean_w.ln();
    if !log_z.is_finite() {
        return Err(Error::NonFinite("Monte Carlo log Z".into()));
    }
    Ok(PartitionEstimate {
        log_z,
        stderr: se_w / mean_w,
        method: Method::MonteCarlo,
        boundary_mass: seam / sum,
        ess: Some(sum * sum / sum_sq),
    })
}

/// Result of [`annealed_mean_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct AnnealedCheck {
    pub empirical: f64,
    pub target: f64,
    pub stderr: f64,
    pub z: f64,
    /// False when the replica spread is too wide for a meaningful comparison.
    pub resolved: bool,
}

impl AnnealedCheck {
    pub fn passed(&self) -> bool {
        self.resolved && self.z.abs() <= 4.0
    }
}

/// Replica mean of `Z_t` against `exp(β² Q(0) t / 2)`.
pub fn annealed_mean_check(
    sampler: &FieldSampler,
    grid: TimeGrid,
    kernel: &WalkKernel,
    beta: f64,
    n_replicas: usize,
    seed: u64,
) -> Result<AnnealedCheck> {
    let q0 = sampler.spec().q0();
    let exponent = beta * beta * q0 * grid.horizon;
    if exponent > 8.0 {
        return Err(Error::InvalidParameter(format!("β² Q(0) t = {exponent} is above 8; the mean is not estimable")));
    }
    if n_replicas < 2 {
        return Err(Error::InvalidParameter("need at least two replicas".into()));
    }
    let zs = exec::map_indexed(n_replicas, |r| {
        let mut stream = sampler.stream(grid, seed, r as u64);
        transfer_matrix_logz_source(&mut stream, beta, kernel).map(|e| e.log_z.exp())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (empirical, stderr) = mean_stderr(&zs);
    let target = (exponent / 2.0).exp();
    let z = if stderr > 0.0 {
        (empirical - target) / stderr
    } else if (empirical - target).abs() < 1e-12 {
        0.0
    } else {
        f64::INFINITY
    };
    let resolved = stderr.is_finite() && stderr <= 0.25 * target;
    Ok(AnnealedCheck { empirical, target, stderr, z, resolved })
}
