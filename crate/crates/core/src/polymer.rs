//! Polymer paths and their energies.
//!
//! Both polymer models are represented as a [`JumpPath`]: a piecewise-constant
//! lattice path whose jump times sit on the environment's time grid. The
//! lattice walk samples exponential holding times directly; the Brownian model
//! records band exits of a finely simulated Brownian motion
//! ([`discretize_brownian_path`]) and embeds the resulting εZ^d path.

use rand::Rng;
use rand_distr::{Exp, StandardNormal};

use crate::covariance::{q_lattice, CovarianceSpec, Lattice};
use crate::environment::{EnvironmentSlab, TimeGrid, SLAB_BUDGET};
use crate::seeding::{stream_rng, Domain};
use crate::{Error, Result};

/// Piecewise-constant lattice path on a time grid.
///
/// Segment `i` occupies `sites[i]` during grid steps `[starts[i], starts[i+1])`,
/// the last segment runs to `horizon_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpPath {
    d: usize,
    dt: f64,
    horizon_steps: usize,
    starts: Vec<usize>,
    sites: Vec<i64>,
}

impl JumpPath {
    /// The path that stays at the origin.
    pub fn origin(d: usize, dt: f64, horizon_steps: usize) -> Self {
        Self { d, dt, horizon_steps, starts: vec![0], sites: vec![0; d] }
    }

    /// Builds a path from segment start steps and sites, checking that starts
    /// increase strictly from 0 and that every jump is a unit move.
    pub fn from_segments(d: usize, dt: f64, horizon_steps: usize, starts: Vec<usize>, sites: Vec<i64>) -> Result<Self> {
        if starts.is_empty() || starts[0] != 0 || sites.len() != starts.len() * d {
            return Err(Error::ShapeMismatch("segments must start at step 0 with one site each".into()));
        }
        if starts.windows(2).any(|w| w[1] <= w[0]) || starts.last().is_some_and(|&s| s >= horizon_steps.max(1)) {
            return Err(Error::InvalidParameter("segment starts must increase strictly inside the horizon".into()));
        }
        let path = Self { d, dt, horizon_steps, starts, sites };
        for i in 1..path.n_segments() {
            let moved: Vec<i64> = path.site(i).iter().zip(path.site(i - 1)).map(|(a, b)| a - b).collect();
            if moved.iter().map(|c| c.abs()).sum::<i64>() != 1 {
                return Err(Error::InvalidParameter(format!("jump {i} is not a nearest-neighbour move")));
            }
        }
        Ok(path)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon_steps(&self) -> usize {
        self.horizon_steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_steps as f64 * self.dt
    }

    pub fn n_segments(&self) -> usize {
        self.starts.len()
    }

    pub fn n_jumps(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn site(&self, segment: usize) -> &[i64] {
        &self.sites[segment * self.d..(segment + 1) * self.d]
    }

    /// Jump times `τ_1 < τ_2 < …` (excluding `τ_0 = 0`).
    pub fn jump_times(&self) -> Vec<f64> {
        self.starts[1..].iter().map(|&k| k as f64 * self.dt).collect()
    }

    /// `(site, first step, end step)` for every occupation interval.
    pub fn segments(&self) -> impl Iterator<Item = (&[i64], usize, usize)> + '_ {
        (0..self.n_segments()).map(move |i| {
            let end = self.starts.get(i + 1).copied().unwrap_or(self.horizon_steps);
            (self.site(i), self.starts[i], end)
        })
    }

    /// Site occupied during grid step `k`.
    pub fn site_at_step(&self, k: usize) -> &[i64] {
        let seg = self.starts.partition_point(|&s| s <= k) - 1;
        self.site(seg)
    }

    /// Occupation intervals whose site lies outside the minimum-image cell of
    /// `lattice`, i.e. that are read through the periodic wrap.
    pub fn wrapped_segments(&self, lattice: &Lattice) -> usize {
        self.segments()
            .filter(|(site, _, _)| site.iter().any(|&c| lattice.wrap_coord(c) != c))
            .count()
    }

    /// CSV dump `time,x1,..,xd`, one line per segment.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time");
        for j in 0..self.d {
            out.push_str(&format!(",x{}", j + 1));
        }
        out.push('\n');
        for (site, start, _) in self.segments() {
            out.push_str(&format!("{}", start as f64 * self.dt));
            for c in site {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// A unit move along `axis` in direction `sign` at continuous time `time`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Move {
    pub time: f64,
    pub axis: usize,
    pub sign: i64,
}

/// Snaps continuous jump times to `grid`: each jump goes to the nearest grid
/// step, colliding jumps move to the next free step, and jumps pushed past the
/// horizon are discarded.
pub fn snap_moves(d: usize, moves: &[Move], grid: &TimeGrid, horizon_steps: usize) -> Result<JumpPath> {
    let dt = grid.dt();
    let inside = moves.iter().filter(|m| m.time < horizon_steps as f64 * dt).count();
    if inside >= horizon_steps.max(1) && inside > 0 {
        return Err(Error::GridTooCoarse { jumps: inside, steps: horizon_steps });
    }
    let mut starts = vec![0usize];
    let mut sites = vec![0i64; d];
    let mut current = vec![0i64; d];
    for m in moves {
        let nearest = (m.time / dt).round() as usize;
        let k = nearest.max(starts.last().unwrap() + 1);
        if k >= horizon_steps {
            break;
        }
        current[m.axis] += m.sign;
        starts.push(k);
        sites.extend_from_slice(&current);
    }
    Ok(JumpPath { d, dt, horizon_steps, starts, sites })
}

/// Continuous-time simple random walk with total jump rate `2d`, using `rng`.
pub fn sample_jump_path_with(d: usize, t: f64, grid: &TimeGrid, rng: &mut impl Rng) -> Result<JumpPath> {
    if d == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    let horizon_steps = if t == 0.0 { 0 } else { grid.step_of(t)? };
    let holding = Exp::new(2.0 * d as f64).expect("positive rate");
    let mut moves = Vec::new();
    let mut time = 0.0;
    loop {
        time += rng.sample(holding);
        if time >= t {
            break;
        }
        let m = rng.random_range(0..2 * d);
        moves.push(Move { time, axis: m / 2, sign: if m % 2 == 0 { 1 } else { -1 } });
    }
    snap_moves(d, &moves, grid, horizon_steps)
}

/// Lattice walk path on `[0, t]`; `t` must be 0 or a grid time.
pub fn sample_jump_path(d: usize, t: f64, grid: &TimeGrid, seed: u64) -> Result<JumpPath> {
    sample_jump_path_with(d, t, grid, &mut stream_rng(seed, Domain::Path, 0, 0))
}

/// One band exit of one Brownian component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Exit {
    pub time: f64,
    pub component: usize,
    pub sign: i64,
}

/// Fine-grid Brownian motion together with its ε-band exits.
#[derive(Clone, Debug)]
pub struct BrownianTrace {
    d: usize,
    epsilon: f64,
    h: f64,
    n_fine: usize,
    /// `(n_fine + 1) × d` positions at times `k h`.
    positions: Vec<f64>,
    /// All exits merged in time order; ties in ascending component order.
    exits: Vec<Exit>,
    /// Number of exits recorded before or at each fine step (length `n_fine + 1`).
    exits_before: Vec<usize>,
}

impl BrownianTrace {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn resolution(&self) -> f64 {
        self.h
    }

    pub fn n_fine(&self) -> usize {
        self.n_fine
    }

    pub fn horizon(&self) -> f64 {
        self.n_fine as f64 * self.h
    }

    pub fn position(&self, k: usize) -> &[f64] {
        &self.positions[k * self.d..(k + 1) * self.d]
    }

    pub fn exits(&self) -> &[Exit] {
        &self.exits
    }

    pub fn component_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.d];
        for e in &self.exits {
            counts[e.component] += 1;
        }
        counts
    }

    pub fn first_exit_time(&self, component: usize) -> Option<f64> {
        self.exits.iter().find(|e| e.component == component).map(|e| e.time)
    }

    /// Lattice site (units of ε) of the discretized path at fine time `k h`.
    pub fn lattice_site_at(&self, k: usize) -> Vec<i64> {
        let mut site = vec![0i64; self.d];
        for e in &self.exits[..self.exits_before[k]] {
            site[e.component] += e.sign;
        }
        site
    }

    /// `max_k max_j |b^j(kh) - b̃^j(kh)|`.
    pub fn max_component_deviation(&self) -> f64 {
        let mut site = vec![0i64; self.d];
        let mut next = 0;
        let mut worst = 0.0f64;
        for k in 0..=self.n_fine {
            while next < self.exits_before[k] {
                let e = self.exits[next];
                site[e.component] += e.sign;
                next += 1;
            }
            for (b, s) in self.position(k).iter().zip(&site) {
                worst = worst.max((b - *s as f64 * self.epsilon).abs());
            }
        }
        worst
    }

    /// `max_k |b(kh) - b̃(kh)|` in Euclidean norm.
    pub fn max_euclidean_deviation(&self) -> f64 {
        (0..=self.n_fine)
            .map(|k| {
                let site = self.lattice_site_at(k);
                self.position(k)
                    .iter()
                    .zip(&site)
                    .map(|(b, s)| (b - *s as f64 * self.epsilon).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// The discretized path on the environment grid, in lattice units of ε.
    pub fn embedded_path(&self, grid: &TimeGrid) -> Result<JumpPath> {
        let horizon_steps = grid.step_of(self.horizon())?;
        let moves: Vec<Move> =
            self.exits.iter().map(|e| Move { time: e.time, axis: e.component, sign: e.sign }).collect();
        snap_moves(self.d, &moves, grid, horizon_steps)
    }
}

/// Simulates `d` independent Brownian components on `[0, t]` at resolution
/// `h` and records, per component, successive exits of the band
/// `(level - ε, level + ε)` around the last recorded level.
///
/// Exits between grid points are caught with the Brownian-bridge crossing
/// probability `exp(-2 (a - x)(a - y) / h)` and dated at the step midpoint.
pub fn discretize_brownian_path_with(d: usize, t: f64, epsilon: f64, h: f64, rng: &mut impl Rng) -> Result<BrownianTrace> {
    if d == 0 || !(epsilon > 0.0) || !(h > 0.0) || !(t >= 0.0) {
        return Err(Error::InvalidParameter("need d >= 1, ε > 0, h > 0 and t >= 0".into()));
    }
    if h > epsilon * epsilon / 100.0 * (1.0 + 1e-9) {
        return Err(Error::InvalidParameter(format!("resolution h = {h} exceeds ε²/100 = {}", epsilon * epsilon / 100.0)));
    }
    let n = (t / h).round();
    if (t / h - n).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::OffGrid(t));
    }
    let n_fine = n as usize;
    if (n_fine + 1).saturating_mul(d) > SLAB_BUDGET {
        return Err(Error::BudgetExceeded { sites: (n_fine + 1).saturating_mul(d), budget: SLAB_BUDGET });
    }
    let sqrt_h = h.sqrt();
    let mut positions = vec![0.0; (n_fine + 1) * d];
    for k in 0..n_fine {
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            positions[(k + 1) * d + j] = positions[k * d + j] + sqrt_h * z;
        }
    }
    Ok(detect_exits(d, epsilon, h, n_fine, positions, rng))
}

fn detect_exits(d: usize, epsilon: f64, h: f64, n_fine: usize, positions: Vec<f64>, rng: &mut impl Rng) -> BrownianTrace {
    let mut levels = vec![0i64; d];
    let mut exits = Vec::new();
    let mut exits_before = Vec::with_capacity(n_fine + 1);
    exits_before.push(0);
    for k in 0..n_fine {
        let time = (k as f64 + 0.5) * h;
        for j in 0..d {
            let x = positions[k * d + j];
            let y = positions[(k + 1) * d + j];
            let mut bridge = true;
            loop {
                let center = levels[j] as f64 * epsilon;
                let (lo, hi) = (center - epsilon, center + epsilon);
                let sign = if y >= hi {
                    1
                } else if y <= lo {
                    -1
                } else if bridge {
                    let p_up = (-2.0 * (hi - x) * (hi - y) / h).exp();
                    let p_down = (-2.0 * (x - lo) * (y - lo) / h).exp();
                    let u: f64 = rng.random();
                    if u < p_up {
                        1
                    } else if u < p_up + p_down {
                        -1
                    } else {
                        break;
                    }
                } else {
                    break;
                };
                bridge = false;
                levels[j] += sign;
                exits.push(Exit { time, component: j, sign });
            }
        }
        exits_before.push(exits.len());
    }
    BrownianTrace { d, epsilon, h, n_fine, positions, exits, exits_before }
}

impl BrownianTrace {
    /// The same Brownian sample path discretized with another band width.
    pub fn rediscretize(&self, epsilon: f64, rng: &mut impl Rng) -> Result<BrownianTrace> {
        if !(epsilon > 0.0) || self.h > epsilon * epsilon / 100.0 * (1.0 + 1e-9) {
            return Err(Error::InvalidParameter(format!("resolution {} is too coarse for ε = {epsilon}", self.h)));
        }
        Ok(detect_exits(self.d, epsilon, self.h, self.n_fine, self.positions.clone(), rng))
    }
}

pub fn discretize_brownian_path(d: usize, t: f64, epsilon: f64, h: f64, seed: u64) -> Result<BrownianTrace> {
    discretize_brownian_path_with(d, t, epsilon, h, &mut stream_rng(seed, Domain::Path, 0, 0))
}

fn check_compatible(path: &JumpPath, slab: &EnvironmentSlab) -> Result<()> {
    if path.d != slab.lattice().d {
        return Err(Error::ShapeMismatch("path and slab dimensions differ".into()));
    }
    if path.horizon_steps > slab.grid().n_steps {
        return Err(Error::ShapeMismatch("path horizon exceeds the slab".into()));
    }
    let dt = slab.grid().dt();
    if path.horizon_steps > 0 && ((path.dt - dt) / dt).abs() > 1e-12 {
        return Err(Error::OffGrid(path.dt));
    }
    Ok(())
}

/// `-H_t(b) = Σ_i [W(τ_{i+1}, x_i) - W(τ_i, x_i)]`, the environment collected
/// along the occupation intervals. Sites wrap periodically.
pub fn hamiltonian(path: &JumpPath, slab: &EnvironmentSlab) -> Result<f64> {
    hamiltonian_scaled(path, slab, 1)
}

/// As [`hamiltonian`] with path coordinates multiplied by `scale`, for reading
/// a coarse-lattice path on a refined slab.
pub fn hamiltonian_scaled(path: &JumpPath, slab: &EnvironmentSlab, scale: i64) -> Result<f64> {
    check_compatible(path, slab)?;
    let lattice = slab.lattice();
    let mut site = vec![0i64; path.d];
    let mut total = 0.0;
    for (s, start, end) in path.segments() {
        for (o, c) in site.iter_mut().zip(s) {
            *o = c * scale;
        }
        let idx = lattice.index_of(&site);
        for k in start..end {
            total += slab.increment(k, idx);
        }
    }
    Ok(total)
}

/// `Σ_k δt · Q(ε (scale_a · a_k - scale_b · b_k))`: the environment covariance
/// of the energies of two fixed paths on a common grid.
pub fn path_overlap(a: &JumpPath, scale_a: i64, b: &JumpPath, scale_b: i64, spec: &CovarianceSpec, lattice: &Lattice) -> f64 {
    let steps = a.horizon_steps.min(b.horizon_steps);
    let mut diff = vec![0i64; a.d];
    (0..steps)
        .map(|k| {
            for ((o, x), y) in diff.iter_mut().zip(a.site_at_step(k)).zip(b.site_at_step(k)) {
                *o = x * scale_a - y * scale_b;
            }
            q_lattice(spec, lattice, &diff)
        })
        .sum::<f64>()
        * a.dt
}
