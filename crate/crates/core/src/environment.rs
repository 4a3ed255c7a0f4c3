//! Gaussian environment `W`: independent-in-time increment fields on a
//! periodic lattice with spatial covariance `Q`.
//!
//! The increment of `W` over time step `k` at site `z` is drawn from the
//! stream `(master seed, replica id, step)`, so any step of any replica can be
//! regenerated on its own. Spectral families draw one complex field per pair
//! of steps `(2m, 2m + 1)`: the real and imaginary parts of
//! `FFT(sqrt(λ / N) · (Z₁ + i Z₂))` are independent fields with the circulant
//! covariance, so step `2m` takes the real part and `2m + 1` the imaginary part.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;

use crate::covariance::{circulant_spectrum, q_lattice, CirculantSpectrum, CovarianceSpec, Lattice, NdFft, SpectrumOptions};
use crate::exec;
use crate::seeding::{stream_rng, Domain};
use crate::stats::mean_stderr;
use crate::{Error, Result};

/// Largest slab (`n_steps · L^d` values) that may be materialized.
pub const SLAB_BUDGET: usize = 1 << 27;

/// Uniform grid on `[0, horizon]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be at least 1".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    /// Grid with step `dt`; `horizon` must be a multiple of `dt`.
    pub fn with_dt(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let n = (horizon / dt).round();
        if n < 1.0 || ((horizon / dt) - n).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::OffGrid(horizon));
        }
        Self::new(horizon, n as usize)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Grid index of `time`, which must be a multiple of `dt` in `[0, horizon]`.
    pub fn step_of(&self, time: f64) -> Result<usize> {
        let x = time / self.dt();
        let k = x.round();
        if (x - k).abs() > 1e-9 * k.max(1.0) || k < 0.0 || k as usize > self.n_steps {
            return Err(Error::OffGrid(time));
        }
        Ok(k as usize)
    }
}

/// Anything that can produce the spatial increment field of step `k`.
pub trait IncrementSource {
    fn lattice(&self) -> &Lattice;
    fn dt(&self) -> f64;
    fn n_steps(&self) -> usize;
    /// Writes the `L^d` increments of step `k` into `out`.
    fn fill_step(&mut self, k: usize, out: &mut [f64]);
}

#[derive(Debug)]
enum SamplerKind {
    WhiteNoise { sd: f64 },
    Spectral { amplitudes: Vec<f64>, fft: NdFft },
}

/// Prepared sampler for unit-time fields with covariance `Q` on a lattice.
#[derive(Debug)]
pub struct FieldSampler {
    spec: CovarianceSpec,
    lattice: Lattice,
    spectrum: Option<CirculantSpectrum>,
    kind: SamplerKind,
}

impl FieldSampler {
    pub fn new(spec: &CovarianceSpec, lattice: &Lattice, options: &SpectrumOptions) -> Result<Self> {
        spec.validate()?;
        lattice.check_budget(options.site_budget)?;
        if let CovarianceSpec::WhiteNoiseLattice { q0 } = *spec {
            return Ok(Self {
                spec: spec.clone(),
                lattice: lattice.clone(),
                spectrum: None,
                kind: SamplerKind::WhiteNoise { sd: q0.sqrt() },
            });
        }
        let spectrum = circulant_spectrum(spec, lattice, options)?;
        let n = lattice.sites() as f64;
        let amplitudes = spectrum.eigenvalues().iter().map(|&v| (v / n).sqrt()).collect();
        Ok(Self {
            spec: spec.clone(),
            lattice: lattice.clone(),
            spectrum: Some(spectrum),
            kind: SamplerKind::Spectral { amplitudes, fft: NdFft::new(lattice.d, lattice.extent) },
        })
    }

    pub fn spec(&self) -> &CovarianceSpec {
        &self.spec
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    /// `None` for white noise, which bypasses the spectral route.
    pub fn spectrum(&self) -> Option<&CirculantSpectrum> {
        self.spectrum.as_ref()
    }

    /// Whether one random stream yields two consecutive steps.
    fn paired(&self) -> bool {
        matches!(self.kind, SamplerKind::Spectral { .. })
    }

    /// Draws the field(s) of one stream scaled by `scale`.
    fn draw(&self, rng: &mut impl Rng, scale: f64, buf: &mut Vec<Complex64>, first: &mut [f64], second: &mut [f64]) {
        match &self.kind {
            SamplerKind::WhiteNoise { sd } => {
                let s = sd * scale;
                for v in first.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = s * z;
                }
            }
            SamplerKind::Spectral { amplitudes, fft } => {
                buf.clear();
                buf.extend(amplitudes.iter().map(|&a| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex64::new(a * re, a * im)
                }));
                fft.forward(buf);
                for ((a, b), c) in first.iter_mut().zip(second.iter_mut()).zip(buf.iter()) {
                    *a = scale * c.re;
                    *b = scale * c.im;
                }
            }
        }
    }

    /// Streaming increments for one replica on `grid`.
    pub fn stream(&self, grid: TimeGrid, master_seed: u64, replica: u64) -> EnvironmentStream<'_> {
        let n = self.lattice.sites();
        EnvironmentStream {
            sampler: self,
            grid,
            master_seed,
            replica,
            buf: Vec::with_capacity(n),
            even: vec![0.0; n],
            odd: vec![0.0; n],
            cached_pair: None,
        }
    }
}

/// Lazily generated increments of one replica; nothing is stored beyond the
/// current pair of steps.
pub struct EnvironmentStream<'a> {
    sampler: &'a FieldSampler,
    grid: TimeGrid,
    master_seed: u64,
    replica: u64,
    buf: Vec<Complex64>,
    even: Vec<f64>,
    odd: Vec<f64>,
    cached_pair: Option<usize>,
}

impl IncrementSource for EnvironmentStream<'_> {
    fn lattice(&self) -> &Lattice {
        &self.sampler.lattice
    }

    fn dt(&self) -> f64 {
        self.grid.dt()
    }

    fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    fn fill_step(&mut self, k: usize, out: &mut [f64]) {
        let scale = self.grid.dt().sqrt();
        if !self.sampler.paired() {
            let mut rng = stream_rng(self.master_seed, Domain::Environment, self.replica, k as u64);
            self.sampler.draw(&mut rng, scale, &mut self.buf, out, &mut []);
            return;
        }
        let pair = k / 2;
        if self.cached_pair != Some(pair) {
            let mut rng = stream_rng(self.master_seed, Domain::Environment, self.replica, pair as u64);
            self.sampler.draw(&mut rng, scale, &mut self.buf, &mut self.even, &mut self.odd);
            self.cached_pair = Some(pair);
        }
        out.copy_from_slice(if k.is_multiple_of(2) { &self.even } else { &self.odd });
    }
}

/// Materialized increments `[n_steps][L^d]` of one environment replica.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentSlab {
    lattice: Lattice,
    grid: TimeGrid,
    increments: Vec<f64>,
    pub seed: u64,
    pub replica: u64,
}

impl EnvironmentSlab {
    /// Wraps explicit increments (row-major, step-major).
    pub fn from_increments(lattice: Lattice, grid: TimeGrid, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != grid.n_steps * lattice.sites() {
            return Err(Error::ShapeMismatch(format!(
                "{} increments for {} steps x {} sites",
                increments.len(),
                grid.n_steps,
                lattice.sites()
            )));
        }
        Ok(Self { lattice, grid, increments, seed: 0, replica: 0 })
    }

    pub fn zeros(lattice: Lattice, grid: TimeGrid) -> Self {
        let n = grid.n_steps * lattice.sites();
        Self { lattice, grid, increments: vec![0.0; n], seed: 0, replica: 0 }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn step(&self, k: usize) -> &[f64] {
        let n = self.lattice.sites();
        &self.increments[k * n..(k + 1) * n]
    }

    /// `W((k+1)δt, εz) - W(kδt, εz)`.
    pub fn increment(&self, k: usize, site: usize) -> f64 {
        self.increments[k * self.lattice.sites() + site]
    }

    /// `a · self + b · other` on the same lattice and grid.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.lattice != other.lattice || self.grid != other.grid {
            return Err(Error::ShapeMismatch("slabs live on different lattices or grids".into()));
        }
        let increments = self.increments.iter().zip(&other.increments).map(|(x, y)| a * x + b * y).collect();
        Ok(Self { increments, ..self.clone() })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { increments: self.increments.iter().map(|x| factor * x).collect(), ..self.clone() }
    }
}

impl IncrementSource for &EnvironmentSlab {
    fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    fn dt(&self) -> f64 {
        self.grid.dt()
    }

    fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    fn fill_step(&mut self, k: usize, out: &mut [f64]) {
        out.copy_from_slice(self.step(k));
    }
}

/// Samples one replica slab; bit-identical for identical `(seed, replica_id)`.
pub fn sample_slab(sampler: &FieldSampler, grid: TimeGrid, seed: u64, replica_id: u64) -> Result<EnvironmentSlab> {
    let n = sampler.lattice().sites();
    let total = n.checked_mul(grid.n_steps).filter(|&t| t <= SLAB_BUDGET);
    let Some(total) = total else {
        return Err(Error::BudgetExceeded { sites: n.saturating_mul(grid.n_steps), budget: SLAB_BUDGET });
    };
    let mut increments = vec![0.0; total];
    let mut stream = sampler.stream(grid, seed, replica_id);
    for (k, chunk) in increments.chunks_mut(n).enumerate() {
        stream.fill_step(k, chunk);
    }
    Ok(EnvironmentSlab { lattice: sampler.lattice().clone(), grid, increments, seed, replica: replica_id })
}

/// Sums `factor` consecutive steps of a finer source: the same Brownian
/// environment seen on a grid with step `factor · δt`.
pub struct Coarsened<S> {
    inner: S,
    factor: usize,
    scratch: Vec<f64>,
}

impl<S: IncrementSource> Coarsened<S> {
    pub fn new(inner: S, factor: usize) -> Result<Self> {
        if factor == 0 || !inner.n_steps().is_multiple_of(factor) {
            return Err(Error::InvalidParameter(format!(
                "cannot coarsen {} steps by a factor {factor}",
                inner.n_steps()
            )));
        }
        let n = inner.lattice().sites();
        Ok(Self { inner, factor, scratch: vec![0.0; n] })
    }
}

impl<S: IncrementSource> IncrementSource for Coarsened<S> {
    fn lattice(&self) -> &Lattice {
        self.inner.lattice()
    }

    fn dt(&self) -> f64 {
        self.inner.dt() * self.factor as f64
    }

    fn n_steps(&self) -> usize {
        self.inner.n_steps() / self.factor
    }

    fn fill_step(&mut self, k: usize, out: &mut [f64]) {
        out.fill(0.0);
        for j in 0..self.factor {
            self.inner.fill_step(k * self.factor + j, &mut self.scratch);
            for (o, s) in out.iter_mut().zip(&self.scratch) {
                *o += s;
            }
        }
    }
}

/// One covariance probe of [`empirical_covariance_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceProbe {
    pub name: String,
    pub offset: Vec<i64>,
    pub step_lag: usize,
    pub empirical: f64,
    pub target: f64,
    pub stderr: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceCheck {
    pub probes: Vec<CovarianceProbe>,
    pub n_samples: usize,
}

impl CovarianceCheck {
    pub fn passed(&self) -> bool {
        self.probes.iter().all(|p| p.z.abs() <= 4.0)
    }
}

fn z_score(empirical: f64, target: f64, stderr: f64) -> f64 {
    if stderr > 0.0 {
        (empirical - target) / stderr
    } else if (empirical - target).abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Compares empirical increment covariances against `δt · Q` on a fixed probe
/// set: zero offset, `e_1`, `2 e_1`, a far offset, the diagonal `e_1 + e_2`
/// when `d ≥ 2`, and the same site on consecutive steps (target 0).
pub fn empirical_covariance_check(
    sampler: &FieldSampler,
    grid: TimeGrid,
    n_replicas: usize,
    seed: u64,
) -> Result<CovarianceCheck> {
    if n_replicas < 100 {
        return Err(Error::InvalidParameter(format!("need at least 100 replicas, got {n_replicas}")));
    }
    if grid.n_steps < 2 {
        return Err(Error::InvalidParameter("need at least two time steps".into()));
    }
    let lattice = sampler.lattice();
    let d = lattice.d;
    let axis = |c: i64, axis: usize| {
        let mut z = vec![0i64; d];
        z[axis] = c;
        z
    };
    let mut probes: Vec<(String, Vec<i64>, usize)> = vec![
        ("same-site".into(), vec![0; d], 0),
        ("unit-offset".into(), axis(1, 0), 0),
        ("offset-2e1".into(), axis(2, 0), 0),
        ("far-offset".into(), axis(lattice.extent as i64 / 2, 0), 0),
    ];
    if d >= 2 {
        let mut diag = axis(1, 0);
        diag[1] = 1;
        probes.push(("diagonal".into(), diag, 0));
    }
    probes.push(("next-step".into(), vec![0; d], 1));

    let origin = 0usize;
    let targets: Vec<usize> = probes.iter().map(|(_, z, _)| lattice.index_of(z)).collect();
    let pairs = grid.n_steps / 2;
    // Per replica: products for each probe, same-step probes use every step,
    // the lag probe uses steps (2m, 2m + 1).
    let per_replica = exec::map_indexed(n_replicas, |r| {
        let mut stream = sampler.stream(grid, seed, r as u64);
        let n = lattice.sites();
        let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
        let mut out: Vec<Vec<f64>> = vec![Vec::new(); probes.len()];
        for m in 0..pairs {
            stream.fill_step(2 * m, &mut a);
            stream.fill_step(2 * m + 1, &mut b);
            for (i, (_, _, lag)) in probes.iter().enumerate() {
                if *lag == 0 {
                    out[i].push(a[origin] * a[targets[i]]);
                    out[i].push(b[origin] * b[targets[i]]);
                } else {
                    out[i].push(a[origin] * b[targets[i]]);
                }
            }
        }
        out
    });

    let dt = grid.dt();
    let spec = sampler.spec();
    let mut results = Vec::with_capacity(probes.len());
    let mut n_samples = 0;
    for (i, (name, offset, lag)) in probes.into_iter().enumerate() {
        let samples: Vec<f64> = per_replica.iter().flat_map(|r| r[i].iter().copied()).collect();
        n_samples = n_samples.max(samples.len());
        let (empirical, stderr) = mean_stderr(&samples);
        let target = if lag == 0 { dt * q_lattice(spec, lattice, &offset) } else { 0.0 };
        results.push(CovarianceProbe {
            name,
            offset,
            step_lag: lag,
            empirical,
            target,
            stderr,
            z: z_score(empirical, target, stderr),
        });
    }
    Ok(CovarianceCheck { probes: results, n_samples })
}

/// Result of [`max_pair_identity_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct PairCheck {
    pub empirical: f64,
    pub target: f64,
    pub stderr: f64,
    pub z: f64,
}

impl PairCheck {
    pub fn passed(&self) -> bool {
        self.z.abs() <= 4.0
    }
}

/// Checks `E[max(ΔW_a, ΔW_b)] = sqrt(duration · (Q(0) - Q(a - b)) / π)` for the
/// increments of `W` at two sites over `[0, duration]`.
pub fn max_pair_identity_check(
    sampler: &FieldSampler,
    grid: TimeGrid,
    site_a: &[i64],
    site_b: &[i64],
    duration: f64,
    n_replicas: usize,
    seed: u64,
) -> Result<PairCheck> {
    let lattice = sampler.lattice();
    if site_a.len() != lattice.d || site_b.len() != lattice.d {
        return Err(Error::ShapeMismatch("site dimension differs from the lattice".into()));
    }
    let (ia, ib) = (lattice.index_of(site_a), lattice.index_of(site_b));
    if ia == ib {
        return Err(Error::InvalidParameter("the two sites must differ".into()));
    }
    let steps = grid.step_of(duration)?;
    if steps == 0 {
        return Err(Error::OffGrid(duration));
    }
    let maxima = exec::map_indexed(n_replicas, |r| {
        let mut stream = sampler.stream(grid, seed, r as u64);
        let mut field = vec![0.0; lattice.sites()];
        let (mut wa, mut wb) = (0.0, 0.0);
        for k in 0..steps {
            stream.fill_step(k, &mut field);
            wa += field[ia];
            wb += field[ib];
        }
        wa.max(wb)
    });
    let (empirical, stderr) = mean_stderr(&maxima);
    let diff: Vec<i64> = site_a.iter().zip(site_b).map(|(a, b)| a - b).collect();
    let spec = sampler.spec();
    let gap = (spec.q0() - q_lattice(spec, lattice, &diff)).max(0.0);
    let target = (duration * gap / std::f64::consts::PI).sqrt();
    Ok(PairCheck { empirical, target, stderr, z: z_score(empirical, target, stderr) })
}

const DUMP_MAGIC: &[u8; 8] = b"DPSLAB\0\0";
const DUMP_VERSION: u32 = 1;

/// Contents of a slab dump file.
#[derive(Clone, Debug, PartialEq)]
pub struct SlabDump {
    pub d: u32,
    pub extent: u64,
    pub spacing: f64,
    pub n_steps: u64,
    pub dt: f64,
    pub seed: u64,
    pub replica: u64,
    pub increments: Vec<f64>,
}

/// Writes the debug dump: 8-byte magic, little-endian header
/// `(version u32, d u32, L u64, ε f64, n_steps u64, δt f64, seed u64, replica u64)`
/// and the row-major increments as `f64`.
pub fn write_slab_dump(slab: &EnvironmentSlab, mut w: impl Write) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(slab.lattice.d as u32).to_le_bytes())?;
    w.write_all(&(slab.lattice.extent as u64).to_le_bytes())?;
    w.write_all(&slab.lattice.spacing.to_le_bytes())?;
    w.write_all(&(slab.grid.n_steps as u64).to_le_bytes())?;
    w.write_all(&slab.grid.dt().to_le_bytes())?;
    w.write_all(&slab.seed.to_le_bytes())?;
    w.write_all(&slab.replica.to_le_bytes())?;
    for v in &slab.increments {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_slab_dump(mut r: impl Read) -> Result<SlabDump> {
    fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        r.read_exact(&mut b)?;
        Ok(b)
    }
    if &take::<8>(&mut r)? != DUMP_MAGIC {
        return Err(Error::ShapeMismatch("not a slab dump".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != DUMP_VERSION {
        return Err(Error::ShapeMismatch(format!("unsupported dump version {version}")));
    }
    let d = u32::from_le_bytes(take(&mut r)?);
    let extent = u64::from_le_bytes(take(&mut r)?);
    let spacing = f64::from_le_bytes(take(&mut r)?);
    let n_steps = u64::from_le_bytes(take(&mut r)?);
    let dt = f64::from_le_bytes(take(&mut r)?);
    let seed = u64::from_le_bytes(take(&mut r)?);
    let replica = u64::from_le_bytes(take(&mut r)?);
    let count = (extent as usize).pow(d) * n_steps as usize;
    let increments = (0..count).map(|_| take(&mut r).map(f64::from_le_bytes)).collect::<Result<_>>()?;
    Ok(SlabDump { d, extent, spacing, n_steps, dt, seed, replica, increments })
}
