//! Homogeneous spatial covariance families and their lattice realizations.
//!
//! A [`CovarianceSpec`] is the single description of `Q` used everywhere: the
//! environment sampler reads its circulant spectrum, the partition and
//! free-energy code read `Q(0)`, and the validation battery reads the
//! canonical metric `δ`.

mod spectrum;

pub use spectrum::{circulant_spectrum, CirculantSpectrum, NdFft, SpectrumOptions};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance for `Q(x) <= Q(0)` and evenness comparisons.
pub const COMPARE_TOL: f64 = 1e-12;

/// Default cap on `L^d`.
pub const DEFAULT_SITE_BUDGET: usize = 1 << 22;

/// One non-zero offset of a [`CovarianceSpec::LatticeTable`], in lattice units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub offset: Vec<i64>,
    pub value: f64,
}

/// Declarative description of the spatial covariance `Q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CovarianceSpec {
    /// Independent sites: `Q(x) = q0 · 1{x = 0}`.
    WhiteNoiseLattice { q0: f64 },
    /// Explicit values on integer offsets; zero outside the listed support.
    /// Offsets are in lattice units regardless of the lattice spacing.
    LatticeTable { q0: f64, entries: Vec<TableEntry> },
    /// `Q(x) = q0 · exp(-(|x|/ℓ)^{2H})`, Hölder exponent `H` for `δ`.
    PoweredExponential { q0: f64, holder_h: f64, length_scale: f64 },
    /// `Q(x) = q0 - c · log^{-2γ}(e + 1/|x|)` for `x != 0`, `Q(0) = q0`.
    LogRegular { q0: f64, gamma: f64, amplitude: f64, cutoff: f64 },
}

impl CovarianceSpec {
    pub fn white_noise(q0: f64) -> Self {
        Self::WhiteNoiseLattice { q0 }
    }

    pub fn powered_exponential(q0: f64, holder_h: f64, length_scale: f64) -> Self {
        Self::PoweredExponential { q0, holder_h, length_scale }
    }

    pub fn log_regular(q0: f64, gamma: f64, amplitude: f64, cutoff: f64) -> Self {
        Self::LogRegular { q0, gamma, amplitude, cutoff }
    }

    /// Table with the same value at every offset of `lattice` (a rank-one,
    /// spatially constant field).
    pub fn constant_field(q0: f64, lattice: &Lattice) -> Self {
        let entries = (1..lattice.sites())
            .map(|i| TableEntry { offset: lattice.min_image(i), value: q0 })
            .collect();
        Self::LatticeTable { q0, entries }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Self::WhiteNoiseLattice { .. } => "white-noise-lattice",
            Self::LatticeTable { .. } => "lattice-table",
            Self::PoweredExponential { .. } => "powered-exponential",
            Self::LogRegular { .. } => "log-regular",
        }
    }

    pub fn q0(&self) -> f64 {
        match *self {
            Self::WhiteNoiseLattice { q0 }
            | Self::LatticeTable { q0, .. }
            | Self::PoweredExponential { q0, .. }
            | Self::LogRegular { q0, .. } => q0,
        }
    }

    /// Hölder exponent of `δ` when the family has one.
    pub fn holder_exponent(&self) -> Option<f64> {
        match *self {
            Self::PoweredExponential { holder_h, .. } => Some(holder_h),
            _ => None,
        }
    }

    /// Checks parameter ranges.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        let q0 = self.q0();
        if !(q0 > 0.0 && q0.is_finite()) {
            return bad(format!("q0 must be positive and finite, got {q0}"));
        }
        match self {
            Self::WhiteNoiseLattice { .. } => {}
            Self::LatticeTable { entries, .. } => {
                if let Some(first) = entries.first() {
                    let d = first.offset.len();
                    for e in entries {
                        if e.offset.len() != d {
                            return bad("table offsets have inconsistent dimension".into());
                        }
                        if !e.value.is_finite() {
                            return bad(format!("table value at {:?} is not finite", e.offset));
                        }
                        if e.offset.iter().all(|&c| c == 0) {
                            return bad("table must not list the zero offset; use q0".into());
                        }
                    }
                }
            }
            &Self::PoweredExponential { holder_h, length_scale, .. } => {
                if !(holder_h > 0.0 && holder_h <= 1.0) {
                    return bad(format!("holder_h must lie in (0, 1], got {holder_h}"));
                }
                if !(length_scale > 0.0 && length_scale.is_finite()) {
                    return bad(format!("length_scale must be positive, got {length_scale}"));
                }
            }
            &Self::LogRegular { gamma, amplitude, cutoff, .. } => {
                if !(gamma > 0.0 && gamma.is_finite()) {
                    return bad(format!("gamma must be positive, got {gamma}"));
                }
                if !(amplitude > 0.0 && amplitude <= q0) {
                    return bad(format!("amplitude must lie in (0, q0], got {amplitude}"));
                }
                if !(cutoff > 0.0 && cutoff.is_finite()) {
                    return bad(format!("cutoff must be positive, got {cutoff}"));
                }
            }
        }
        Ok(())
    }

    /// Evaluates the family at Euclidean distance `r` (continuum families only).
    fn radial(&self, r: f64) -> f64 {
        match *self {
            Self::WhiteNoiseLattice { q0 } => {
                if r == 0.0 {
                    q0
                } else {
                    0.0
                }
            }
            Self::PoweredExponential { q0, holder_h, length_scale } => {
                q0 * (-(r / length_scale).powf(2.0 * holder_h)).exp()
            }
            Self::LogRegular { q0, gamma, amplitude, .. } => {
                if r == 0.0 {
                    q0
                } else {
                    q0 - amplitude * (std::f64::consts::E + 1.0 / r).ln().powf(-2.0 * gamma)
                }
            }
            Self::LatticeTable { .. } => unreachable!("tables are evaluated on integer offsets"),
        }
    }

    fn table_lookup(q0: f64, entries: &[TableEntry], z: &[i64]) -> f64 {
        if z.iter().all(|&c| c == 0) {
            return q0;
        }
        entries.iter().find(|e| e.offset == z).map_or(0.0, |e| e.value)
    }
}

/// `Q(offset)` for a physical displacement.
///
/// Table offsets are read in lattice units and must be integral.
pub fn q_value(spec: &CovarianceSpec, offset: &[f64]) -> Result<f64> {
    if offset.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite offset {offset:?}")));
    }
    let value = match spec {
        CovarianceSpec::LatticeTable { q0, entries } => {
            let z = integral_offset(offset)?;
            CovarianceSpec::table_lookup(*q0, entries, &z)
        }
        CovarianceSpec::WhiteNoiseLattice { q0 } => {
            if offset.iter().all(|&c| c == 0.0) {
                *q0
            } else {
                0.0
            }
        }
        _ => spec.radial(norm(offset)),
    };
    if value < 0.0 {
        return Err(Error::NegativeCovariance { offset: offset.to_vec(), value });
    }
    Ok(value)
}

/// Canonical metric `δ(x) = sqrt(2 (Q(0) - Q(x)))`.
pub fn delta_metric(spec: &CovarianceSpec, offset: &[f64]) -> Result<f64> {
    let q0 = spec.q0();
    let q = q_value(spec, offset)?;
    if q > q0 + COMPARE_TOL {
        return Err(Error::CovarianceExceedsVariance { offset: offset.to_vec(), value: q, q0 });
    }
    Ok((2.0 * (q0 - q)).max(0.0).sqrt())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn integral_offset(offset: &[f64]) -> Result<Vec<i64>> {
    offset
        .iter()
        .map(|&c| {
            let r = c.round();
            if (c - r).abs() <= 1e-9 {
                Ok(r as i64)
            } else {
                Err(Error::OffLattice(offset.to_vec()))
            }
        })
        .collect()
}

/// Periodic hypercubic lattice `(ε Z / L ε Z)^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub d: usize,
    pub extent: usize,
    pub spacing: f64,
}

impl Lattice {
    pub fn new(d: usize, extent: usize, spacing: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter("dimension must be at least 1".into()));
        }
        if extent < 3 {
            return Err(Error::InvalidParameter(format!("extent must be at least 3, got {extent}")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidParameter(format!("spacing must be positive, got {spacing}")));
        }
        if extent.checked_pow(d as u32).is_none() {
            return Err(Error::BudgetExceeded { sites: usize::MAX, budget: DEFAULT_SITE_BUDGET });
        }
        Ok(Self { d, extent, spacing })
    }

    /// Unit-spacing lattice of the random walk model.
    pub fn intrinsic(d: usize, extent: usize) -> Result<Self> {
        Self::new(d, extent, 1.0)
    }

    pub fn sites(&self) -> usize {
        self.extent.pow(self.d as u32)
    }

    pub fn check_budget(&self, budget: usize) -> Result<()> {
        let sites = self.sites();
        if sites > budget {
            return Err(Error::BudgetExceeded { sites, budget });
        }
        Ok(())
    }

    /// Minimum-image representative of a coordinate, in `(-L/2, L/2]`.
    pub fn wrap_coord(&self, c: i64) -> i64 {
        let l = self.extent as i64;
        let r = c.rem_euclid(l);
        if 2 * r > l {
            r - l
        } else {
            r
        }
    }

    /// Row-major site index of (possibly out-of-range) lattice coordinates.
    pub fn index_of(&self, coords: &[i64]) -> usize {
        debug_assert_eq!(coords.len(), self.d);
        let l = self.extent as i64;
        coords.iter().fold(0usize, |acc, &c| acc * self.extent + c.rem_euclid(l) as usize)
    }

    /// Minimum-image coordinates of a site index.
    pub fn min_image(&self, index: usize) -> Vec<i64> {
        let mut out = vec![0i64; self.d];
        let mut rem = index;
        for slot in out.iter_mut().rev() {
            *slot = self.wrap_coord((rem % self.extent) as i64);
            rem /= self.extent;
        }
        out
    }

    /// Whether a site lies within two sites of the periodic seam on any axis.
    pub fn near_seam(&self, index: usize) -> bool {
        let half = self.extent as f64 / 2.0;
        self.min_image(index).iter().any(|&c| c.abs() as f64 >= half - 2.0)
    }

    /// Physical displacement of an integer offset.
    pub fn physical(&self, z: &[i64]) -> Vec<f64> {
        z.iter().map(|&c| c as f64 * self.spacing).collect()
    }
}

/// `Q` at the minimum image of the integer offset `z` on `lattice`.
pub fn q_lattice(spec: &CovarianceSpec, lattice: &Lattice, z: &[i64]) -> f64 {
    let w: Vec<i64> = z.iter().map(|&c| lattice.wrap_coord(c)).collect();
    match spec {
        CovarianceSpec::LatticeTable { q0, entries } => CovarianceSpec::table_lookup(*q0, entries, &w),
        CovarianceSpec::WhiteNoiseLattice { q0 } => {
            if w.iter().all(|&c| c == 0) {
                *q0
            } else {
                0.0
            }
        }
        _ => spec.radial(norm(&lattice.physical(&w))),
    }
}

/// Outcome of [`validate_spec`]; never an error, failures are recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub family: &'static str,
    pub q0: f64,
    pub psd_ok: bool,
    pub clipped_mass: f64,
    pub min_eigenvalue: f64,
    pub c_q: f64,
    pub nondegenerate: bool,
    pub even: bool,
    pub bounded_by_q0: bool,
    /// Range of the local regularity ratio on offsets inside `bracket_radius`:
    /// `(Q(0)-Q(x)) / |x|^{2H}` (Hölder) or `(Q(0)-Q(x)) / log^{-2γ}(1/|x|)` (log).
    pub bracket: Option<(f64, f64)>,
    pub bracket_radius: Option<f64>,
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks a covariance family on a concrete lattice.
pub fn validate_spec(spec: &CovarianceSpec, lattice: &Lattice, options: &SpectrumOptions) -> ValidationReport {
    let mut failures = Vec::new();
    if let Err(e) = spec.validate() {
        failures.push(e.to_string());
    }
    let q0 = spec.q0();

    let (psd_ok, clipped_mass, min_eigenvalue) = if failures.is_empty() {
        match spectrum::raw_spectrum(spec, lattice, options.site_budget) {
            Ok(raw) => {
                let (mass, min) = spectrum::clip_stats(&raw);
                let ok = mass <= options.clip_threshold;
                if !ok {
                    failures.push(format!("clipped spectral mass {mass:.3e} above {:.1e}", options.clip_threshold));
                }
                (ok, mass, min)
            }
            Err(e) => {
                failures.push(e.to_string());
                (false, f64::NAN, f64::NAN)
            }
        }
    } else {
        (false, f64::NAN, f64::NAN)
    };

    let mut c_q = 0.0f64;
    for axis in 0..lattice.d {
        let mut z = vec![0i64; lattice.d];
        z[axis] = 2;
        c_q = c_q.max((q0 - q_lattice(spec, lattice, &z)).max(0.0).sqrt());
    }
    let nondegenerate = c_q > 0.0;
    if !nondegenerate {
        failures.push("non-degeneracy fails: Q(0) = Q(2 e_i) on every axis".into());
    }

    let sites = if lattice.sites() <= options.site_budget { lattice.sites() } else { 0 };
    let mut even = true;
    let mut bounded_by_q0 = true;
    for i in 0..sites {
        let z = lattice.min_image(i);
        let neg: Vec<i64> = z.iter().map(|c| -c).collect();
        let q = q_lattice(spec, lattice, &z);
        if (q - q_lattice(spec, lattice, &neg)).abs() > COMPARE_TOL {
            even = false;
        }
        if q > q0 + COMPARE_TOL {
            bounded_by_q0 = false;
        }
    }
    if !even {
        failures.push("covariance is not even on the lattice".into());
    }
    if !bounded_by_q0 {
        failures.push("Q(x) exceeds Q(0) on the lattice".into());
    }

    let (bracket, bracket_radius) = match *spec {
        CovarianceSpec::PoweredExponential { holder_h, length_scale, .. } => {
            let radius = length_scale / 4.0;
            (regularity_bracket(spec, lattice, radius, |r| r.powf(2.0 * holder_h)), Some(radius))
        }
        CovarianceSpec::LogRegular { gamma, cutoff, .. } => {
            let radius = cutoff.min(0.5);
            (regularity_bracket(spec, lattice, radius, |r| (1.0 / r).ln().powf(-2.0 * gamma)), Some(radius))
        }
        _ => (None, None),
    };

    ValidationReport {
        family: spec.family_name(),
        q0,
        psd_ok,
        clipped_mass,
        min_eigenvalue,
        c_q,
        nondegenerate,
        even,
        bounded_by_q0,
        bracket,
        bracket_radius,
        failures,
    }
}

fn regularity_bracket(
    spec: &CovarianceSpec,
    lattice: &Lattice,
    radius: f64,
    gauge: impl Fn(f64) -> f64,
) -> Option<(f64, f64)> {
    let q0 = spec.q0();
    let reach = (radius / lattice.spacing + 1e-9).floor() as i64;
    let reach = reach.min(lattice.extent as i64 / 2);
    if reach < 1 {
        return None;
    }
    // Offsets inside the radius, enumerated on the cube [-reach, reach]^d.
    let side = (2 * reach + 1) as usize;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for flat in 0..side.pow(lattice.d as u32) {
        let mut rem = flat;
        let z: Vec<i64> = (0..lattice.d)
            .map(|_| {
                let c = (rem % side) as i64 - reach;
                rem /= side;
                c
            })
            .collect();
        let r = norm(&lattice.physical(&z));
        if r == 0.0 || r > radius + 1e-12 {
            continue;
        }
        let ratio = (q0 - q_lattice(spec, lattice, &z)) / gauge(r);
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    lo.is_finite().then_some((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn powered_exponential_values() {
        let spec = CovarianceSpec::powered_exponential(1.0, 0.5, 1.0);
        assert_eq!(q_value(&spec, &[0.0]).unwrap(), 1.0);
        assert_relative_eq!(q_value(&spec, &[1.0]).unwrap(), 0.367879441171, epsilon = 1e-12);
        assert_relative_eq!(q_value(&spec, &[0.6, 0.8]).unwrap(), (-1f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn white_noise_values() {
        let spec = CovarianceSpec::white_noise(2.0);
        assert_eq!(q_value(&spec, &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(q_value(&spec, &[0.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn table_values() {
        let spec = CovarianceSpec::LatticeTable {
            q0: 1.0,
            entries: vec![TableEntry { offset: vec![1], value: 0.25 }, TableEntry { offset: vec![-1], value: 0.25 }],
        };
        assert_eq!(q_value(&spec, &[1.0]).unwrap(), 0.25);
        assert_eq!(q_value(&spec, &[3.0]).unwrap(), 0.0);
        assert!(matches!(q_value(&spec, &[0.5]), Err(Error::OffLattice(_))));
    }

    #[test]
    fn negative_value_rejected() {
        let spec = CovarianceSpec::LatticeTable { q0: 1.0, entries: vec![TableEntry { offset: vec![1], value: -0.1 }] };
        assert!(matches!(q_value(&spec, &[1.0]), Err(Error::NegativeCovariance { .. })));
    }

    #[test]
    fn log_regular_values() {
        let spec = CovarianceSpec::log_regular(1.0, 0.5, 0.5, 0.1);
        assert_eq!(q_value(&spec, &[0.0]).unwrap(), 1.0);
        let x = 0.01;
        let expected = 1.0 - 0.5 / (std::f64::consts::E + 100.0).ln();
        assert_relative_eq!(q_value(&spec, &[x]).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn delta_examples() {
        let pe = CovarianceSpec::powered_exponential(1.0, 0.5, 1.0);
        assert_eq!(delta_metric(&pe, &[0.0]).unwrap(), 0.0);
        assert_relative_eq!(delta_metric(&pe, &[1.0]).unwrap(), (2.0 * (1.0 - (-1f64).exp())).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(delta_metric(&pe, &[1.0]).unwrap(), 1.124_384_8, epsilon = 1e-7);
        let wn = CovarianceSpec::white_noise(1.0);
        assert_relative_eq!(delta_metric(&wn, &[0.0, 3.0]).unwrap(), std::f64::consts::SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn delta_rejects_q_above_q0() {
        let spec = CovarianceSpec::LatticeTable { q0: 1.0, entries: vec![TableEntry { offset: vec![1], value: 1.5 }] };
        assert!(matches!(delta_metric(&spec, &[1.0]), Err(Error::CovarianceExceedsVariance { .. })));
    }

    #[test]
    fn parameter_validation() {
        assert!(CovarianceSpec::white_noise(0.0).validate().is_err());
        assert!(CovarianceSpec::powered_exponential(1.0, 1.5, 1.0).validate().is_err());
        assert!(CovarianceSpec::powered_exponential(1.0, 0.5, 0.0).validate().is_err());
        assert!(CovarianceSpec::log_regular(1.0, 0.5, 2.0, 0.1).validate().is_err());
        assert!(CovarianceSpec::log_regular(1.0, 0.5, 1.0, 0.1).validate().is_ok());
    }

    #[test]
    fn lattice_geometry() {
        let lat = Lattice::new(2, 7, 0.5).unwrap();
        assert_eq!(lat.sites(), 49);
        assert_eq!(lat.wrap_coord(4), -3);
        assert_eq!(lat.wrap_coord(-4), 3);
        assert_eq!(lat.index_of(&[-1, 0]), 6 * 7);
        assert_eq!(lat.min_image(6 * 7 + 1), vec![-1, 1]);
        let even = Lattice::new(1, 8, 1.0).unwrap();
        assert_eq!(even.wrap_coord(4), 4);
        assert_eq!(even.wrap_coord(5), -3);
        assert!(Lattice::new(1, 2, 1.0).is_err());
        assert!(even.near_seam(even.index_of(&[2])));
        assert!(!even.near_seam(even.index_of(&[1])));
    }

    #[test]
    fn validation_white_noise() {
        let lat = Lattice::intrinsic(1, 16).unwrap();
        let report = validate_spec(&CovarianceSpec::white_noise(1.0), &lat, &SpectrumOptions::default());
        assert_eq!(report.c_q, 1.0);
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn validation_constant_field_is_degenerate() {
        let lat = Lattice::intrinsic(1, 9).unwrap();
        let spec = CovarianceSpec::constant_field(1.0, &lat);
        let report = validate_spec(&spec, &lat, &SpectrumOptions::default());
        assert_eq!(report.c_q, 0.0);
        assert!(!report.nondegenerate);
        assert!(report.psd_ok);
        assert!(!report.passed());
    }

    #[test]
    fn holder_bracket_on_fine_lattice() {
        let lat = Lattice::new(1, 64, 0.05).unwrap();
        let spec = CovarianceSpec::powered_exponential(1.0, 0.5, 1.0);
        let report = validate_spec(&spec, &lat, &SpectrumOptions::default());
        let (lo, hi) = report.bracket.unwrap();
        // (1 - e^{-u}) / u over u = |x| in {0.05, ..., 0.25}
        assert_relative_eq!(hi, (1.0 - (-0.05f64).exp()) / 0.05, epsilon = 1e-12);
        assert_relative_eq!(lo, (1.0 - (-0.25f64).exp()) / 0.25, epsilon = 1e-12);
        assert!(lo >= 0.8 && hi <= 1.0);
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn asymmetric_table_fails_evenness() {
        let lat = Lattice::intrinsic(1, 8).unwrap();
        let spec = CovarianceSpec::LatticeTable { q0: 1.0, entries: vec![TableEntry { offset: vec![1], value: 0.3 }] };
        let report = validate_spec(&spec, &lat, &SpectrumOptions::default());
        assert!(!report.even);
    }

    #[test]
    fn spec_parses_from_toml() {
        let spec: CovarianceSpec =
            toml::from_str("family = \"powered-exponential\"\nq0 = 1.0\nholder_h = 0.5\nlength_scale = 2.0\n").unwrap();
        assert_eq!(spec, CovarianceSpec::powered_exponential(1.0, 0.5, 2.0));
        let err = toml::from_str::<CovarianceSpec>("family = \"white-noise-lattice\"\nq0 = 1.0\nq1 = 2.0\n");
        assert!(err.is_err());
    }
}
