use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{q_lattice, CovarianceSpec, Lattice, DEFAULT_SITE_BUDGET};
use crate::{Error, Result};

/// Tunables for [`circulant_spectrum`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct SpectrumOptions {
    /// Maximum admissible fraction of spectral mass removed by clipping.
    pub clip_threshold: f64,
    pub site_budget: usize,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self { clip_threshold: 1e-3, site_budget: DEFAULT_SITE_BUDGET }
    }
}

/// Eigenvalues of the periodized covariance matrix on a lattice.
#[derive(Clone, Debug)]
pub struct CirculantSpectrum {
    lattice: Lattice,
    /// Clipped eigenvalues in row-major frequency order.
    eigenvalues: Vec<f64>,
    /// Fraction of `Σ|λ|` carried by negative eigenvalues before clipping.
    pub clipped_mass: f64,
    /// Smallest eigenvalue before clipping.
    pub min_eigenvalue: f64,
}

impl CirculantSpectrum {
    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn mean_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.eigenvalues.len() as f64
    }

    /// Covariance row `c(z)` realized by the clipped spectrum (inverse DFT).
    pub fn covariance_row(&self) -> Vec<f64> {
        let n = self.eigenvalues.len();
        let fft = NdFft::new(self.lattice.d, self.lattice.extent);
        let mut buf: Vec<Complex64> = self.eigenvalues.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft.inverse(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }
}

/// Multi-dimensional FFT over a row-major `L^d` array, one axis at a time.
#[derive(Clone)]
pub struct NdFft {
    d: usize,
    extent: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for NdFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NdFft").field("d", &self.d).field("extent", &self.extent).finish()
    }
}

impl NdFft {
    pub fn new(d: usize, extent: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { d, extent, forward: planner.plan_fft_forward(extent), inverse: planner.plan_fft_inverse(extent) }
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.apply(&self.forward, data);
    }

    /// Unnormalized inverse transform.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.apply(&self.inverse, data);
    }

    fn apply(&self, plan: &Arc<dyn Fft<f64>>, data: &mut [Complex64]) {
        let l = self.extent;
        assert_eq!(data.len(), l.pow(self.d as u32));
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        // Last axis is contiguous.
        plan.process_with_scratch(data, &mut scratch);
        let mut line = vec![Complex64::default(); l];
        for axis in 0..self.d.saturating_sub(1) {
            let stride = l.pow((self.d - 1 - axis) as u32);
            let block = stride * l;
            for base in (0..data.len()).step_by(block) {
                for inner in 0..stride {
                    let start = base + inner;
                    for (j, slot) in line.iter_mut().enumerate() {
                        *slot = data[start + j * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (j, v) in line.iter().enumerate() {
                        data[start + j * stride] = *v;
                    }
                }
            }
        }
    }
}

/// Unclipped eigenvalues: DFT of the row `Q(ε · wrap(z))`.
pub(crate) fn raw_spectrum(spec: &CovarianceSpec, lattice: &Lattice, budget: usize) -> Result<Vec<f64>> {
    lattice.check_budget(budget)?;
    let n = lattice.sites();
    let mut buf: Vec<Complex64> =
        (0..n).map(|i| Complex64::new(q_lattice(spec, lattice, &lattice.min_image(i)), 0.0)).collect();
    NdFft::new(lattice.d, lattice.extent).forward(&mut buf);
    Ok(buf.into_iter().map(|c| c.re).collect())
}

/// `(clipped mass fraction, minimum eigenvalue)` of a raw spectrum.
pub(crate) fn clip_stats(raw: &[f64]) -> (f64, f64) {
    let total: f64 = raw.iter().map(|v| v.abs()).sum();
    let negative: f64 = raw.iter().filter(|&&v| v < 0.0).map(|v| -v).sum();
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let mass = if total > 0.0 { negative / total } else { 0.0 };
    (mass, min)
}

/// Circulant spectrum with negative eigenvalues clipped to zero.
///
/// Fails when the clipped mass exceeds `options.clip_threshold`.
pub fn circulant_spectrum(
    spec: &CovarianceSpec,
    lattice: &Lattice,
    options: &SpectrumOptions,
) -> Result<CirculantSpectrum> {
    spec.validate()?;
    let raw = raw_spectrum(spec, lattice, options.site_budget)?;
    let (clipped_mass, min_eigenvalue) = clip_stats(&raw);
    if clipped_mass > options.clip_threshold {
        return Err(Error::SpectrumClipped { mass: clipped_mass, threshold: options.clip_threshold });
    }
    let eigenvalues = raw.into_iter().map(|v| v.max(0.0)).collect();
    Ok(CirculantSpectrum { lattice: lattice.clone(), eigenvalues, clipped_mass, min_eigenvalue })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Direct O(N^2) DFT, independent of the FFT path.
    fn dft_oracle(spec: &CovarianceSpec, lattice: &Lattice) -> Vec<f64> {
        let n = lattice.sites();
        let l = lattice.extent as f64;
        (0..n)
            .map(|k| {
                let kc = lattice.min_image(k);
                (0..n)
                    .map(|z| {
                        let zc = lattice.min_image(z);
                        let phase: f64 = kc.iter().zip(&zc).map(|(a, b)| (a * b) as f64).sum::<f64>();
                        q_lattice(spec, lattice, &zc) * (2.0 * std::f64::consts::PI * phase / l).cos()
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn white_noise_flat_spectrum() {
        for (d, l) in [(1, 16), (2, 6), (3, 4)] {
            let lat = Lattice::intrinsic(d, l).unwrap();
            let s = circulant_spectrum(&CovarianceSpec::white_noise(2.0), &lat, &SpectrumOptions::default()).unwrap();
            assert!(s.eigenvalues().iter().all(|&v| (v - 2.0).abs() < 1e-12));
            assert_eq!(s.clipped_mass, 0.0);
        }
    }

    #[test]
    fn constant_field_rank_one() {
        let lat = Lattice::intrinsic(2, 5).unwrap();
        let spec = CovarianceSpec::constant_field(1.5, &lat);
        let s = circulant_spectrum(&spec, &lat, &SpectrumOptions::default()).unwrap();
        assert_relative_eq!(s.eigenvalues()[0], 25.0 * 1.5, epsilon = 1e-12);
        assert!(s.eigenvalues()[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn fft_matches_direct_dft() {
        // Frozen from the O(L^2) oracle: PE{q0=1, ℓ=4, H=0.5}, d=1, L=64, ε=1.
        let lat = Lattice::intrinsic(1, 64).unwrap();
        let spec = CovarianceSpec::powered_exponential(1.0, 0.5, 4.0);
        let oracle = dft_oracle(&spec, &lat);
        let raw = raw_spectrum(&spec, &lat, DEFAULT_SITE_BUDGET).unwrap();
        for (a, b) in raw.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let oracle_min = oracle.iter().copied().fold(f64::INFINITY, f64::min);
        let s = circulant_spectrum(&spec, &lat, &SpectrumOptions::default()).unwrap();
        assert_relative_eq!(s.min_eigenvalue, oracle_min, epsilon = 1e-10);
        assert_relative_eq!(s.min_eigenvalue, FROZEN_PE_MIN_EIGENVALUE, epsilon = 1e-9);
        assert_eq!(s.clipped_mass, 0.0);
    }

    const FROZEN_PE_MIN_EIGENVALUE: f64 = 0.124_311_285_986_834_72;

    #[test]
    fn fft_matches_direct_dft_2d() {
        let lat = Lattice::new(2, 6, 0.7).unwrap();
        let spec = CovarianceSpec::powered_exponential(1.0, 0.8, 1.3);
        let oracle = dft_oracle(&spec, &lat);
        let raw = raw_spectrum(&spec, &lat, DEFAULT_SITE_BUDGET).unwrap();
        for (a, b) in raw.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn inverse_reproduces_row_and_mean() {
        let lat = Lattice::new(2, 8, 0.5).unwrap();
        let spec = CovarianceSpec::powered_exponential(1.0, 0.5, 1.0);
        let s = circulant_spectrum(&spec, &lat, &SpectrumOptions::default()).unwrap();
        let row = s.covariance_row();
        for (i, r) in row.iter().enumerate() {
            assert!((r - q_lattice(&spec, &lat, &lat.min_image(i))).abs() < 1e-10);
        }
        assert!((s.mean_eigenvalue() - row[0]).abs() < 1e-10);
    }

    #[test]
    fn threshold_rejects() {
        let lat = Lattice::intrinsic(1, 8).unwrap();
        // Strongly non-PSD table: Q(±1) = 0.9 with Q(0) = 1 and nothing else.
        let spec = CovarianceSpec::LatticeTable {
            q0: 1.0,
            entries: vec![
                super::super::TableEntry { offset: vec![1], value: 0.9 },
                super::super::TableEntry { offset: vec![-1], value: 0.9 },
            ],
        };
        let err = circulant_spectrum(&spec, &lat, &SpectrumOptions::default()).unwrap_err();
        assert!(matches!(err, Error::SpectrumClipped { .. }));
        let loose = SpectrumOptions { clip_threshold: 0.5, ..Default::default() };
        let s = circulant_spectrum(&spec, &lat, &loose).unwrap();
        assert!(s.clipped_mass > 0.0 && s.eigenvalues().iter().all(|&v| v >= 0.0));
    }
}
