//! Scaling fits of a free energy curve.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FreeEnergyCurve, FreeEnergyPoint};
use crate::seeding::{stream_rng, Domain};
use crate::stats::{line_leverages, quantile_sorted, weighted_line_fit, LineFit};
use crate::{Error, Result};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Bootstrap stream index, fixed so fits are reproducible.
const BOOTSTRAP_STREAM: u64 = 0x5ca1e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitKind {
    PowerLaw,
    LogCorrected,
}

impl FitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::PowerLaw => "power-law",
            Self::LogCorrected => "log-corrected",
        }
    }
}

/// Per-point fit diagnostics. For power-law fits `value` is `log p` against
/// `log β`; for log-corrected fits it is the compensated value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResidual {
    pub beta: f64,
    pub value: f64,
    pub stderr: f64,
    pub fitted: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFit {
    pub kind: FitKind,
    pub gamma: Option<f64>,
    pub window: (f64, f64),
    /// β-exponent (power law) or weighted mean compensated value.
    pub estimate: f64,
    pub ci: (f64, f64),
    pub intercept: f64,
    pub residuals: Vec<FitResidual>,
    /// Largest over smallest compensated value (log-corrected only).
    pub max_min_ratio: Option<f64>,
    /// Slope of compensated values against `log β` (log-corrected only).
    pub trend_slope: Option<f64>,
    pub trend_ci: Option<(f64, f64)>,
    /// Whether the compensated values are strictly monotone in β.
    pub strictly_monotone: Option<bool>,
}

impl ScalingFit {
    /// A trend counts only when the compensated values move in one direction
    /// and the bootstrap interval of the slope excludes zero.
    pub fn trend_significant(&self) -> bool {
        match (self.strictly_monotone, self.trend_ci) {
            (Some(true), Some((lo, hi))) => lo > 0.0 || hi < 0.0,
            _ => false,
        }
    }

    pub fn row(&self, digest: &str, seed: u64) -> FitRow {
        FitRow {
            kind: self.kind.as_str().into(),
            window_lo: self.window.0,
            window_hi: self.window.1,
            estimate: self.estimate,
            ci_lo: self.ci.0,
            ci_hi: self.ci.1,
            max_min_ratio: self.max_min_ratio,
            trend_slope: self.trend_slope,
            trend_ci_lo: self.trend_ci.map(|c| c.0),
            trend_ci_hi: self.trend_ci.map(|c| c.1),
            params_digest: digest.into(),
            seed,
        }
    }
}

/// One row of the fit CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub kind: String,
    pub window_lo: f64,
    pub window_hi: f64,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub max_min_ratio: Option<f64>,
    pub trend_slope: Option<f64>,
    pub trend_ci_lo: Option<f64>,
    pub trend_ci_hi: Option<f64>,
    pub params_digest: String,
    pub seed: u64,
}

fn window_points(curve: &FreeEnergyCurve, lo: f64, hi: f64) -> Result<Vec<&FreeEnergyPoint>> {
    let pts: Vec<_> = curve.points.iter().filter(|p| p.beta >= lo && p.beta <= hi).collect();
    if pts.len() < 4 {
        return Err(Error::InvalidParameter(format!("{} points in window [{lo}, {hi}], need 4", pts.len())));
    }
    Ok(pts)
}

/// Weights `1/se²`, or unit weights if any standard error vanishes.
fn weights(se: &[f64]) -> (Vec<f64>, bool) {
    if se.iter().all(|s| *s > 0.0 && s.is_finite()) {
        (se.iter().map(|s| 1.0 / (s * s)).collect(), true)
    } else {
        (vec![1.0; se.len()], false)
    }
}

struct Bootstrap {
    fit: LineFit,
    slope_ci: (f64, f64),
    mean: f64,
    mean_ci: (f64, f64),
}

fn weighted_mean(y: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / w.iter().sum::<f64>()
}

fn percentile_ci(mut xs: Vec<f64>, estimate: f64) -> (f64, f64) {
    xs.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&xs, 0.025).min(estimate);
    let hi = quantile_sorted(&xs, 0.975).max(estimate);
    (lo, hi)
}

/// Weighted residual bootstrap of a straight-line fit. Residuals are
/// standardized by weight and leverage, centered, and resampled. When the
/// weights come from standard errors, the residual scale is floored at the
/// stated errors so few-point fits do not understate uncertainty.
fn bootstrap_line(x: &[f64], y: &[f64], w: &[f64], from_stderr: bool) -> Result<Bootstrap> {
    let fit = weighted_line_fit(x, y, w).ok_or_else(|| Error::InvalidParameter("degenerate fit".into()))?;
    let lev = line_leverages(x, w);
    let mut e: Vec<f64> = x
        .iter()
        .zip(y)
        .zip(w)
        .zip(&lev)
        .map(|(((x, y), w), h)| if 1.0 - h > 1e-12 { w.sqrt() * (y - fit.predict(*x)) / (1.0 - h).sqrt() } else { 0.0 })
        .collect();
    let centre = e.iter().sum::<f64>() / e.len() as f64;
    e.iter_mut().for_each(|v| *v -= centre);
    if from_stderr {
        let rms = (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt();
        if rms < 1.0 {
            let scale = if rms > 0.0 { 1.0 / rms } else { 0.0 };
            e.iter_mut().for_each(|v| *v *= scale);
            if rms == 0.0 {
                // Exact data with stated errors: fall back to the errors themselves.
                e = vec![-1.0, 1.0];
            }
        }
    }
    let mean = weighted_mean(y, w);
    let mut rng = stream_rng(0, Domain::Bootstrap, BOOTSTRAP_STREAM, 0);
    let mut slopes = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut means = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut ystar = vec![0.0; y.len()];
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for (i, ys) in ystar.iter_mut().enumerate() {
            let pick = e[rng.random_range(0..e.len())];
            *ys = fit.predict(x[i]) + pick / w[i].sqrt();
        }
        if let Some(f) = weighted_line_fit(x, &ystar, w) {
            slopes.push(f.slope);
            means.push(weighted_mean(&ystar, w));
        }
    }
    Ok(Bootstrap { fit, slope_ci: percentile_ci(slopes, fit.slope), mean, mean_ci: percentile_ci(means, mean) })
}

/// Weighted least squares of `log p` on `log β` over `β ∈ [beta_min, beta_max]`.
pub fn fit_power_law(curve: &FreeEnergyCurve, beta_min: f64, beta_max: f64) -> Result<ScalingFit> {
    let pts = window_points(curve, beta_min, beta_max)?;
    if let Some(p) = pts.iter().find(|p| !(p.mean_p > 0.0) || !(p.beta > 0.0)) {
        return Err(Error::InvalidParameter(format!("non-positive free energy {} at β = {}", p.mean_p, p.beta)));
    }
    let x: Vec<f64> = pts.iter().map(|p| p.beta.ln()).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.mean_p.ln()).collect();
    let se: Vec<f64> = pts.iter().map(|p| p.stderr / p.mean_p).collect();
    let (w, from_se) = weights(&se);
    let boot = bootstrap_line(&x, &y, &w, from_se)?;
    let residuals = pts
        .iter()
        .zip(x.iter().zip(&y))
        .zip(&se)
        .map(|((p, (x, y)), s)| FitResidual { beta: p.beta, value: *y, stderr: *s, fitted: boot.fit.predict(*x), residual: y - boot.fit.predict(*x) })
        .collect();
    Ok(ScalingFit {
        kind: FitKind::PowerLaw,
        gamma: None,
        window: (pts[0].beta, pts[pts.len() - 1].beta),
        estimate: boot.fit.slope,
        ci: boot.slope_ci,
        intercept: boot.fit.intercept,
        residuals,
        max_min_ratio: None,
        trend_slope: None,
        trend_ci: None,
        strictly_monotone: None,
    })
}

/// Compensated values `p · log^{2γ}(β) / β²` over the window, their spread and
/// their trend against `log β`.
pub fn fit_log_corrected(curve: &FreeEnergyCurve, gamma: f64, beta_min: f64, beta_max: f64) -> Result<ScalingFit> {
    let pts = window_points(curve, beta_min, beta_max)?;
    if let Some(p) = pts.iter().find(|p| p.beta <= 1.0) {
        return Err(Error::InvalidParameter(format!("β = {} ≤ 1 in a log-corrected window", p.beta)));
    }
    let factor = |b: f64| b.ln().powf(2.0 * gamma) / (b * b);
    let x: Vec<f64> = pts.iter().map(|p| p.beta.ln()).collect();
    let v: Vec<f64> = pts.iter().map(|p| p.mean_p * factor(p.beta)).collect();
    let se: Vec<f64> = pts.iter().map(|p| p.stderr * factor(p.beta)).collect();
    let (w, from_se) = weights(&se);
    let boot = bootstrap_line(&x, &v, &w, from_se)?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let up = v.windows(2).all(|p| p[1] > p[0]);
    let down = v.windows(2).all(|p| p[1] < p[0]);
    let residuals = pts
        .iter()
        .zip(x.iter().zip(&v))
        .zip(&se)
        .map(|((p, (x, v)), s)| FitResidual { beta: p.beta, value: *v, stderr: *s, fitted: boot.fit.predict(*x), residual: v - boot.fit.predict(*x) })
        .collect();
    Ok(ScalingFit {
        kind: FitKind::LogCorrected,
        gamma: Some(gamma),
        window: (pts[0].beta, pts[pts.len() - 1].beta),
        estimate: boot.mean,
        ci: boot.mean_ci,
        intercept: boot.fit.intercept,
        residuals,
        max_min_ratio: Some(if min > 0.0 { max / min } else { f64::INFINITY }),
        trend_slope: Some(boot.fit.slope),
        trend_ci: Some(boot.slope_ci),
        strictly_monotone: Some(up || down),
    })
}
