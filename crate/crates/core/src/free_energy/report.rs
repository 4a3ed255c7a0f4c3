//! Invariant battery over a free energy curve.

use std::fmt;

use super::FreeEnergyCurve;

/// Outcome of one check. Warnings are diagnostics and never fail a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Warn,
    Fail,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pass => "PASS",
            Self::Warn => "WARN",
            Self::Fail => "FAIL",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantCheck {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

/// Per-β annealed margin `β² q0 / 2 - p` with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margin {
    pub beta: f64,
    pub margin: f64,
    pub stderr: f64,
}

impl Margin {
    /// Positive beyond four standard errors: empirical strong disorder.
    pub fn strong_disorder(&self) -> bool {
        self.margin > 4.0 * self.stderr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantReport {
    pub checks: Vec<InvariantCheck>,
    pub margins: Vec<Margin>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }
}

impl fmt::Display for InvariantReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{:<4} {:<22} {}", c.status, c.name, c.detail)?;
        }
        writeln!(f, "{:>10} {:>14} {:>12}  strong", "beta", "margin", "stderr")?;
        for m in &self.margins {
            writeln!(f, "{:>10.4} {:>14.6} {:>12.6}  {}", m.beta, m.margin, m.stderr, if m.strong_disorder() { "yes" } else { "no" })?;
        }
        Ok(())
    }
}

fn check(name: &str, ok: bool, hard: bool, detail: String) -> InvariantCheck {
    let status = match (ok, hard) {
        (true, _) => CheckStatus::Pass,
        (false, true) => CheckStatus::Fail,
        (false, false) => CheckStatus::Warn,
    };
    InvariantCheck { name: name.into(), status, detail }
}

/// Hard checks: `p(0) = 0`, monotonicity in β, per-replica convexity and the
/// annealed upper bound. Horizon stabilization, boundary mass and Monte Carlo
/// reliability are reported as warnings.
pub fn invariant_report(curve: &FreeEnergyCurve) -> InvariantReport {
    let pts = &curve.points;
    let q0 = curve.q0;
    let mut checks = Vec::new();

    let zeros: Vec<_> = pts.iter().filter(|p| p.beta == 0.0).collect();
    checks.push(check(
        "p(0) = 0",
        zeros.iter().all(|p| p.mean_p == 0.0),
        true,
        if zeros.is_empty() { "no β = 0 point".into() } else { format!("p(0) = {}", zeros[0].mean_p) },
    ));

    let worst_drop = pts
        .windows(2)
        .map(|w| {
            let se = (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
            (w[0].mean_p - w[1].mean_p) - 3.0 * se
        })
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(check("nondecreasing in β", worst_drop <= 0.0, true, format!("worst excess drop {:.3e}", worst_drop.max(0.0))));

    checks.push(match curve.min_convexity {
        Some(c) => check("convex in β", c >= -1e-9, true, format!("min second difference {c:.3e}")),
        None => check("convex in β", true, true, "fewer than three β per group".into()),
    });

    let violations: Vec<String> = pts
        .iter()
        .filter(|p| p.margin(q0) < -4.0 * p.stderr)
        .map(|p| format!("β={} p={} bound={}", p.beta, p.mean_p, p.beta * p.beta * q0 / 2.0))
        .collect();
    checks.push(check(
        "annealed bound",
        violations.is_empty(),
        true,
        if violations.is_empty() { format!("{} points within β² q0/2 + 4 se", pts.len()) } else { violations.join("; ") },
    ));

    let unstable: Vec<f64> = pts.iter().filter(|p| p.stabilized == Some(false)).map(|p| p.beta).collect();
    checks.push(check("t stabilized", unstable.is_empty(), false, format!("unstabilized β: {unstable:?}")));
    let nonmono: Vec<f64> = pts.iter().filter(|p| p.t_monotone == Some(false)).map(|p| p.beta).collect();
    checks.push(check("nondecreasing in t", nonmono.is_empty(), false, format!("non-monotone β: {nonmono:?}")));
    let edge: Vec<f64> = pts.iter().filter(|p| p.boundary_flagged()).map(|p| p.beta).collect();
    checks.push(check("boundary mass", edge.is_empty(), false, format!("flagged β: {edge:?}")));
    let unreliable: usize = pts.iter().map(|p| p.unreliable).sum();
    checks.push(check("effective samples", unreliable == 0, false, format!("{unreliable} replica estimates with ESS < 10")));

    let margins = pts.iter().map(|p| Margin { beta: p.beta, margin: p.margin(q0), stderr: p.stderr }).collect();
    InvariantReport { checks, margins }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::free_energy::fit::tests::synthetic;

    #[test]
    fn single_zero_point_passes() {
        let curve = synthetic(&[0.0], |_| 0.0, 0.0, &[]);
        let r = invariant_report(&curve);
        assert!(r.passed());
        assert_eq!(r.margins[0].margin, 0.0);
        assert!(!r.margins[0].strong_disorder());
    }

    #[test]
    fn bound_violation_fails() {
        let curve = synthetic(&[0.0, 1.0, 2.0], |b| b * b, 0.01, &[]);
        let r = invariant_report(&curve);
        assert!(!r.passed());
        assert_eq!(r.checks.iter().find(|c| c.name == "annealed bound").unwrap().status, CheckStatus::Fail);
        let ok = synthetic(&[0.0, 1.0, 2.0], |b| 0.4 * b * b, 0.01, &[]);
        let r = invariant_report(&ok);
        assert!(r.passed());
        assert!(r.margins[2].strong_disorder());
    }

    #[test]
    fn decreasing_curve_fails() {
        let curve = synthetic(&[1.0, 2.0], |b| 1.0 / b, 0.0, &[]);
        assert!(!invariant_report(&curve).passed());
    }
}
