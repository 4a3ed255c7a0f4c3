//! Command-line front end: `polymer <command> --config run.toml`.
//!
//! Exit codes: 0 when every hard check passes, 1 on a failed check or a
//! runtime error, 2 on a configuration error, 3 when a resumed checkpoint
//! belongs to a different configuration.

pub mod checkpoint;
pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::covariance::{validate_spec, Lattice};
use crate::environment::{empirical_covariance_check, max_pair_identity_check, sample_slab, FieldSampler, TimeGrid};
use crate::free_energy::{fit_log_corrected, fit_power_law, invariant_report, FitKind, Model, ReplicaResult, SweepPlan, SweepResult};
use crate::partition::{annealed_mean_check, enumerate_logz, transfer_matrix_logz, WalkKernel};
use crate::{exec, Error};

use checkpoint::CheckpointError;
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "polymer", version, about = "Free energy of directed polymers in Gaussian environments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Covariance validation and Gaussian statistics of sampled environments.
    ValidateEnv(RunArgs),
    /// Free energy sweep over the β grid and horizons.
    Sweep(RunArgs),
    /// Scaling fit of the swept curve.
    Fit(RunArgs),
    /// Enumeration, transfer-matrix and annealed-mean oracles.
    OracleCheck(RunArgs),
    /// Invariant summary of the swept curve.
    Report(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Worker threads; never changes results.
    #[arg(long, env = "POLYMER_THREADS")]
    pub threads: Option<usize>,
    /// Master seed (overrides `sweep.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many new work items, leaving a partial checkpoint.
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Checkpoint(CheckpointError::DigestMismatch { .. }) => 3,
            _ => 1,
        }
    }
}

/// Parses `std::env::args` and runs; the binary's `main`.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Runs one command; `Ok(false)` when a hard check failed.
pub fn run(cli: &Cli) -> Result<bool, CliError> {
    let args = match &cli.command {
        Command::ValidateEnv(a) | Command::Sweep(a) | Command::Fit(a) | Command::OracleCheck(a) | Command::Report(a) => a,
    };
    let ctx = Context::load(args)?;
    exec::with_threads(args.threads, || match &cli.command {
        Command::ValidateEnv(_) => validate_env(&ctx),
        Command::Sweep(_) => sweep(&ctx, args).map(|s| s.is_none_or(|s| invariant_report(&s.curve()).passed())),
        Command::Fit(_) => fit(&ctx, args),
        Command::OracleCheck(_) => oracle_check(&ctx),
        Command::Report(_) => report(&ctx, args),
    })
}

struct Context {
    config: RunConfig,
    digest: String,
    out: PathBuf,
}

impl Context {
    fn load(args: &RunArgs) -> Result<Self, CliError> {
        let text = fs::read_to_string(&args.config).map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
        let mut config = RunConfig::parse(&text).map_err(CliError::Config)?;
        if let Some(seed) = args.seed {
            config.sweep.seed = seed;
        }
        config.sweep_spec().and_then(SweepPlan::new).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(fit) = &config.fit {
            if fit.kind == FitKind::LogCorrected && !(fit.gamma >= 0.0) {
                return Err(CliError::Config("fit.gamma must be non-negative".into()));
            }
        }
        let out = args.out.clone().unwrap_or_else(|| config.output.dir.clone());
        fs::create_dir_all(&out)?;
        let digest = config.digest();
        Ok(Self { config, digest, out })
    }

    fn seed(&self) -> u64 {
        self.config.sweep.seed
    }

    fn plan(&self) -> Result<SweepPlan, CliError> {
        Ok(SweepPlan::new(self.config.sweep_spec()?)?)
    }

    fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(path)
    }
}

#[derive(Serialize)]
struct CheckRow {
    check: String,
    name: String,
    value: f64,
    target: Option<f64>,
    stderr: Option<f64>,
    z: Option<f64>,
    status: &'static str,
    params_digest: String,
    seed: u64,
}

fn status(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

impl Context {
    #[allow(clippy::too_many_arguments)]
    fn row(&self, check: &str, name: &str, value: f64, target: Option<f64>, stderr: Option<f64>, z: Option<f64>, ok: bool) -> CheckRow {
        CheckRow {
            check: check.into(),
            name: name.into(),
            value,
            target,
            stderr,
            z,
            status: status(ok),
            params_digest: self.digest.clone(),
            seed: self.seed(),
        }
    }
}

fn print_rows(rows: &[CheckRow]) {
    for r in rows {
        println!("{:<4} {:<10} {:<16} value={:.6} target={}", r.status, r.check, r.name, r.value, r.target.map_or("-".into(), |t| format!("{t:.6}")));
    }
}

fn validate_env(ctx: &Context) -> Result<bool, CliError> {
    let plan = ctx.plan()?;
    let spec = &ctx.config.covariance;
    let checks = &ctx.config.checks;
    let mut rows = Vec::new();
    let mut ok = true;
    for group in &plan.groups {
        let lattice = group.lattice();
        let v = validate_spec(spec, lattice, &plan.spec.model.spectrum);
        let label = format!("eps={}", lattice.spacing);
        rows.push(ctx.row("spec", &format!("psd {label}"), v.clipped_mass, Some(0.0), None, None, v.psd_ok));
        rows.push(ctx.row("spec", &format!("c_q {label}"), v.c_q, None, None, None, v.nondegenerate));
        rows.push(ctx.row("spec", &format!("even {label}"), v.min_eigenvalue, None, None, None, v.even && v.bounded_by_q0));
        if let Some((lo, hi)) = v.bracket {
            rows.push(ctx.row("spec", &format!("bracket-lo {label}"), lo, None, None, None, true));
            rows.push(ctx.row("spec", &format!("bracket-hi {label}"), hi, None, None, None, true));
        }
        for f in &v.failures {
            eprintln!("validation: {f}");
        }
        ok &= v.passed();
        if !v.passed() {
            continue;
        }
        let sampler = FieldSampler::new(spec, lattice, &plan.spec.model.spectrum)?;
        let grid = TimeGrid::new(1.0, checks.covariance_steps)?;
        let cov = empirical_covariance_check(&sampler, grid, checks.covariance_replicas, ctx.seed())?;
        for p in &cov.probes {
            rows.push(ctx.row("covariance", &format!("{} {label}", p.name), p.empirical, Some(p.target), Some(p.stderr), Some(p.z), p.z.abs() <= 4.0));
        }
        ok &= cov.passed();
        let far = far_site(lattice);
        let pair_grid = TimeGrid::new(checks.pair_duration, checks.covariance_steps)?;
        let pair = max_pair_identity_check(&sampler, pair_grid, &vec![0; lattice.d], &far, checks.pair_duration, checks.pair_replicas, ctx.seed())?;
        rows.push(ctx.row("max-pair", &label, pair.empirical, Some(pair.target), Some(pair.stderr), Some(pair.z), pair.passed()));
        ok &= pair.passed();
    }
    print_rows(&rows);
    ctx.write_csv("validate_env.csv", &rows)?;
    Ok(ok)
}

/// Site half way around the first axis.
fn far_site(lattice: &Lattice) -> Vec<i64> {
    let mut s = vec![0; lattice.d];
    s[0] = (lattice.extent / 2) as i64;
    s
}

fn oracle_check(ctx: &Context) -> Result<bool, CliError> {
    let plan = ctx.plan()?;
    let model = &plan.spec.model;
    let spec = &ctx.config.covariance;
    let eps = plan.groups[0].epsilon;
    let kernel_for = |d: usize, dt: f64| match model.model {
        Model::LatticeWalk => WalkKernel::lattice_walk(d, dt),
        Model::BrownianEps => WalkKernel::brownian(d, dt, eps),
    };
    let mut rows = Vec::new();
    let mut ok = true;
    let small_dt = match model.model {
        Model::LatticeWalk => 0.02,
        Model::BrownianEps => 0.02 * eps * eps,
    };
    for (d, l, n) in [(1usize, 7usize, 6usize), (2, 5, 4)] {
        let lattice = Lattice::new(d, l, eps)?;
        let sampler = match FieldSampler::new(spec, &lattice, &model.spectrum) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("enumeration d={d} skipped: {e}");
                continue;
            }
        };
        let kernel = kernel_for(d, small_dt)?;
        let mut worst: f64 = 0.0;
        for r in 0..10 {
            let slab = sample_slab(&sampler, TimeGrid::new(n as f64 * small_dt, n)?, ctx.seed(), r)?;
            let beta = 1.0 / small_dt.sqrt();
            let a = transfer_matrix_logz(&slab, beta, &kernel)?.log_z;
            let b = enumerate_logz(&slab, beta, &kernel)?.log_z;
            worst = worst.max(((a - b) / b).abs());
        }
        let pass = worst <= 1e-10;
        ok &= pass;
        rows.push(ctx.row("enumeration", &format!("d={d} L={l} n={n}"), worst, Some(1e-10), None, None, pass));
    }
    let group = &plan.groups[0];
    let sampler = FieldSampler::new(spec, group.lattice(), &model.spectrum)?;
    for (beta, t) in [(0.5, 2.0), (1.0, 1.0)] {
        let raw = model.raw_dt(eps, beta)?;
        let n = (t / raw - 1e-9).ceil() as usize;
        let grid = TimeGrid::new(t, n)?;
        let kernel = kernel_for(group.lattice().d, grid.dt())?;
        let c = annealed_mean_check(&sampler, grid, &kernel, beta, ctx.config.checks.annealed_replicas, ctx.seed())?;
        if !c.resolved {
            eprintln!("annealed β={beta} t={t}: spread too wide to resolve, not counted");
        }
        ok &= !c.resolved || c.passed();
        rows.push(ctx.row("annealed", &format!("beta={beta} t={t}"), c.empirical, Some(c.target), Some(c.stderr), Some(c.z), !c.resolved || c.passed()));
    }
    print_rows(&rows);
    ctx.write_csv("oracle.csv", &rows)?;
    Ok(ok)
}

/// Runs or resumes the sweep; `None` when stopped early by `--stop-after`.
fn sweep(ctx: &Context, args: &RunArgs) -> Result<Option<SweepResult>, CliError> {
    let result = run_sweep(ctx, args.resume, args.stop_after)?;
    if let Some(res) = &result {
        write_sweep(ctx, res)?;
        println!("{}", invariant_report(&res.curve()));
    }
    Ok(result)
}

fn run_sweep(ctx: &Context, resume: bool, stop_after: Option<usize>) -> Result<Option<SweepResult>, CliError> {
    let plan = ctx.plan()?;
    let n = plan.n_items();
    let done = if resume { checkpoint::load(&ctx.out, &ctx.digest, n)? } else { BTreeMap::new() };
    let mut writer = checkpoint::Writer::create(&ctx.out, &ctx.digest, n, &done)?;
    let mut todo: Vec<usize> = (0..n).filter(|i| !done.contains_key(i)).collect();
    let stopped = stop_after.is_some_and(|s| s < todo.len());
    if let Some(s) = stop_after {
        todo.truncate(s);
    }
    let mut all = done;
    for chunk in todo.chunks(ctx.config.sweep.checkpoint_every) {
        let fresh = exec::map_indexed(chunk.len(), |j| plan.run_item(chunk[j]));
        for (&i, r) in chunk.iter().zip(fresh) {
            let r: ReplicaResult = r?;
            writer.append(i, &r)?;
            all.insert(i, r);
        }
        writer.flush()?;
        eprintln!("{}/{n} work items", all.len());
    }
    if stopped {
        eprintln!("stopped with {} of {n} work items; rerun with --resume", all.len());
        return Ok(None);
    }
    Ok(Some(plan.assemble(&all)?))
}

#[derive(Serialize)]
struct ReplicaRow {
    group: usize,
    replica: u64,
    beta: f64,
    t: f64,
    log_z: f64,
    boundary_mass: f64,
    params_digest: String,
    seed: u64,
}

fn write_sweep(ctx: &Context, res: &SweepResult) -> Result<(), CliError> {
    let mut curve = res.curve();
    curve.digest = ctx.digest.clone();
    ctx.write_csv("curve.csv", &curve.rows())?;
    let mut points = res.all_points();
    points.digest = ctx.digest.clone();
    ctx.write_csv("points.csv", &points.rows())?;
    let plan = ctx.plan()?;
    let results = checkpoint::load(&ctx.out, &ctx.digest, plan.n_items())?;
    let mut rows = Vec::new();
    for r in results.values() {
        for (local, &b) in plan.groups[r.group].beta_index.iter().enumerate() {
            for (h, &t) in plan.spec.horizons.iter().enumerate() {
                rows.push(ReplicaRow {
                    group: r.group,
                    replica: r.replica,
                    beta: plan.spec.betas[b],
                    t,
                    log_z: r.log_z[local][h],
                    boundary_mass: r.boundary_mass[local][h],
                    params_digest: ctx.digest.clone(),
                    seed: ctx.seed(),
                });
            }
        }
    }
    ctx.write_csv("replicas.csv", &rows)?;
    Ok(())
}

#[derive(Serialize)]
struct CompensatedRow {
    kind: &'static str,
    beta: f64,
    value: f64,
    stderr: f64,
    fitted: f64,
    residual: f64,
    params_digest: String,
    seed: u64,
}

fn fit(ctx: &Context, args: &RunArgs) -> Result<bool, CliError> {
    let Some(block) = ctx.config.fit.clone() else {
        return Err(CliError::Config("the fit command needs a [fit] table".into()));
    };
    let Some(res) = run_sweep(ctx, true, args.stop_after)? else {
        return Ok(true);
    };
    write_sweep(ctx, &res)?;
    let mut curve = res.curve();
    curve.digest = ctx.digest.clone();
    let fit = match block.kind {
        FitKind::PowerLaw => fit_power_law(&curve, block.beta_min, block.beta_max)?,
        FitKind::LogCorrected => fit_log_corrected(&curve, block.gamma, block.beta_min, block.beta_max)?,
    };
    ctx.write_csv("fit.csv", &[fit.row(&ctx.digest, ctx.seed())])?;
    let rows: Vec<CompensatedRow> = fit
        .residuals
        .iter()
        .map(|r| CompensatedRow {
            kind: fit.kind.as_str(),
            beta: r.beta,
            value: r.value,
            stderr: r.stderr,
            fitted: r.fitted,
            residual: r.residual,
            params_digest: ctx.digest.clone(),
            seed: ctx.seed(),
        })
        .collect();
    ctx.write_csv("compensated.csv", &rows)?;
    println!("{} fit over β ∈ [{}, {}]: estimate {:.6} (95% CI {:.6} .. {:.6})", fit.kind.as_str(), fit.window.0, fit.window.1, fit.estimate, fit.ci.0, fit.ci.1);
    if let (Some(ratio), Some(slope)) = (fit.max_min_ratio, fit.trend_slope) {
        println!("max/min ratio {ratio:.4}, trend slope {slope:.6}, significant trend: {}", fit.trend_significant());
    }
    Ok(invariant_report(&curve).passed())
}

fn report(ctx: &Context, args: &RunArgs) -> Result<bool, CliError> {
    let Some(res) = run_sweep(ctx, true, args.stop_after)? else {
        return Ok(true);
    };
    let mut curve = res.curve();
    curve.digest = ctx.digest.clone();
    let r = invariant_report(&curve);
    let text = format!("config digest {} seed {}\n{r}", ctx.digest, ctx.seed());
    print!("{text}");
    fs::write(ctx.out.join("report.txt"), &text)?;
    Ok(r.passed())
}

/// Reads and parses a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)?;
    RunConfig::parse(&text).map_err(CliError::Config)
}
