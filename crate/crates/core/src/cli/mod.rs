//! Command-line interface: `validate`, `solve`, `audit <kind>` and `report`.
//!
//! Every run writes `<out>/<command>/<label|timestamp>/` with a manifest
//! (written first, finalized last), its artifacts, and `verdict.json`.
//! Exit codes: 0 all checks pass, 1 a check failed, 2 error or refusal.

pub mod run;
pub mod svg;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::audit::{
    self, check_jump_moment_lemma, compare_terminal, constant_k_lemma, driver_statistics,
    epsilon_shift, field_regularity_refinement, fit_scaling, flow_residual,
    random_comparison_models, stability_gap, AuditError, AuditThresholds, ComparisonConfig,
    FieldConfig, FlowConfig, Functional, ScalingPlan, StabilityConfig,
};
use crate::expr::{parse_expr, CoefficientExpr};
use crate::pathsim::TimeGrid;
use crate::solver::{
    chain_horizon, find_delta0, picard_run, BasisSpec, SolverConfig, Terminal, ZetaSampler,
};
use run::{check_budget, load_model, output_root, LoadedModel, RunDir, RunManifest, Verdict};

#[derive(Debug, Parser)]
#[command(
    name = "fbsde",
    version,
    about = "Coupled FBSDEs with jumps: solver and audits"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the declared Lipschitz, growth and monotonicity assumptions.
    Validate(ValidateArgs),
    /// Picard/least-squares solve on one window.
    Solve(SolveArgs),
    /// Numerical audits of the small-duration theory.
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Summarize every verdict below a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    /// Log-log slopes of path functionals against the window length.
    Scaling(ScalingArgs),
    /// Jump-moment inequality along a solution (or for constant K).
    Lemma(LemmaArgs),
    /// Ordering of initial values under ordered terminal functions.
    Compare(CompareArgs),
    /// Perturbation stability and the exact epsilon-shift.
    Stability(StabilityArgs),
    /// Lipschitz and growth ratios of the decoupling field under refinement.
    Field(FieldArgs),
    /// Flow-property residual of chained windows at M and 4M paths.
    Flow(FlowArgs),
    /// Moment statistics of the Brownian and Poisson drivers.
    Drivers(DriversArgs),
}

/// Options shared by every command that writes a run directory.
#[derive(Debug, Clone, Args, Serialize)]
pub struct RunArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output root (overrides FBSDE_OUT; default `runs`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory name (default: UTC timestamp).
    #[arg(long)]
    pub label: Option<String>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Refuse plans costing more path-steps than this.
    #[arg(long, default_value_t = 1e7)]
    pub budget: f64,
}

/// Discretization shared by the solving commands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct GridArgs {
    /// Time steps per window.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Monte Carlo paths.
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    /// Total degree of the polynomial regression basis.
    #[arg(long, default_value_t = 2)]
    pub degree: usize,
    /// Use a piecewise-linear basis with this many interior knots (n = 1).
    #[arg(long)]
    pub knots: Option<usize>,
}

impl GridArgs {
    fn basis(&self) -> BasisSpec {
        match self.knots {
            Some(knots) => BasisSpec::PiecewiseLinear { knots },
            None => BasisSpec::Polynomial {
                degree: self.degree,
            },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ValidateArgs {
    /// Builtin alias (T0, T1, …) or path to a model JSON file.
    pub model: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SolveArgs {
    pub model: String,
    /// Window length.
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Deterministic initial state, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub zeta: Option<String>,
    /// Uniform initial box `lo:hi` in every coordinate.
    #[arg(long, allow_hyphen_values = true)]
    pub zeta_box: Option<String>,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 30)]
    pub max_iter: usize,
    /// Halve the window at fixed step size until the Picard map contracts.
    #[arg(long)]
    pub find_delta0: bool,
    /// Paths written to paths.csv.
    #[arg(long, default_value_t = 1000)]
    pub csv_paths: usize,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScalingArgs {
    pub model: String,
    /// Moment orders, comma separated (each ≥ 2).
    #[arg(long, default_value = "2,4")]
    pub p: String,
    /// Window lengths: `lo:hi:n` (log-spaced) or a comma list.
    #[arg(long, default_value = "0.0001:0.1:4")]
    pub deltas: String,
    /// Functionals: sup_x, sup_y, int_z, int_k, sup_inc_x.
    #[arg(long, default_value = "sup_inc_x,int_z,int_k")]
    pub functionals: String,
    #[arg(long, allow_hyphen_values = true)]
    pub zeta: Option<String>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LemmaArgs {
    pub model: String,
    #[arg(long, default_value = "2,4")]
    pub p: String,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    /// Also check the analytic case K ≡ c.
    #[arg(long)]
    pub constant_k: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub zeta: Option<String>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    /// Model (ignored with --random).
    #[arg(default_value = "T3")]
    pub model: String,
    /// Larger terminal function (default: the model's Φ plus 0.1).
    #[arg(long, allow_hyphen_values = true)]
    pub phi1: Option<String>,
    /// Smaller terminal function (default: the model's Φ).
    #[arg(long, allow_hyphen_values = true)]
    pub phi2: Option<String>,
    /// Query states: coordinates separated by `,`, states by `;`.
    #[arg(long, default_value = "-1;0;1", allow_hyphen_values = true)]
    pub states: String,
    /// Audit this many random models of the comparison class instead.
    #[arg(long)]
    pub random: Option<usize>,
    /// Check Φ1 ≥ Φ2 on the first solution's terminal states.
    #[arg(long)]
    pub check_first: bool,
    #[arg(long, default_value_t = 0.2)]
    pub delta: f64,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct StabilityArgs {
    pub model: String,
    /// Perturbed model (same dimensions; marks of the first model are used).
    #[arg(long)]
    pub model2: Option<String>,
    /// Perturbed drift, one expression per coordinate (repeatable).
    #[arg(long, allow_hyphen_values = true)]
    pub b2: Vec<String>,
    /// Terminal shifts for the exact epsilon-shift, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub eps: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub zeta: Option<String>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FieldArgs {
    pub model: String,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub zeta_box: Option<String>,
    /// Random point pairs per level.
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FlowArgs {
    pub model: String,
    /// Window length.
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    /// Total horizon, a multiple of the window (default: two windows).
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub zeta_box: Option<String>,
    /// Out-of-sample paths for the residual.
    #[arg(long, default_value_t = 100_000)]
    pub eval_paths: usize,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DriversArgs {
    /// Model whose mark space and Brownian dimension are used.
    pub model: String,
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 50_000)]
    pub paths: usize,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    pub run_dir: PathBuf,
}

/// Parse arguments from the process and run; returns the exit code.
pub fn main() -> i32 {
    run(Cli::parse())
}

pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Validate(a) => validate(&a),
        Command::Report(a) => report(&a.run_dir),
        Command::Solve(a) => with_workers(&a.run, || solve(&a)),
        Command::Audit(AuditCommand::Scaling(a)) => with_workers(&a.run, || scaling(&a)),
        Command::Audit(AuditCommand::Lemma(a)) => with_workers(&a.run, || lemma(&a)),
        Command::Audit(AuditCommand::Compare(a)) => with_workers(&a.run, || compare(&a)),
        Command::Audit(AuditCommand::Stability(a)) => with_workers(&a.run, || stability(&a)),
        Command::Audit(AuditCommand::Field(a)) => with_workers(&a.run, || field(&a)),
        Command::Audit(AuditCommand::Flow(a)) => with_workers(&a.run, || flow(&a)),
        Command::Audit(AuditCommand::Drivers(a)) => with_workers(&a.run, || drivers(&a)),
    }
}

fn with_workers<F: FnOnce() -> Result<bool> + Send>(run: &RunArgs, f: F) -> Result<bool> {
    match run.workers {
        Some(0) => bail!("--workers must be at least 1"),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building the worker pool")?
            .install(f),
        None => f(),
    }
}

// ---------------------------------------------------------------- parsing

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("invalid number `{t}` in {what}"))
        })
        .collect()
}

/// `lo:hi:n` (log-spaced) or a comma list.
fn parse_deltas(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [lo, hi, n] => {
            let lo: f64 = lo
                .trim()
                .parse()
                .map_err(|_| anyhow!("invalid --deltas lo"))?;
            let hi: f64 = hi
                .trim()
                .parse()
                .map_err(|_| anyhow!("invalid --deltas hi"))?;
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| anyhow!("invalid --deltas count"))?;
            if !(lo > 0.0 && hi > lo && n >= 2) {
                bail!("--deltas lo:hi:n needs 0 < lo < hi and n >= 2");
            }
            Ok(audit::scaling::log_grid(lo, hi, n))
        }
        [_] => parse_list(s, "--deltas"),
        _ => bail!("--deltas must be `lo:hi:n` or a comma list"),
    }
}

fn parse_states(s: &str, n: usize) -> Result<Vec<Vec<f64>>> {
    let states: Vec<Vec<f64>> = s
        .split(';')
        .map(|t| parse_list(t, "--states"))
        .collect::<Result<_>>()?;
    if let Some(bad) = states.iter().find(|x| x.len() != n) {
        bail!("query state {bad:?} does not have dimension {n}");
    }
    Ok(states)
}

fn parse_box(s: &str, n: usize) -> Result<ZetaSampler> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| anyhow!("--zeta-box must be `lo:hi`"))?;
    let lo: f64 = lo
        .trim()
        .parse()
        .map_err(|_| anyhow!("invalid --zeta-box lo"))?;
    let hi: f64 = hi
        .trim()
        .parse()
        .map_err(|_| anyhow!("invalid --zeta-box hi"))?;
    Ok(ZetaSampler::Uniform {
        lo: vec![lo; n],
        hi: vec![hi; n],
    })
}

fn point_zeta(arg: Option<&str>, m: &LoadedModel) -> Result<Vec<f64>> {
    let n = m.model.coeffs.n();
    let z = match (arg, &m.model.zeta) {
        (Some(s), _) => parse_list(s, "--zeta")?,
        (None, Some(crate::model::ZetaDoc::Point { point })) => point.clone(),
        _ => vec![0.0; n],
    };
    if z.len() != n {
        bail!("initial state has dimension {}, model has n = {n}", z.len());
    }
    Ok(z)
}

/// `--zeta` point, else `--zeta-box`, else the model's `zeta`, else `[-1, 1]ⁿ`.
fn sampler_zeta(point: Option<&str>, boxed: Option<&str>, m: &LoadedModel) -> Result<ZetaSampler> {
    let n = m.model.coeffs.n();
    if let Some(p) = point {
        return Ok(ZetaSampler::Point(point_zeta(Some(p), m)?));
    }
    if let Some(b) = boxed {
        return parse_box(b, n);
    }
    Ok(match &m.model.zeta {
        Some(doc) => ZetaSampler::from_doc(doc),
        None => ZetaSampler::Uniform {
            lo: vec![-1.0; n],
            hi: vec![1.0; n],
        },
    })
}

fn parse_functionals(s: &str) -> Result<Vec<Functional>> {
    s.split(',')
        .map(|t| {
            Functional::parse(t.trim()).ok_or_else(|| {
                anyhow!("unknown functional `{t}` (sup_x, sup_y, int_z, int_k, sup_inc_x)")
            })
        })
        .collect()
}

fn expr(s: &str) -> Result<CoefficientExpr> {
    parse_expr(s).map_err(|e| anyhow!("invalid expression `{s}`: {e}"))
}

// ---------------------------------------------------------------- runs

fn open_run<C: Serialize>(
    command: &str,
    model: Option<&LoadedModel>,
    config: &C,
    run: &RunArgs,
    cost: f64,
) -> Result<RunDir> {
    check_budget(cost, run.budget)?;
    let manifest = RunManifest {
        tool: "fbsde".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        model: model.map(|m| m.model_ref()),
        config: serde_json::to_value(config)?,
        seed: run.seed,
        workers: run.workers,
        cost_path_steps: cost,
        budget_path_steps: run.budget,
        started_at: String::new(),
        finished_at: None,
        outputs: Vec::new(),
        pass: None,
    };
    RunDir::create(
        &output_root(run.out.as_deref()),
        run.label.as_deref(),
        manifest,
    )
}

fn close_run(dir: RunDir, verdict: Verdict) -> Result<bool> {
    for c in &verdict.checks {
        println!(
            "{} {}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let pass = verdict.pass;
    let path = dir.finish(&verdict)?;
    println!(
        "{} -> {}",
        if pass { "pass" } else { "fail" },
        path.display()
    );
    Ok(pass)
}

/// Hypothesis failures become a failed check; other errors propagate.
fn applicable<T>(
    r: std::result::Result<T, AuditError>,
    v: &mut Verdict,
    name: &str,
) -> Result<Option<T>> {
    match r {
        Ok(t) => Ok(Some(t)),
        Err(AuditError::Hypothesis(h)) => {
            v.check(name, false, format!("not applicable: {h}"));
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

// ---------------------------------------------------------------- commands

fn validate(a: &ValidateArgs) -> Result<bool> {
    let m = load_model(&a.model)?;
    let report = m.model.validate(a.seed);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{report}");
        println!("worst margin {:.3e}", report.worst_margin());
    }
    Ok(report.pass())
}

#[derive(Serialize)]
struct IterRow {
    iteration: usize,
    distance: f64,
    ratio: Option<f64>,
}

fn solve(a: &SolveArgs) -> Result<bool> {
    let m = load_model(&a.model)?;
    let (cs, ms) = (&m.model.coeffs, &m.model.marks);
    let mut cfg = SolverConfig::new(
        a.delta,
        a.grid.steps,
        a.grid.paths,
        sampler_zeta(a.zeta.as_deref(), a.zeta_box.as_deref(), &m)?,
        a.run.seed,
    );
    cfg.basis = a.grid.basis();
    cfg.picard_tol = a.tol;
    cfg.max_iter = a.max_iter;
    cfg.validate(cs.n())?;
    // halving at fixed Δt costs at most twice the first attempt
    let base = (a.grid.paths * a.grid.steps) as f64;
    let cost = if a.find_delta0 { 3.0 * base } else { base };
    let mut dir = open_run(
        "solve",
        Some(&m),
        &serde_json::json!({ "args": a, "solver": &cfg }),
        &a.run,
        cost,
    )?;
    let mut v = Verdict::new("solve");
    if a.find_delta0 {
        match find_delta0(cs, ms, &cfg) {
            Ok(ev) => {
                v.check(
                    "delta0",
                    true,
                    format!(
                        "delta0 = {} ({} steps), contraction ratio {:.3} <= {}",
                        ev.delta0, ev.n_steps, ev.ratio, cfg.rho_max
                    ),
                );
                cfg.delta = ev.delta0;
                cfg.n_steps = ev.n_steps;
                dir.write_json("delta0.json", &ev)?;
            }
            Err((e, attempts)) => {
                dir.write_json(
                    "delta0.json",
                    &serde_json::json!({ "error": e.to_string(), "attempts": attempts }),
                )?;
                v.check("delta0", false, e.to_string());
                return close_run(dir, v);
            }
        }
    }
    let sol = picard_run(cs, ms, &cfg, &Terminal::Phi)?;
    let dg = &sol.diagnostics;
    let y0 = audit::initial_value_samples(cs, ms, &sol.bundle);
    let y0 = crate::stats::mean_stderr(&y0);
    v.check(
        "picard converged",
        dg.converged,
        format!(
            "{} iterations, last distance {:.3e}, contraction ratio {}",
            dg.iterations,
            dg.diffs.last().copied().unwrap_or(0.0),
            match dg.contraction_ratio {
                Some(r) if r.is_finite() => format!("{r:.4}"),
                Some(_) => "inf".into(),
                None => "n/a".into(),
            }
        ),
    );
    v.check(
        "initial value",
        y0.mean.is_finite(),
        format!("Y_t0 = {:.6} ± {:.2e}", y0.mean, y0.stderr),
    );
    dir.write_json("policy.json", &sol.policy)?;
    dir.write_json("diagnostics.json", dg)?;
    let rows: Vec<IterRow> = dg
        .diffs
        .iter()
        .enumerate()
        .map(|(i, d)| IterRow {
            iteration: i + 1,
            distance: *d,
            ratio: if i == 0 {
                None
            } else {
                dg.ratios.get(i - 1).copied()
            },
        })
        .collect();
    dir.write_csv("iterations.csv", &rows)?;
    let mut csv = Vec::new();
    sol.bundle.write_csv(&mut csv, a.csv_paths)?;
    dir.write_bytes("paths.csv", &csv)?;
    close_run(dir, v)
}

#[derive(Serialize)]
struct MomentRow {
    functional: &'static str,
    p: f64,
    delta: f64,
    value: f64,
    stderr: f64,
    n_paths: usize,
    n_steps: usize,
}

#[derive(Serialize)]
struct FitRow {
    functional: &'static str,
    p: f64,
    slope: Option<f64>,
    slope_stderr: Option<f64>,
    intercept: Option<f64>,
    r2: Option<f64>,
    target: Option<f64>,
    window: Option<f64>,
    pass: bool,
    note: String,
}

fn scaling(a: &ScalingArgs) -> Result<bool> {
    let m = load_model(&a.model)?;
    let (cs, ms) = (&m.model.coeffs, &m.model.marks);
    let th = AuditThresholds::default();
    let ps = parse_list(&a.p, "--p")?;
    let functionals = parse_functionals(&a.functionals)?;
    let plan = ScalingPlan {
        deltas: parse_deltas(&a.deltas)?,
        n_steps: a.grid.steps,
        n_paths: a.grid.paths,
        zeta: point_zeta(a.zeta.as_deref(), &m)?,
        seed: a.run.seed,
        basis: a.grid.basis(),
    };
    let mut dir = open_run(
        "audit-scaling",
        Some(&m),
        &serde_json::json!({ "args": a, "plan": &plan }),
        &a.run,
        plan.path_steps(),
    )?;
    let report = fit_scaling(cs, ms, &ps, &functionals, &plan, &th)?;
    let mut v = Verdict::new("audit scaling");
    for f in &report.fits {
        let name = format!("slope {} p={}", f.functional.name(), f.p);
        let detail = match (&f.skipped, f.slope, f.target) {
            (Some(s), _, _) => format!("skipped: {s}"),
            (None, Some(b), Some(t)) => format!(
                "slope {b:.4} ± {}, target {t} ± {}{}",
                fmt_opt(f.slope_stderr),
                fmt_opt(f.window),
                f.reason
                    .as_ref()
                    .map(|r| format!(" ({r})"))
                    .unwrap_or_default()
            ),
            (None, b, None) => format!("slope {} (no reference slope)", fmt_opt(b)),
            (None, None, Some(t)) => format!("no slope, target {t}"),
        };
        v.check(name, f.pass, detail);
        let svg_name = format!("scaling_{}_p{}.svg", f.functional.name(), f.p);
        dir.write_text(&svg_name, &svg::scaling_svg(f))?;
    }
    let moments: Vec<MomentRow> = report
        .estimates
        .iter()
        .map(|e| MomentRow {
            functional: e.functional.name(),
            p: e.p,
            delta: e.grid.delta,
            value: e.value,
            stderr: e.stderr,
            n_paths: e.n_paths,
            n_steps: e.grid.n_steps,
        })
        .collect();
    let fits: Vec<FitRow> = report
        .fits
        .iter()
        .map(|f| FitRow {
            functional: f.functional.name(),
            p: f.p,
            slope: f.slope,
            slope_stderr: f.slope_stderr,
            intercept: f.intercept,
            r2: f.r2,
            target: f.target,
            window: f.window,
            pass: f.pass,
            note: f
                .skipped
                .clone()
                .or_else(|| f.reason.clone())
                .unwrap_or_default(),
        })
        .collect();
    dir.write_csv("moments.csv", &moments)?;
    dir.write_csv("fits.csv", &fits)?;
    dir.write_json("scaling.json", &report)?;
    close_run(dir, v)
}

#[derive(Serialize)]
struct LemmaRow {
    source: String,
    p: f64,
    lhs: f64,
    lhs_stderr: f64,
    rhs: f64,
    rhs_stderr: f64,
    studentized_margin: f64,
    combined_stderr_ratio: f64,
    pass: bool,
}

fn lemma(a: &LemmaArgs) -> Result<bool> {
    let m = load_model(&a.model)?;
    let (cs, ms) = (&m.model.coeffs, &m.model.marks);
    let th = AuditThresholds::default();
    let ps = parse_list(&a.p, "--p")?;
    if let Some(p) = ps.iter().find(|p| !(**p >= 2.0)) {
        return Err(AuditError::InvalidP(*p).into());
    }
    let mut cfg = SolverConfig::new(
        a.delta,
        a.grid.steps,
        a.grid.paths,
        ZetaSampler::Point(point_zeta(a.zeta.as_deref(), &m)?),
        a.run.seed,
    );
    cfg.basis = a.grid.basis();
    cfg.validate(cs.n())?;
    let base = (a.grid.paths * a.grid.steps) as f64;
    let cost = if a.constant_k.is_some() {
        2.0 * base
    } else {
        base
    };
    let mut dir = open_run(
        "audit-lemma",
        Some(&m),
        &serde_json::json!({ "args": a, "solver": &cfg }),
        &a.run,
        cost,
    )?;
    let sol = picard_run(cs, ms, &cfg, &Terminal::Phi)?;
    let mut v = Verdict::new("audit lemma");
    let mut results = Vec::new();
    for &p in &ps {
        results.push((
            "solution".to_string(),
            check_jump_moment_lemma(&sol.bundle, &sol.drivers, ms, p, &th)?,
        ));
        if let Some(c) = a.constant_k {
            let grid = TimeGrid::new(0.0, a.delta, a.grid.steps)?;
            let r = constant_k_lemma(c, ms, &grid, a.grid.paths, a.run.seed, p, &th)?;
            results.push((format!("constant K = {c}"), r));
        }
    }
    let rows: Vec<LemmaRow> = results
        .iter()
        .map(|(src, r)| LemmaRow {
            source: src.clone(),
            p: r.p,
            lhs: r.lhs.mean,
            lhs_stderr: r.lhs.stderr,
            rhs: r.rhs.mean,
            rhs_stderr: r.rhs.stderr,
            studentized_margin: r.studentized_margin,
            combined_stderr_ratio: r.combined_stderr_ratio,
            pass: r.pass,
        })
        .collect();
    for r in &rows {
        v.check(
            format!("lemma {} p={}", r.source, r.p),
            r.pass,
            format!(
                "LHS {:.4e} ± {:.1e} vs RHS {:.4e} ± {:.1e}",
                r.lhs, r.lhs_stderr, r.rhs, r.rhs_stderr
            ),
        );
    }
    dir.write_csv("lemma.csv", &rows)?;
    let json: Vec<_> = results
        .iter()
        .map(|(s, r)| serde_json::json!({ "source": s, "result": r }))
        .collect();
    dir.write_json("lemma.json", &json)?;
    dir.write_json("diagnostics.json", &sol.diagnostics)?;
    close_run(dir, v)
}

#[derive(Serialize)]
struct CompareRow {
    case: String,
    state: String,
    gap: f64,
    stderr: f64,
    studentized: f64,
}

fn compare(a: &CompareArgs) -> Result<bool> {
    let th = AuditThresholds::default();
    let mut v = Verdict::new("audit compare");
    struct Case {
        label: String,
        cs: crate::model::CoefficientSet,
        ms: crate::mark_space::MarkSpace,
        sample_box: crate::model::SampleBox,
        phi1: CoefficientExpr,
        phi2: CoefficientExpr,
    }
    let (loaded, cases) = match a.random {
        Some(count) => {
            let cases = random_comparison_models(a.run.seed, count)?
                .into_iter()
                .map(|c| Case {
                    label: c.label,
                    sample_box: c.model.sample_box,
                    cs: c.model.coeffs,
                    ms: c.model.marks,
                    phi1: c.phi1,
                    phi2: c.phi2,
                })
                .collect::<Vec<_>>();
            (None, cases)
        }
        None => {
            let m = load_model(&a.model)?;
            let phi2 = match &a.phi2 {
                Some(s) => expr(s)?,
                None => m.model.coeffs.phi_expr().clone(),
            };
            let phi1 = match &a.phi1 {
                Some(s) => expr(s)?,
                None => expr(&format!("({}) + 0.1", m.model.coeffs.phi_expr()))?,
            };
            let case = Case {
                label: a.model.clone(),
                cs: m.model.coeffs.clone(),
                ms: m.model.marks.clone(),
                sample_box: m.model.sample_box,
                phi1,
                phi2,
            };
            (Some(m), vec![case])
        }
    };
    let n = cases.first().map_or(1, |c| c.cs.n());
    let states = parse_states(&a.states, n)?;
    let cost = 2.0 * (cases.len() * states.len() * a.grid.paths * a.grid.steps) as f64;
    let mut dir = open_run("audit-compare", loaded.as_ref(), a, &a.run, cost)?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for c in &cases {
        let mut cfg = ComparisonConfig::new(a.delta, a.grid.steps, a.grid.paths, a.run.seed);
        cfg.basis = a.grid.basis();
        cfg.query_states = states.clone();
        cfg.sample_box = c.sample_box;
        cfg.check_first = a.check_first;
        let name = format!("comparison {}", c.label);
        let Some(r) = applicable(
            compare_terminal(&c.cs, &c.ms, &c.phi1, &c.phi2, &cfg, &th),
            &mut v,
            &name,
        )?
        else {
            continue;
        };
        for (i, s) in r.query_states.iter().enumerate() {
            rows.push(CompareRow {
                case: c.label.clone(),
                state: s
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
                gap: r.gaps[i],
                stderr: r.stderrs[i],
                studentized: r.studentized[i],
            });
        }
        let min_gap = r.gaps.iter().cloned().fold(f64::INFINITY, f64::min);
        v.check(
            name,
            r.pass,
            format!(
                "min gap {min_gap:.4e}, min studentized {:.2} (>= -{})",
                r.min_studentized, th.stderr_multiple
            ),
        );
        results.push(serde_json::json!({ "case": c.label, "result": r }));
    }
    dir.write_csv("compare.csv", &rows)?;
    dir.write_json("compare.json", &results)?;
    close_run(dir, v)
}

#[derive(Serialize)]
struct LevelRow {
    n_paths: usize,
    n_steps: usize,
    gap: f64,
    gap_stderr: f64,
    lhs: f64,
    lhs_stderr: f64,
    rhs_phi: f64,
    rhs_b: f64,
    rhs_sigma: f64,
    rhs_g: f64,
    rhs_h: f64,
    rhs_total: f64,
    c_hat: Option<f64>,
}

#[derive(Serialize)]
struct EpsRow {
    epsilon: f64,
    gap: f64,
    stderr: f64,
    studentized: f64,
    c_emp: f64,
    pass: bool,
}

fn stability(a: &StabilityArgs) -> Result<bool> {
    let m = load_model(&a.model)?;
    let (cs, ms) = (&m.model.coeffs, &m.model.marks);
    let th = AuditThresholds::default();
    let cs2 = match (&a.model2, a.b2.is_empty()) {
        (Some(_), false) => bail!("give either --model2 or --b2, not both"),
        (Some(p), true) => {
            let m2 = load_model(p)?;
            if m2.model.coeffs.n() != cs.n() || m2.model.coeffs.d() != cs.d() {
                bail!("--model2 differs in dimensions");
            }
            Some(m2.model.coeffs)
        }
        (None, false) => {
            let b = a.b2.iter().map(|s| expr(s)).collect::<Result<Vec<_>>>()?;
            Some(cs.with_b(b)?)
        }
        (None, true) => None,
    };
    let eps = a
        .eps
        .as_deref()
        .map(|s| parse_list(s, "--eps"))
        .transpose()?;
    if cs2.is_none() && eps.is_none() {
        bail!("nothing to audit: give --model2, --b2 or --eps");
    }
    let mut cfg = StabilityConfig::new(
        a.delta,
        a.grid.steps,
        a.grid.paths,
        a.run.seed,
        point_zeta(a.zeta.as_deref(), &m)?,
    );
    cfg.basis = a.grid.basis();
    let base = (a.grid.paths * a.grid.steps) as f64;
    let levels: f64 = cfg.refinements.iter().map(|(p, s)| (p * s) as f64).sum();
    let cost = cs2.as_ref().map_or(0.0, |_| 2.0 * levels * base)
        + eps.as_ref().map_or(0.0, |e| 2.0 * e.len() as f64 * base);
    let mut dir = open_run(
        "audit-stability",
        Some(&m),
        &serde_json::json!({ "args": a, "stability": &cfg }),
        &a.run,
        cost,
    )?;
    let mut v = Verdict::new("audit stability");
    let mut json = serde_json::Map::new();
    if let Some(cs2) = &cs2 {
        let r = stability_gap(cs, cs2, ms, &cfg, &th)?;
        let rows: Vec<LevelRow> = r
            .levels
            .iter()
            .map(|l| LevelRow {
                n_paths: l.n_paths,
                n_steps: l.n_steps,
                gap: l.gap,
                gap_stderr: l.gap_stderr,
                lhs: l.lhs,
                lhs_stderr: l.lhs_stderr,
                rhs_phi: l.rhs.phi,
                rhs_b: l.rhs.b,
                rhs_sigma: l.rhs.sigma,
                rhs_g: l.rhs.g,
                rhs_h: l.rhs.h,
                rhs_total: l.rhs.total(),
                c_hat: l.c_hat,
            })
            .collect();
        let chats: Vec<String> = r.levels.iter().map(|l| fmt_opt(l.c_hat)).collect();
        v.check(
            "stability constant",
            r.pass,
            format!(
                "C_hat per level [{}], max/min {} (<= {}){}",
                chats.join(", "),
                fmt_opt(r.c_ratio),
                th.stability_factor,
                r.flag
                    .as_ref()
                    .map(|f| format!("; {f}"))
                    .unwrap_or_default()
            ),
        );
        dir.write_csv("stability.csv", &rows)?;
        json.insert("stability".into(), serde_json::to_value(&r)?);
    }
    if let Some(eps) = &eps {
        let mut rows = Vec::new();
        for &e in eps {
            let name = format!("epsilon shift {e}");
            if let Some(r) = applicable(epsilon_shift(cs, ms, e, &cfg, &th), &mut v, &name)? {
                v.check(
                    name,
                    r.pass,
                    format!(
                        "gap {:.6e}, |gap - eps| {:.2e}, studentized {:.2}",
                        r.gap,
                        (r.gap - e).abs(),
                        r.studentized
                    ),
                );
                rows.push(EpsRow {
                    epsilon: r.epsilon,
                    gap: r.gap,
                    stderr: r.stderr,
                    studentized: r.studentized,
                    c_emp: r.c_emp,
                    pass: r.pass,
                });
            }
        }
        dir.write_csv("epsilon.csv", &rows)?;
        json.insert("epsilon_shift".into(), serde_json::to_value(
            rows.iter().map(|r| serde_json::json!({"epsilon": r.epsilon, "gap": r.gap, "stderr": r.stderr, "pass": r.pass})).collect::<Vec<_>>(),
        )?);
    }
    dir.write_json("stability.json", &json)?;
    close_run(dir, v)
}

#[derive(Serialize)]
struct FieldRow {
    n_paths: usize,
    n_steps: usize,
    lipschitz: f64,
    growth: f64,
}

fn field(a: &FieldArgs) -> Result<bool> {
    let m = load_model(&a.model)?;
    let (cs, ms) = (&m.model.coeffs, &m.model.marks);
    let th = AuditThresholds::default();
    let mut cfg = SolverConfig::new(
        a.delta,
        a.grid.steps,
        a.grid.paths,
        sampler_zeta(None, a.zeta_box.as_deref(), &m)?,
        a.run.seed,
    );
    cfg.basis = a.grid.basis();
    cfg.validate(cs.n())?;
    // levels (M, N), (2M, N), (M, 2N)
    let cost = 5.0 * (a.grid.paths * a.grid.steps) as f64;
    let mut dir = open_run(
        "audit-field",
        Some(&m),
        &serde_json::json!({ "args": a, "solver": &cfg }),
        &a.run,
        cost,
    )?;
    let fc = FieldConfig {
        n_pairs: a.pairs,
        seed: a.run.seed,
    };
    let r = field_regularity_refinement(cs, ms, &cfg, &fc, &th)?;
    let mut v = Verdict::new("audit field");
    v.check(
        "lipschitz ratio",
        r.lipschitz_ratio.is_finite() && r.lipschitz_ratio <= th.stability_factor,
        format!(
            "max/min {:.4} (<= {})",
            r.lipschitz_ratio, th.stability_factor
        ),
    );
    v.check(
        "growth ratio",
        r.growth_ratio.is_finite() && r.growth_ratio <= th.stability_factor,
        format!("max/min {:.4} (<= {})", r.growth_ratio, th.stability_factor),
    );
    let rows: Vec<FieldRow> = r
        .levels
        .iter()
        .map(|(p, s, f)| FieldRow {
            n_paths: *p,
            n_steps: *s,
            lipschitz: f.lipschitz,
            growth: f.growth,
        })
        .collect();
    dir.write_csv("field.csv", &rows)?;
    dir.write_json("field.json", &r)?;
    close_run(dir, v)
}

#[derive(Serialize)]
struct FlowRow {
    train_paths: usize,
    residual: f64,
    stderr: f64,
    interior_nodes: usize,
    windows: usize,
}

fn flow(a: &FlowArgs) -> Result<bool> {
    let m = load_model(&a.model)?;
    let (cs, ms) = (&m.model.coeffs, &m.model.marks);
    let horizon = a.horizon.unwrap_or(2.0 * a.delta);
    let zeta = sampler_zeta(None, a.zeta_box.as_deref(), &m)?;
    let windows = (horizon / a.delta).round().max(1.0);
    let (mm, nn) = (a.grid.paths as f64, a.grid.steps as f64);
    let cost = windows * nn * (mm + 4.0 * mm + 2.0 * a.eval_paths as f64);
    let mut dir = open_run(
        "audit-flow",
        Some(&m),
        &serde_json::json!({ "args": a, "horizon": horizon, "zeta": &zeta }),
        &a.run,
        cost,
    )?;
    let mut rows = Vec::new();
    for train in [a.grid.paths, 4 * a.grid.paths] {
        let mut cfg = SolverConfig::new(a.delta, a.grid.steps, train, zeta.clone(), a.run.seed);
        cfg.basis = a.grid.basis();
        let chain = chain_horizon(cs, ms, horizon, a.delta, &cfg)?;
        let fc = FlowConfig {
            n_paths: a.eval_paths,
            seed: a.run.seed,
            zeta: zeta.clone(),
        };
        let r = flow_residual(cs, ms, &chain.windows, &fc)?;
        rows.push(FlowRow {
            train_paths: train,
            residual: r.residual.mean,
            stderr: r.residual.stderr,
            interior_nodes: r.interior_nodes,
            windows: r.windows,
        });
    }
    let mut v = Verdict::new("audit flow");
    let (r0, r1) = (&rows[0], &rows[1]);
    v.check(
        "residual decreases with paths",
        r1.residual < r0.residual || r0.residual == 0.0 && r1.residual == 0.0,
        format!(
            "M={}: {:.4e} ± {:.1e}; M={}: {:.4e} ± {:.1e}",
            r0.train_paths, r0.residual, r0.stderr, r1.train_paths, r1.residual, r1.stderr
        ),
    );
    dir.write_csv("flow.csv", &rows)?;
    close_run(dir, v)
}

fn drivers(a: &DriversArgs) -> Result<bool> {
    let m = load_model(&a.model)?;
    let th = AuditThresholds::default();
    let grid = TimeGrid::new(0.0, a.delta, a.steps)?;
    let cost = (a.paths * a.steps) as f64;
    let mut dir = open_run("audit-drivers", Some(&m), a, &a.run, cost)?;
    let checks = driver_statistics(
        &grid,
        &m.model.marks,
        m.model.coeffs.d(),
        a.paths,
        a.run.seed,
        &th,
    )?;
    let mut v = Verdict::new("audit drivers");
    for c in &checks {
        v.check(
            c.name.clone(),
            c.pass,
            format!(
                "observed {:.6} expected {:.6}, z = {:.2}",
                c.observed, c.expected, c.z
            ),
        );
    }
    dir.write_csv("drivers.csv", &checks)?;
    close_run(dir, v)
}

#[derive(Serialize)]
struct ReportRow {
    run: String,
    command: String,
    pass: bool,
    checks: usize,
    failed: usize,
    failed_checks: String,
}

fn report(root: &Path) -> Result<bool> {
    let verdicts = run::find_verdicts(root)?;
    if verdicts.is_empty() {
        bail!("no verdict.json found below {}", root.display());
    }
    let rows: Vec<ReportRow> = verdicts
        .iter()
        .map(|(p, v)| {
            let dir = p.parent().unwrap_or(p);
            let failed: Vec<&str> = v
                .checks
                .iter()
                .filter(|c| !c.pass)
                .map(|c| c.name.as_str())
                .collect();
            ReportRow {
                run: dir.strip_prefix(root).unwrap_or(dir).display().to_string(),
                command: v.command.clone(),
                pass: v.pass,
                checks: v.checks.len(),
                failed: failed.len(),
                failed_checks: failed.join("; "),
            }
        })
        .collect();
    let w = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    let wc = rows
        .iter()
        .map(|r| r.command.len())
        .max()
        .unwrap_or(7)
        .max(7);
    println!(
        "{:<w$}  {:<wc$}  {:<4}  {:>6}  failed",
        "run", "command", "pass", "checks"
    );
    for r in &rows {
        println!(
            "{:<w$}  {:<wc$}  {:<4}  {:>6}  {}",
            r.run,
            r.command,
            if r.pass { "yes" } else { "no" },
            r.checks,
            r.failed_checks
        );
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("{e}"))?;
    std::fs::write(root.join("report.csv"), bytes)?;
    let pass = rows.iter().all(|r| r.pass);
    println!(
        "{} of {} runs pass; wrote {}",
        rows.iter().filter(|r| r.pass).count(),
        rows.len(),
        root.join("report.csv").display()
    );
    Ok(pass)
}
