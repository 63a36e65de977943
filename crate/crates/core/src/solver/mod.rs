//! Small-interval Picard solver.
//!
//! Each Picard iteration freezes `(y, z, k)` as a feedback law of the state,
//! simulates the forward equation under it, and recomputes `(Y, Z, K)` by a
//! backward least-squares regression pass. Iterations reuse one driver sample
//! (common random numbers), start from `v⁰ = 0`, and stop when the empirical
//! `M² × K²_λ` distance between successive iterates falls below tolerance.

pub mod basis;
pub mod policy;
pub mod regression;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use basis::{BasisSpec, StepBasis};
pub use policy::{PolicyFunction, StepPolicy};
use regression::Design;

use crate::mark_space::MarkSpace;
use crate::model::{CoefficientSet, Point};
use crate::pathsim::{
    euler_forward, sample_window_drivers, DriverBundle, Feedback, PathBundle, SimError, TimeGrid,
    ZeroFeedback,
};
use crate::rng::{StreamKey, Substream};
use crate::stats::{chunked_sum, median, CHUNK};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(
        "Picard iteration did not contract at delta = {delta}: observed ratio {ratio:.3} after \
         {iterations} iterations; try a smaller delta"
    )]
    Divergence {
        delta: f64,
        ratio: f64,
        iterations: usize,
    },
    #[error(
        "no contracting window found: delta fell to {delta} below 4 steps of {dt}; the model \
         violates the smallness condition in practice"
    )]
    Irreducible { delta: f64, dt: f64 },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("window {index}: {source}")]
    Window {
        index: usize,
        #[source]
        source: Box<SolverError>,
    },
}

/// How initial states are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZetaSampler {
    Point(Vec<f64>),
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
}

impl ZetaSampler {
    pub fn from_doc(doc: &crate::model::ZetaDoc) -> Self {
        match doc {
            crate::model::ZetaDoc::Point { point } => ZetaSampler::Point(point.clone()),
            crate::model::ZetaDoc::Box { lo, hi } => ZetaSampler::Uniform {
                lo: lo.clone(),
                hi: hi.clone(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ZetaSampler::Point(p) => p.len(),
            ZetaSampler::Uniform { lo, .. } => lo.len(),
        }
    }

    /// One initial state per path from the `ζ` substream of `window`.
    pub fn draw(&self, n_paths: usize, seed: u64, window: u64) -> Vec<Vec<f64>> {
        match self {
            ZetaSampler::Point(p) => vec![p.clone(); n_paths],
            ZetaSampler::Uniform { lo, hi } => {
                let key = StreamKey::new(seed, Substream::ZETA.indexed(window));
                (0..n_paths)
                    .into_par_iter()
                    .map(|p| {
                        let mut s = key.path(p as u64);
                        lo.iter()
                            .zip(hi)
                            .map(|(a, b)| a + (b - a) * s.uniform())
                            .collect()
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub t0: f64,
    pub delta: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub basis: BasisSpec,
    pub picard_tol: f64,
    pub max_iter: usize,
    /// Iterations run even after the tolerance is met (for ratio evidence).
    pub min_iter: usize,
    pub rho_max: f64,
    pub zeta: ZetaSampler,
    pub seed: u64,
    /// Substream index of the drivers (one per chained window).
    pub window: u64,
}

impl SolverConfig {
    pub fn new(delta: f64, n_steps: usize, n_paths: usize, zeta: ZetaSampler, seed: u64) -> Self {
        SolverConfig {
            t0: 0.0,
            delta,
            n_steps,
            n_paths,
            basis: BasisSpec::default(),
            picard_tol: 1e-8,
            max_iter: 30,
            min_iter: 1,
            rho_max: 0.5,
            zeta,
            seed,
            window: 0,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid, SolverError> {
        Ok(TimeGrid::new(self.t0, self.delta, self.n_steps)?)
    }

    pub fn validate(&self, n: usize) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::Config(m.to_string()));
        if !(self.picard_tol > 0.0) {
            return bad("picard_tol must be positive");
        }
        if self.max_iter < 2 {
            return bad("max_iter must be at least 2");
        }
        if !(self.rho_max > 0.0 && self.rho_max < 1.0) {
            return bad("rho_max must lie in (0, 1)");
        }
        if self.n_paths < 2 {
            return bad("n_paths must be at least 2");
        }
        if self.zeta.dim() != n {
            return bad("zeta sampler dimension does not match the model");
        }
        if let ZetaSampler::Uniform { lo, hi } = &self.zeta {
            if lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
                return bad("zeta box needs lo <= hi");
            }
        }
        if let BasisSpec::PiecewiseLinear { .. } = self.basis {
            if n != 1 {
                return bad("piecewise-linear basis requires n = 1");
            }
        }
        self.grid()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    /// `‖Vⁿ − Vⁿ⁻¹‖` for n = 1, 2, … (`V⁰ = 0`).
    pub diffs: Vec<f64>,
    /// `‖Vⁿ⁺¹ − Vⁿ‖ / ‖Vⁿ − Vⁿ⁻¹‖` for n = 1, 2, …
    pub ratios: Vec<f64>,
    /// Median ratio over n = 2..4 (earlier ratios if the run stopped sooner).
    pub contraction_ratio: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub delta: f64,
    pub n_steps: usize,
    pub n_paths: usize,
}

/// Terminal condition of a window: `Φ`, or the next window's `u(t, ·)`.
// built once per window; boxing the policy buys nothing
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Terminal {
    Phi,
    Field(StepPolicy),
}

impl Terminal {
    pub fn eval(&self, cs: &CoefficientSet, x: &[f64]) -> f64 {
        match self {
            Terminal::Phi => cs.terminal(x),
            Terminal::Field(sp) => sp.y_at(x),
        }
    }
}

fn gather_states(bundle: &PathBundle, node: usize) -> Vec<f64> {
    let n = bundle.n;
    let mut xs = vec![0.0; bundle.n_paths * n];
    xs.par_chunks_mut(n.max(1))
        .enumerate()
        .for_each(|(p, o)| o.copy_from_slice(bundle.x(p, node)));
    xs
}

/// Overwrite `Y_N` with the terminal condition.
pub fn apply_terminal(cs: &CoefficientSet, bundle: &mut PathBundle, terminal: &Terminal) {
    if let Terminal::Phi = terminal {
        return;
    }
    let nn = bundle.n_steps();
    for p in 0..bundle.n_paths {
        let v = terminal.eval(cs, bundle.x(p, nn));
        bundle.set_y(p, nn, v);
    }
}

/// One backward pass: `Y_N = terminal(X_N)`, then for descending steps regress
/// `Y_{i+1}` for `Ê_i`, the variance-reduced martingale targets for `Z_i` and
/// `K_i`, and finally `Ê_i + g(t_i, X_i, Ê_i, Z_i, K_i) Δt` for `Y_i`.
pub fn backward_regression_pass(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    bundle: &PathBundle,
    drivers: &DriverBundle,
    terminal: &Terminal,
    spec: &BasisSpec,
) -> (PolicyFunction, Vec<String>) {
    let n = cs.n();
    let d = cs.d();
    let j = ms.len();
    let m = bundle.n_paths;
    let grid = bundle.grid;
    let nn = grid.n_steps;
    let dt = grid.dt();
    let weights: Vec<f64> = ms.weights().collect();
    let comp = drivers.compensator().to_vec();
    let mut warnings = Vec::new();

    let x_last = gather_states(bundle, nn);
    let mut y_next: Vec<f64> = x_last.par_chunks(n).map(|x| terminal.eval(cs, x)).collect();
    let mut steps: Vec<StepPolicy> = Vec::with_capacity(nn);
    for i in (0..nn).rev() {
        let xs = gather_states(bundle, i);
        let basis = StepBasis::fit(spec, &xs, n);
        let design = Design::build(&basis, &xs, n);
        if design.ridged {
            warnings.push(format!(
                "step {i}: rank-deficient design, ridge {:.0e} applied",
                regression::RIDGE
            ));
        }
        let e_coef = design.solve(&[&y_next]).remove(0);
        let e_hat = design.fitted(&e_coef);

        // martingale-increment targets
        let mut targets: Vec<Vec<f64>> = vec![vec![0.0; m]; d + j];
        {
            let mut cols: Vec<&mut [f64]> = targets.iter_mut().map(|v| v.as_mut_slice()).collect();
            for p in 0..m {
                let r = y_next[p] - e_hat[p];
                let db = drivers.db(p, i);
                for c in 0..d {
                    cols[c][p] = r * db[c] / dt;
                }
                for a in 0..j {
                    cols[d + a][p] = r * (drivers.dn(p, i, a) - comp[a]) / (weights[a] * dt);
                }
            }
        }
        let refs: Vec<&[f64]> = targets.iter().map(|v| v.as_slice()).collect();
        let zk_coef = if refs.is_empty() {
            Vec::new()
        } else {
            design.solve(&refs)
        };
        let z_coef: Vec<Vec<f64>> = zk_coef[..d].to_vec();
        let k_coef: Vec<Vec<f64>> = zk_coef[d..].to_vec();

        let t = grid.time(i);
        let p_feat = design.p;
        let mut y_raw = vec![0.0; m];
        y_raw
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(c, out)| {
                let mut zv = vec![0.0; d];
                let mut kv = vec![0.0; j];
                for (off, o) in out.iter_mut().enumerate() {
                    let p = c * CHUNK + off;
                    let phi = &design.features[p * p_feat..(p + 1) * p_feat];
                    for (v, cf) in zv.iter_mut().zip(&z_coef) {
                        *v = basis::dot(cf, phi);
                    }
                    for (v, cf) in kv.iter_mut().zip(&k_coef) {
                        *v = basis::dot(cf, phi);
                    }
                    let x = &xs[p * n..(p + 1) * n];
                    let q = ms.reduce_k(&kv);
                    let g = cs.f_value(&Point {
                        t,
                        x,
                        y: e_hat[p],
                        z: &zv,
                        k: &kv,
                        q,
                    });
                    *o = e_hat[p] + g * dt;
                }
            });
        let y_coef = design.solve(&[&y_raw]).remove(0);
        y_next = design.fitted(&y_coef);
        steps.push(StepPolicy {
            basis,
            y: y_coef,
            z: z_coef,
            k: k_coef,
        });
    }
    steps.reverse();
    (
        PolicyFunction {
            grid,
            n,
            d,
            n_atoms: j,
            spec: spec.clone(),
            steps,
        },
        warnings,
    )
}

/// `sqrt(E[Σ_i (|Δy|² + |Δz|² + Σ_j Δk_j² w_j) Δt])` along the paths of `bundle`.
pub fn policy_distance<A: Feedback + ?Sized, B: Feedback + ?Sized>(
    a: &A,
    b: &B,
    bundle: &PathBundle,
    ms: &MarkSpace,
) -> f64 {
    let d = bundle.d;
    let j = bundle.n_atoms;
    let nn = bundle.n_steps();
    let dt = bundle.grid.dt();
    let weights: Vec<f64> = ms.weights().collect();
    let s = chunked_sum(bundle.n_paths, 1, |r, acc| {
        let (mut za, mut zb) = (vec![0.0; d], vec![0.0; d]);
        let (mut ka, mut kb) = (vec![0.0; j], vec![0.0; j]);
        for p in r {
            for i in 0..nn {
                let x = bundle.x(p, i);
                let ya = a.feedback(i, x, &mut za, &mut ka);
                let yb = b.feedback(i, x, &mut zb, &mut kb);
                let mut v = (ya - yb).powi(2);
                v += za
                    .iter()
                    .zip(&zb)
                    .map(|(u, w)| (u - w).powi(2))
                    .sum::<f64>();
                v += ka
                    .iter()
                    .zip(&kb)
                    .zip(&weights)
                    .map(|((u, w), wt)| (u - w).powi(2) * wt)
                    .sum::<f64>();
                acc[0] += v * dt;
            }
        }
    });
    (s[0] / bundle.n_paths as f64).sqrt()
}

/// Median of the ratios for n = 2..4, or of those available.
fn contraction_ratio(ratios: &[f64]) -> Option<f64> {
    if ratios.len() >= 2 {
        median(&ratios[1..ratios.len().min(4)])
    } else {
        median(ratios)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

/// Solution of one window.
#[derive(Clone, Debug)]
pub struct Solution {
    pub policy: PolicyFunction,
    pub bundle: PathBundle,
    pub diagnostics: SolveDiagnostics,
    pub drivers: DriverBundle,
    pub zeta: Vec<Vec<f64>>,
}

/// Run the Picard loop without turning non-contraction into an error.
pub fn picard_run(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    config: &SolverConfig,
    terminal: &Terminal,
) -> Result<Solution, SolverError> {
    config.validate(cs.n())?;
    let grid = config.grid()?;
    let drivers = sample_window_drivers(
        &grid,
        ms,
        cs.d(),
        config.n_paths,
        config.seed,
        config.window,
    );
    let zeta = config.zeta.draw(config.n_paths, config.seed, config.window);
    picard_with(cs, ms, config, terminal, drivers, zeta)
}

/// Picard loop on supplied drivers and initial states.
pub fn picard_with(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    config: &SolverConfig,
    terminal: &Terminal,
    drivers: DriverBundle,
    zeta: Vec<Vec<f64>>,
) -> Result<Solution, SolverError> {
    let mut diag = SolveDiagnostics {
        delta: config.delta,
        n_steps: config.n_steps,
        n_paths: config.n_paths,
        ..Default::default()
    };
    let mut current: Option<PolicyFunction> = None;
    for it in 1..=config.max_iter {
        let bundle = match &current {
            None => euler_forward(cs, ms, &ZeroFeedback, &zeta, &drivers)?,
            Some(p) => euler_forward(cs, ms, p, &zeta, &drivers)?,
        };
        let (next, warns) =
            backward_regression_pass(cs, ms, &bundle, &drivers, terminal, &config.basis);
        for w in warns {
            if !diag.warnings.contains(&w) {
                diag.warnings.push(w);
            }
        }
        let dist = match &current {
            None => policy_distance(&next, &ZeroFeedback, &bundle, ms),
            Some(p) => policy_distance(&next, p, &bundle, ms),
        };
        if let Some(prev) = diag.diffs.last() {
            diag.ratios.push(ratio(dist, *prev));
        }
        diag.diffs.push(dist);
        diag.iterations = it;
        current = Some(next);
        if !dist.is_finite() {
            break;
        }
        if dist <= config.picard_tol && it >= config.min_iter.max(2) {
            diag.converged = true;
            break;
        }
        // an exact fixed point cannot produce further ratio evidence
        if dist == 0.0 {
            diag.converged = true;
            break;
        }
    }
    diag.contraction_ratio = contraction_ratio(&diag.ratios);
    let policy = current.expect("at least one iteration");
    let mut bundle = euler_forward(cs, ms, &policy, &zeta, &drivers)?;
    apply_terminal(cs, &mut bundle, terminal);
    Ok(Solution {
        policy,
        bundle,
        diagnostics: diag,
        drivers,
        zeta,
    })
}

/// Picard solve with terminal `Φ`; non-contraction at `max_iter` is an error.
pub fn picard_solve(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    config: &SolverConfig,
) -> Result<Solution, SolverError> {
    picard_solve_with_terminal(cs, ms, config, &Terminal::Phi)
}

pub fn picard_solve_with_terminal(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    config: &SolverConfig,
    terminal: &Terminal,
) -> Result<Solution, SolverError> {
    let sol = picard_run(cs, ms, config, terminal)?;
    let d = &sol.diagnostics;
    if !d.converged {
        let r = d.contraction_ratio.unwrap_or(f64::INFINITY);
        if !(r < 1.0) {
            return Err(SolverError::Divergence {
                delta: config.delta,
                ratio: r,
                iterations: d.iterations,
            });
        }
    }
    Ok(sol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta0Attempt {
    pub delta: f64,
    pub n_steps: usize,
    pub ratio: Option<f64>,
    pub diffs: Vec<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta0Evidence {
    pub delta0: f64,
    pub n_steps: usize,
    pub ratio: f64,
    pub attempts: Vec<Delta0Attempt>,
}

/// Halve `δ` at fixed `Δt` until the observed contraction ratio is at most
/// `rho_max`. Refuses once fewer than four steps remain.
pub fn find_delta0(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    config: &SolverConfig,
) -> Result<Delta0Evidence, (SolverError, Vec<Delta0Attempt>)> {
    let dt = config.delta / config.n_steps as f64;
    let mut delta = config.delta;
    let mut attempts = Vec::new();
    loop {
        let steps = (delta / dt).round() as usize;
        if steps < 4 {
            return Err((SolverError::Irreducible { delta, dt }, attempts));
        }
        let mut cfg = config.clone();
        cfg.delta = delta;
        cfg.n_steps = steps;
        cfg.min_iter = cfg.min_iter.max(5);
        match picard_run(cs, ms, &cfg, &Terminal::Phi) {
            Ok(sol) => {
                let r = sol.diagnostics.contraction_ratio;
                attempts.push(Delta0Attempt {
                    delta,
                    n_steps: steps,
                    ratio: r,
                    diffs: sol.diagnostics.diffs.clone(),
                    note: None,
                });
                if let Some(r) = r {
                    if r <= config.rho_max {
                        return Ok(Delta0Evidence {
                            delta0: delta,
                            n_steps: steps,
                            ratio: r,
                            attempts,
                        });
                    }
                }
            }
            Err(SolverError::Sim(e)) => attempts.push(Delta0Attempt {
                delta,
                n_steps: steps,
                ratio: None,
                diffs: Vec::new(),
                note: Some(e.to_string()),
            }),
            Err(e) => return Err((e, attempts)),
        }
        delta /= 2.0;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldValue {
    pub x: Vec<f64>,
    pub u: f64,
    /// Set when `x` lies outside the training cloud of step 0.
    pub extrapolated: bool,
}

/// `u(t0, x)` = the step-0 `y` regression evaluated at each query point.
pub fn decoupling_field(policy: &PolicyFunction, xs: &[Vec<f64>]) -> Vec<FieldValue> {
    let s0 = &policy.steps[0];
    xs.iter()
        .map(|x| FieldValue {
            x: x.clone(),
            u: s0.y_at(x),
            extrapolated: !s0.basis.covers(x),
        })
        .collect()
}

/// Policies for consecutive windows covering `[t0, t0 + horizon]`.
#[derive(Clone, Debug)]
pub struct ChainSolution {
    pub windows: Vec<PolicyFunction>,
    pub diagnostics: Vec<SolveDiagnostics>,
}

/// Backward induction over windows of length `window`: the last window uses
/// `Φ`, earlier ones the next window's `u(t_{w+1}, ·)`. Window `w` draws its
/// drivers and initial states from substream index `config.window + w`.
pub fn chain_horizon(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    horizon: f64,
    window: f64,
    config: &SolverConfig,
) -> Result<ChainSolution, SolverError> {
    let count = (horizon / window).round();
    if !(count >= 1.0) || ((count * window - horizon).abs() > 1e-9 * horizon.abs().max(1.0)) {
        return Err(SolverError::Config(format!(
            "horizon {horizon} is not a positive multiple of the window {window}"
        )));
    }
    let count = count as usize;
    let mut windows: Vec<PolicyFunction> = Vec::with_capacity(count);
    let mut diags = Vec::with_capacity(count);
    let mut terminal = Terminal::Phi;
    for w in (0..count).rev() {
        let mut cfg = config.clone();
        cfg.t0 = config.t0 + window * w as f64;
        cfg.delta = window;
        cfg.window = config.window + w as u64;
        let sol = picard_solve_with_terminal(cs, ms, &cfg, &terminal).map_err(|e| {
            SolverError::Window {
                index: w,
                source: Box::new(e),
            }
        })?;
        terminal = Terminal::Field(sol.policy.steps[0].clone());
        windows.push(sol.policy);
        diags.push(sol.diagnostics);
    }
    windows.reverse();
    diags.reverse();
    Ok(ChainSolution {
        windows,
        diagnostics: diags,
    })
}
