//! Stability of `Y_t` under coefficient perturbations, and the `ε`-shift of
//! the terminal function.

use serde::{Deserialize, Serialize};

use super::{initial_value_samples, with_point, AuditError, AuditThresholds};
use crate::expr::{parse_expr, CoefficientExpr};
use crate::mark_space::MarkSpace;
use crate::model::{CoefficientSet, Point};
use crate::pathsim::PathBundle;
use crate::solver::{picard_solve, BasisSpec, SolverConfig, ZetaSampler};
use crate::stats::{chunked_sum, mean_stderr, studentize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub delta: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub basis: BasisSpec,
    /// Deterministic initial state.
    pub zeta: Vec<f64>,
    /// `(path multiplier, step multiplier)` levels; the first is the baseline.
    pub refinements: Vec<(usize, usize)>,
}

impl StabilityConfig {
    pub fn new(delta: f64, n_steps: usize, n_paths: usize, seed: u64, zeta: Vec<f64>) -> Self {
        StabilityConfig {
            delta,
            n_steps,
            n_paths,
            seed,
            basis: BasisSpec::default(),
            zeta,
            refinements: vec![(1, 1), (2, 1), (1, 2)],
        }
    }

    fn solver(&self, paths: usize, steps: usize) -> SolverConfig {
        let mut c = SolverConfig::new(
            self.delta,
            steps,
            paths,
            ZetaSampler::Point(self.zeta.clone()),
            self.seed,
        );
        c.basis = self.basis.clone();
        c
    }
}

/// Right-hand-side integrals along the first solution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RhsTerms {
    /// `E|Φ1 − Φ2|²(X¹_T)`
    pub phi: f64,
    /// `δ E∫|b1 − b2|²`
    pub b: f64,
    /// `E∫|σ1 − σ2|²`
    pub sigma: f64,
    /// `δ E∫|g1 − g2|²`
    pub g: f64,
    /// `E∫∫|h1 − h2|² λ(de)`
    pub h: f64,
}

impl RhsTerms {
    pub fn total(&self) -> f64 {
        self.phi + self.b + self.sigma + self.g + self.h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityLevel {
    pub n_paths: usize,
    pub n_steps: usize,
    pub gap: f64,
    pub gap_stderr: f64,
    /// `|Y¹_t − Y²_t|²`
    pub lhs: f64,
    pub lhs_stderr: f64,
    pub rhs: RhsTerms,
    /// `LHS / RHS`, absent when the right-hand side vanishes.
    pub c_hat: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub levels: Vec<StabilityLevel>,
    /// `max Ĉ / min Ĉ` over the levels.
    pub c_ratio: Option<f64>,
    pub flag: Option<String>,
    pub pass: bool,
}

fn rhs_terms(
    cs1: &CoefficientSet,
    cs2: &CoefficientSet,
    ms: &MarkSpace,
    bundle: &PathBundle,
) -> RhsTerms {
    let n = cs1.n();
    let d = cs1.d();
    let nn = bundle.n_steps();
    let dt = bundle.grid.dt();
    let delta = bundle.grid.delta;
    let marks: Vec<f64> = ms.marks().collect();
    let weights: Vec<f64> = ms.weights().collect();
    let s = chunked_sum(bundle.n_paths, 5, |r, acc| {
        let (mut u, mut v) = (vec![0.0; n * d.max(1)], vec![0.0; n * d.max(1)]);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        for p in r {
            let xt = bundle.x(p, nn);
            acc[0] += (cs1.terminal(xt) - cs2.terminal(xt)).powi(2);
            for i in 0..nn {
                with_point(bundle, ms, p, i, |pt: Point<'_>| {
                    cs1.drift(&pt, &mut u[..n]);
                    cs2.drift(&pt, &mut v[..n]);
                    acc[1] += delta * sq(&u[..n], &v[..n]) * dt;
                    cs1.diffusion(&pt, &mut u[..n * d]);
                    cs2.diffusion(&pt, &mut v[..n * d]);
                    acc[2] += sq(&u[..n * d], &v[..n * d]) * dt;
                    acc[3] += delta * (cs1.f_value(&pt) - cs2.f_value(&pt)).powi(2) * dt;
                    for (a, (e, w)) in marks.iter().zip(&weights).enumerate() {
                        cs1.jump(&pt, a, *e, &mut u[..n]);
                        cs2.jump(&pt, a, *e, &mut v[..n]);
                        acc[4] += sq(&u[..n], &v[..n]) * w * dt;
                    }
                });
            }
        }
    });
    let m = bundle.n_paths as f64;
    RhsTerms {
        phi: s[0] / m,
        b: s[1] / m,
        sigma: s[2] / m,
        g: s[3] / m,
        h: s[4] / m,
    }
}

/// Estimate `|Y¹_t − Y²_t|²` against the perturbation integrals at each
/// refinement level; pass iff the implied constant stays within the
/// stability factor, or both sides vanish.
pub fn stability_gap(
    cs1: &CoefficientSet,
    cs2: &CoefficientSet,
    ms: &MarkSpace,
    cfg: &StabilityConfig,
    th: &AuditThresholds,
) -> Result<StabilityResult, AuditError> {
    if cs1.n() != cs2.n() || cs1.d() != cs2.d() {
        return Err(AuditError::Config("models differ in dimension".into()));
    }
    if cfg.refinements.is_empty() {
        return Err(AuditError::Config("no refinement levels".into()));
    }
    let mut levels = Vec::new();
    let mut flag = None;
    let mut pass = true;
    for &(pm, sm) in &cfg.refinements {
        let sc = cfg.solver(cfg.n_paths * pm, cfg.n_steps * sm);
        let s1 = picard_solve(cs1, ms, &sc)?;
        let s2 = picard_solve(cs2, ms, &sc)?;
        let v1 = initial_value_samples(cs1, ms, &s1.bundle);
        let v2 = initial_value_samples(cs2, ms, &s2.bundle);
        let diff: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a - b).collect();
        let g = mean_stderr(&diff);
        let lhs = g.mean * g.mean;
        let lhs_stderr = 2.0 * g.mean.abs() * g.stderr;
        let rhs = rhs_terms(cs1, cs2, ms, &s1.bundle);
        let total = rhs.total();
        let c_hat = if total > 0.0 { Some(lhs / total) } else { None };
        if total == 0.0 && g.mean.abs() > th.stderr_multiple * g.stderr {
            flag = Some(format!(
                "inconsistent: right-hand side vanishes but |Y1 - Y2| = {:.3e} exceeds noise at M = {}, N = {}",
                g.mean.abs(),
                sc.n_paths,
                sc.n_steps
            ));
            pass = false;
        }
        levels.push(StabilityLevel {
            n_paths: sc.n_paths,
            n_steps: sc.n_steps,
            gap: g.mean,
            gap_stderr: g.stderr,
            lhs,
            lhs_stderr,
            rhs,
            c_hat,
        });
    }
    let cs: Vec<f64> = levels.iter().filter_map(|l| l.c_hat).collect();
    let c_ratio = if cs.len() == levels.len() {
        let max = cs.iter().cloned().fold(0.0, f64::max);
        let min = cs.iter().cloned().fold(f64::INFINITY, f64::min);
        Some(if max == 0.0 { 1.0 } else { max / min })
    } else {
        None
    };
    match c_ratio {
        Some(r) => pass &= r <= th.stability_factor,
        // all right-hand sides vanish: identical problems, consistent iff no flag
        None if cs.is_empty() => {}
        None => {
            pass = false;
            flag.get_or_insert_with(|| "right-hand side vanishes at some levels only".into());
        }
    }
    Ok(StabilityResult {
        levels,
        c_ratio,
        flag,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonShiftResult {
    pub epsilon: f64,
    pub gap: f64,
    pub stderr: f64,
    /// `(gap − ε) / max(stderr, floor)`
    pub studentized: f64,
    /// `|gap| / ε`
    pub c_emp: f64,
    pub pass: bool,
}

/// Compare `Φ + ε` with `Φ`. When `g` and the forward coefficients ignore
/// `y`, the shift passes through exactly: `Y¹_t − Y²_t = ε`.
pub fn epsilon_shift(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    epsilon: f64,
    cfg: &StabilityConfig,
    th: &AuditThresholds,
) -> Result<EpsilonShiftResult, AuditError> {
    if !(cs.f_free_of_y() && cs.forward_free_of_y()) {
        return Err(AuditError::Hypothesis(
            "the exact epsilon-shift needs f, b, sigma and h free of y".into(),
        ));
    }
    let shifted: CoefficientExpr = parse_expr(&format!("({}) + ({epsilon:e})", cs.phi_expr()))
        .map_err(|e| AuditError::Config(e.to_string()))?;
    let cs1 = cs
        .with_phi(shifted)
        .map_err(|e| AuditError::Config(e.to_string()))?;
    let sc = cfg.solver(cfg.n_paths, cfg.n_steps);
    let s1 = picard_solve(&cs1, ms, &sc)?;
    let s2 = picard_solve(cs, ms, &sc)?;
    let v1 = initial_value_samples(&cs1, ms, &s1.bundle);
    let v2 = initial_value_samples(cs, ms, &s2.bundle);
    let diff: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a - b).collect();
    let g = mean_stderr(&diff);
    let z = studentize(g.mean - epsilon, g.stderr.max(th.stderr_floor));
    Ok(EpsilonShiftResult {
        epsilon,
        gap: g.mean,
        stderr: g.stderr,
        studentized: z,
        c_emp: g.mean.abs() / epsilon.abs(),
        pass: z.abs() <= th.stderr_multiple,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;

    fn cfg() -> StabilityConfig {
        StabilityConfig::new(0.1, 8, 2000, 11, vec![0.5])
    }

    #[test]
    fn identical_models_have_zero_gap() {
        let m = builtin("T3").unwrap();
        let r = stability_gap(
            &m.coeffs,
            &m.coeffs,
            &m.marks,
            &cfg(),
            &AuditThresholds::default(),
        )
        .unwrap();
        for l in &r.levels {
            assert_eq!(l.lhs, 0.0);
            assert_eq!(l.rhs.total(), 0.0);
        }
        assert!(r.pass && r.flag.is_none());
    }

    #[test]
    fn shift_passes_through_exactly() {
        let m = builtin("T3-shift").unwrap();
        for eps in [0.1, 0.01] {
            let r = epsilon_shift(
                &m.coeffs,
                &m.marks,
                eps,
                &cfg(),
                &AuditThresholds::default(),
            )
            .unwrap();
            assert!((r.gap - eps).abs() < 1e-12, "{r:?}");
            assert!(r.pass);
        }
    }

    #[test]
    fn shift_requires_y_free_coefficients() {
        let m = builtin("T3").unwrap();
        assert!(matches!(
            epsilon_shift(
                &m.coeffs,
                &m.marks,
                0.1,
                &cfg(),
                &AuditThresholds::default()
            ),
            Err(AuditError::Hypothesis(_))
        ));
    }

    #[test]
    fn drift_perturbation_has_finite_constant() {
        let m = builtin("T3").unwrap();
        let b2 = vec![parse_expr("-y + 0.1").unwrap()];
        let cs2 = m.coeffs.with_b(b2).unwrap();
        let r = stability_gap(
            &m.coeffs,
            &cs2,
            &m.marks,
            &cfg(),
            &AuditThresholds::default(),
        )
        .unwrap();
        for l in &r.levels {
            let c = l.c_hat.unwrap();
            assert!(c.is_finite() && c > 0.0);
            assert!(l.rhs.b > 0.0 && l.rhs.phi == 0.0);
        }
    }
}
