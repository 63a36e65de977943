//! Comparison of initial values under ordered terminal functions:
//! `Φ1 ≥ Φ2` on the terminal states should give `Y¹_t ≥ Y²_t`.

use serde::{Deserialize, Serialize};

use super::{initial_value_samples, AuditError, AuditThresholds};
use crate::expr::CoefficientExpr;
use crate::mark_space::MarkSpace;
use crate::model::{CoefficientSet, Model, ModelFile, SampleBox};
use crate::rng::{StreamKey, Substream};
use crate::solver::{picard_solve, BasisSpec, SolverConfig, ZetaSampler};
use crate::stats::{mean_stderr, studentize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub delta: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub basis: BasisSpec,
    /// Deterministic initial states at which `Y_t` is compared.
    pub query_states: Vec<Vec<f64>>,
    /// States at which `Φ1 ≥ Φ2` is checked before solving.
    pub sample_box: SampleBox,
    pub box_samples: usize,
    /// Check the ordering on the first solution's terminal states instead of
    /// the second's.
    #[serde(default)]
    pub check_first: bool,
}

impl ComparisonConfig {
    pub fn new(delta: f64, n_steps: usize, n_paths: usize, seed: u64) -> Self {
        ComparisonConfig {
            delta,
            n_steps,
            n_paths,
            seed,
            basis: BasisSpec::default(),
            query_states: vec![vec![-1.0], vec![0.0], vec![1.0]],
            sample_box: SampleBox::default(),
            box_samples: 1000,
            check_first: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub query_states: Vec<Vec<f64>>,
    /// Estimates of `Y¹_t − Y²_t`.
    pub gaps: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub studentized: Vec<f64>,
    pub min_studentized: f64,
    pub pass: bool,
}

fn ordered_at(cs1: &CoefficientSet, cs2: &CoefficientSet, x: &[f64]) -> bool {
    let (a, b) = (cs1.terminal(x), cs2.terminal(x));
    a - b >= -1e-12 * (1.0 + b.abs())
}

/// Solve both problems with common random numbers at every query state and
/// studentize the paired per-path differences of `Y_1 + g_0 Δt`.
pub fn compare_terminal(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    phi1: &CoefficientExpr,
    phi2: &CoefficientExpr,
    cfg: &ComparisonConfig,
    th: &AuditThresholds,
) -> Result<ComparisonResult, AuditError> {
    if !cs.forward_free_of_k() {
        return Err(AuditError::Hypothesis(
            "b, sigma and h must not depend on k".into(),
        ));
    }
    let bad = |e: crate::model::ModelError| AuditError::Config(e.to_string());
    let cs1 = cs.with_phi(phi1.clone()).map_err(bad)?;
    let cs2 = cs.with_phi(phi2.clone()).map_err(bad)?;
    let n = cs.n();
    let key = StreamKey::new(cfg.seed, Substream::SAMPLER.indexed(1));
    for s in 0..cfg.box_samples {
        let mut st = key.path(s as u64);
        let x: Vec<f64> = (0..n)
            .map(|_| cfg.sample_box.lo + (cfg.sample_box.hi - cfg.sample_box.lo) * st.uniform())
            .collect();
        if !ordered_at(&cs1, &cs2, &x) {
            return Err(AuditError::Hypothesis(format!(
                "Phi1 < Phi2 at sampled state {x:?}"
            )));
        }
    }
    let mut result = ComparisonResult {
        query_states: cfg.query_states.clone(),
        gaps: Vec::new(),
        stderrs: Vec::new(),
        studentized: Vec::new(),
        min_studentized: f64::INFINITY,
        pass: true,
    };
    for zeta in &cfg.query_states {
        if zeta.len() != n {
            return Err(AuditError::Config("query state dimension".into()));
        }
        let mut sc = SolverConfig::new(
            cfg.delta,
            cfg.n_steps,
            cfg.n_paths,
            ZetaSampler::Point(zeta.clone()),
            cfg.seed,
        );
        sc.basis = cfg.basis.clone();
        let s1 = picard_solve(&cs1, ms, &sc)?;
        let s2 = picard_solve(&cs2, ms, &sc)?;
        let (checked, which) = if cfg.check_first {
            (&s1.bundle, "first")
        } else {
            (&s2.bundle, "second")
        };
        let nn = checked.n_steps();
        if let Some(p) = (0..checked.n_paths).find(|&p| !ordered_at(&cs1, &cs2, checked.x(p, nn))) {
            return Err(AuditError::Hypothesis(format!(
                "Phi1 < Phi2 at terminal state {:?} of the {which} solution",
                checked.x(p, nn)
            )));
        }
        let v1 = initial_value_samples(&cs1, ms, &s1.bundle);
        let v2 = initial_value_samples(&cs2, ms, &s2.bundle);
        let diff: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a - b).collect();
        let m = mean_stderr(&diff);
        let z = studentize(m.mean, m.stderr);
        result.gaps.push(m.mean);
        result.stderrs.push(m.stderr);
        result.studentized.push(z);
        result.min_studentized = result.min_studentized.min(z);
    }
    result.pass = result.min_studentized >= -th.stderr_multiple;
    Ok(result)
}

/// One randomly drawn problem in the comparison class together with an
/// ordered pair of terminal functions.
#[derive(Clone, Debug)]
pub struct ComparisonCase {
    pub label: String,
    pub model: Model,
    pub phi1: CoefficientExpr,
    pub phi2: CoefficientExpr,
}

/// `count` random one-dimensional models with `b`, `σ`, `h` free of `k`,
/// `f` nondecreasing in `q`, and `Φ1 = Φ2 + c0 + c1·exp(−x²)` with `c0 > 0`.
pub fn random_comparison_models(
    seed: u64,
    count: usize,
) -> Result<Vec<ComparisonCase>, AuditError> {
    let key = StreamKey::new(seed, Substream::SAMPLER.indexed(2));
    (0..count)
        .map(|i| {
            let mut s = key.path(i as u64);
            let mut u = |lo: f64, hi: f64| lo + (hi - lo) * s.uniform();
            let (a1, a2) = (u(-0.5, 0.5), u(-0.5, 0.5));
            let (s0, s1) = (u(0.5, 1.5), u(0.0, 0.1));
            let c = u(-0.2, 0.2);
            let (f1, f2, f3, f4) = (u(-0.5, 0.5), u(-0.5, 0.5), u(-0.3, 0.3), u(0.0, 1.0));
            let (e, w) = (u(0.2, 1.0), u(0.5, 3.0));
            let (p1, p2) = (u(0.5, 1.5), u(-0.5, 0.5));
            let (c0, c1) = (u(0.05, 0.5), u(0.0, 0.5));
            let phi2 = format!("({p1:.4})*x + ({p2:.4})*sin(x)");
            let phi1 = format!("{phi2} + ({c0:.4}) + ({c1:.4})*exp(-x*x)");
            let doc = serde_json::json!({
                "name": format!("cmp-{i}"),
                "n": 1, "d": 1,
                "b": [format!("({a1:.4})*x + ({a2:.4})*y")],
                "sigma": [[format!("({s0:.4}) + ({s1:.4})*z")]],
                "h": [format!("({c:.4})*cap1(e)*x")],
                "f": format!("({f1:.4})*y + ({f2:.4})*x + ({f3:.4})*z + ({f4:.4})*q"),
                "phi": phi2,
                "marks": { "atoms": [{ "e": e, "w": w }] },
            });
            let bad = |e: crate::model::ModelError| AuditError::Config(e.to_string());
            let model = ModelFile::from_json_str(&doc.to_string())
                .map_err(bad)?
                .build()
                .map_err(bad)?;
            let parse =
                |t: &str| crate::expr::parse_expr(t).map_err(|e| AuditError::Config(e.to_string()));
            Ok(ComparisonCase {
                label: format!("cmp-{i}"),
                phi1: parse(&phi1)?,
                phi2: parse(&phi2)?,
                model,
            })
        })
        .collect()
}
