//! Lipschitz and linear-growth ratios of the decoupling field `u(t0, ·)`.

use serde::{Deserialize, Serialize};

use super::{AuditError, AuditThresholds};
use crate::mark_space::MarkSpace;
use crate::model::CoefficientSet;
use crate::rng::{StreamKey, Substream};
use crate::solver::{picard_solve, PolicyFunction, SolverConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub n_pairs: usize,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            n_pairs: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldReport {
    /// `sup |u(x) − u(x′)| / |x − x′|` over random pairs.
    pub lipschitz: f64,
    /// `sup |u(x)| / (1 + |x|)` over the same points.
    pub growth: f64,
    pub n_pairs: usize,
    /// Query box: the training cloud of the first step.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Empirical ratios over uniform points of the step-0 training box, so no
/// query extrapolates.
pub fn field_regularity(policy: &PolicyFunction, cfg: &FieldConfig) -> FieldReport {
    let s0 = &policy.steps[0];
    let (lo, hi) = (s0.basis.lo.clone(), s0.basis.hi.clone());
    let key = StreamKey::new(cfg.seed, Substream::SAMPLER.indexed(3));
    let mut lipschitz: f64 = 0.0;
    let mut growth: f64 = 0.0;
    for i in 0..cfg.n_pairs {
        let mut s = key.path(i as u64);
        let mut draw = || -> Vec<f64> {
            lo.iter()
                .zip(&hi)
                .map(|(a, b)| a + (b - a) * s.uniform())
                .collect()
        };
        let (x, x2) = (draw(), draw());
        let (u, u2) = (s0.y_at(&x), s0.y_at(&x2));
        let dx: Vec<f64> = x.iter().zip(&x2).map(|(a, b)| a - b).collect();
        let r = norm(&dx);
        if r > 0.0 {
            lipschitz = lipschitz.max((u - u2).abs() / r);
        }
        growth = growth
            .max(u.abs() / (1.0 + norm(&x)))
            .max(u2.abs() / (1.0 + norm(&x2)));
    }
    FieldReport {
        lipschitz,
        growth,
        n_pairs: cfg.n_pairs,
        lo,
        hi,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldRefinement {
    /// `(n_paths, n_steps, report)` for the baseline, `2M`, and `2N`.
    pub levels: Vec<(usize, usize, FieldReport)>,
    pub lipschitz_ratio: f64,
    pub growth_ratio: f64,
    pub pass: bool,
}

fn spread(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(0.0, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    // ratios at rounding level count as the zero field
    if max <= 1e-9 {
        1.0
    } else {
        max / min
    }
}

/// Solve at the base level, with doubled paths, and with doubled steps;
/// pass iff both ratios stay finite and within the stability factor.
pub fn field_regularity_refinement(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    base: &SolverConfig,
    cfg: &FieldConfig,
    th: &AuditThresholds,
) -> Result<FieldRefinement, AuditError> {
    let mut levels = Vec::new();
    for (pm, sm) in [(1, 1), (2, 1), (1, 2)] {
        let mut c = base.clone();
        c.n_paths *= pm;
        c.n_steps *= sm;
        let sol = picard_solve(cs, ms, &c)?;
        levels.push((c.n_paths, c.n_steps, field_regularity(&sol.policy, cfg)));
    }
    let lips: Vec<f64> = levels.iter().map(|l| l.2.lipschitz).collect();
    let grow: Vec<f64> = levels.iter().map(|l| l.2.growth).collect();
    let (lr, gr) = (spread(&lips), spread(&grow));
    let finite = lips.iter().chain(&grow).all(|v| v.is_finite());
    Ok(FieldRefinement {
        levels,
        lipschitz_ratio: lr,
        growth_ratio: gr,
        pass: finite && lr <= th.stability_factor && gr <= th.stability_factor,
    })
}
