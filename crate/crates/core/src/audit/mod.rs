//! Monte Carlo audits of the solver's moment, scaling, comparison, stability
//! and regularity properties.
//!
//! Conditional expectations are audited at deterministic initial states, where
//! they are plain expectations. Every estimator is a sample mean of per-path
//! values with its standard error; pass/fail thresholds live in
//! [`AuditThresholds`].

pub mod compare;
pub mod drivers;
pub mod field;
pub mod flow;
pub mod lemma;
pub mod moments;
pub mod scaling;
pub mod stability;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use compare::{compare_terminal, random_comparison_models, ComparisonConfig, ComparisonResult};
pub use drivers::{driver_statistics, StatCheck};
pub use field::{
    field_regularity, field_regularity_refinement, FieldConfig, FieldRefinement, FieldReport,
};
pub use flow::{flow_residual, FlowConfig, FlowResult};
pub use lemma::{check_jump_moment_lemma, constant_k_lemma, LemmaResult};
pub use moments::{estimate_moments, functional_values, Functional, MomentEstimate};
pub use scaling::{fit_scaling, scaling_target, ScalingFit, ScalingPlan};
pub use stability::{
    epsilon_shift, stability_gap, EpsilonShiftResult, StabilityConfig, StabilityResult,
};

use crate::mark_space::MarkSpace;
use crate::model::{CoefficientSet, Point};
use crate::pathsim::{PathBundle, SimError};
use crate::solver::SolverError;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("moment order p = {0} is below 2")]
    InvalidP(f64),
    #[error("hypothesis not satisfied, audit not applicable: {0}")]
    Hypothesis(String),
    #[error("invalid audit configuration: {0}")]
    Config(String),
}

/// Pass/fail thresholds with their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditThresholds {
    /// Studentized tolerance for statistical agreement.
    pub stderr_multiple: f64,
    /// Allowed max/min ratio of refinement-stable constants.
    pub stability_factor: f64,
    /// Slope window around 1 for jump-driven increments.
    pub slope_window_jump: f64,
    /// Slope window around p/2 for diffusive functionals.
    pub slope_window_diffusive: f64,
    /// Floor applied to standard errors of exact (noise-free) differences.
    pub stderr_floor: f64,
}

impl Default for AuditThresholds {
    fn default() -> Self {
        AuditThresholds {
            stderr_multiple: 3.0,
            stability_factor: 2.0,
            slope_window_jump: 0.25,
            slope_window_diffusive: 0.3,
            stderr_floor: 1e-12,
        }
    }
}

/// Coefficient arguments along a solved bundle at `(path, step)`.
pub(crate) fn with_point<R>(
    bundle: &PathBundle,
    ms: &MarkSpace,
    path: usize,
    step: usize,
    f: impl FnOnce(Point<'_>) -> R,
) -> R {
    let k = bundle.k(path, step);
    f(Point {
        t: bundle.grid.time(step),
        x: bundle.x(path, step),
        y: bundle.y(path, step),
        z: bundle.z(path, step),
        k,
        q: ms.reduce_k(k),
    })
}

/// Per-path `Y_1 + g(t_0, X_0, Y_0, Z_0, K_0) Δt`, whose mean is `Y_0` for a
/// deterministic initial state.
pub(crate) fn initial_value_samples(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    bundle: &PathBundle,
) -> Vec<f64> {
    let dt = bundle.grid.dt();
    (0..bundle.n_paths)
        .map(|p| {
            let g = with_point(bundle, ms, p, 0, |pt| cs.f_value(&pt));
            bundle.y(p, 1) + g * dt
        })
        .collect()
}
