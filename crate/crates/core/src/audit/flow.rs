//! Flow-property residual `E|Y_s − u(s, X_s)|²` on out-of-sample paths.
//!
//! Paths are simulated forward through a chain of window policies on fresh
//! substreams. The pathwise backward value starts from `Φ(X_T)` and steps
//! `Y_i = Y_{i+1} + g(t_i, X_i, u_i(X_i), Z_i, K_i) Δt − Z_i ΔB_i − Σ_j K_ij ΔÑ_ij`;
//! the residual compares it with the regression field at interior nodes.

use serde::{Deserialize, Serialize};

use super::{with_point, AuditError};
use crate::mark_space::MarkSpace;
use crate::model::CoefficientSet;
use crate::pathsim::{euler_forward, sample_window_drivers, DriverBundle, PathBundle};
use crate::solver::{PolicyFunction, ZetaSampler};
use crate::stats::{mean_stderr, MeanStderr};

/// Substream offset separating out-of-sample drivers from training drivers.
pub const FLOW_WINDOW_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub zeta: ZetaSampler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowResult {
    pub residual: MeanStderr,
    pub interior_nodes: usize,
    pub windows: usize,
}

/// Residual over the interior nodes of the chained grid for a chain of
/// consecutive window policies.
pub fn flow_residual(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    windows: &[PolicyFunction],
    cfg: &FlowConfig,
) -> Result<FlowResult, AuditError> {
    if windows.is_empty() {
        return Err(AuditError::Config("empty policy chain".into()));
    }
    for w in windows.windows(2) {
        if (w[0].grid.end() - w[1].grid.t0).abs() > 1e-9 * (1.0 + w[1].grid.t0.abs()) {
            return Err(AuditError::Config(
                "policy windows are not consecutive".into(),
            ));
        }
    }
    let m = cfg.n_paths;
    let d = cs.d();
    let mut zeta = cfg.zeta.draw(m, cfg.seed, FLOW_WINDOW_BASE);
    let mut sims: Vec<(PathBundle, DriverBundle)> = Vec::with_capacity(windows.len());
    for (w, pol) in windows.iter().enumerate() {
        let drivers =
            sample_window_drivers(&pol.grid, ms, d, m, cfg.seed, FLOW_WINDOW_BASE + w as u64);
        let bundle = euler_forward(cs, ms, pol, &zeta, &drivers)?;
        zeta = bundle.terminal_states();
        sims.push((bundle, drivers));
    }
    let last = &sims[sims.len() - 1].0;
    let mut y: Vec<f64> = (0..m)
        .map(|p| cs.terminal(last.x(p, last.n_steps())))
        .collect();
    let mut acc = vec![0.0; m];
    let mut nodes = 0usize;
    let comp: Vec<Vec<f64>> = sims.iter().map(|s| s.1.compensator().to_vec()).collect();
    for (w, (bundle, drivers)) in sims.iter().enumerate().rev() {
        let dt = bundle.grid.dt();
        for i in (0..bundle.n_steps()).rev() {
            for (p, yp) in y.iter_mut().enumerate() {
                let g = with_point(bundle, ms, p, i, |pt| cs.f_value(&pt));
                let mart: f64 = bundle
                    .z(p, i)
                    .iter()
                    .zip(drivers.db(p, i))
                    .map(|(z, b)| z * b)
                    .sum::<f64>()
                    + bundle
                        .k(p, i)
                        .iter()
                        .enumerate()
                        .map(|(a, k)| k * (drivers.dn(p, i, a) - comp[w][a]))
                        .sum::<f64>();
                *yp += g * dt - mart;
            }
            // the global initial node is not interior
            if w > 0 || i > 0 {
                for (p, yp) in y.iter().enumerate() {
                    acc[p] += (yp - bundle.y(p, i)).powi(2);
                }
                nodes += 1;
            }
        }
    }
    let per_path: Vec<f64> = acc.iter().map(|a| a / nodes.max(1) as f64).collect();
    Ok(FlowResult {
        residual: mean_stderr(&per_path),
        interior_nodes: nodes,
        windows: windows.len(),
    })
}
