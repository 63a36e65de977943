//! Discretized moment functionals of a solved bundle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AuditError;
use crate::mark_space::MarkSpace;
use crate::pathsim::{PathBundle, TimeGrid};
use crate::stats::mean_stderr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    /// `sup_i |X_i|^p`
    SupX,
    /// `sup_i |Y_i|^p`
    SupY,
    /// `(Σ_i |Z_i|² Δt)^{p/2}`
    IntZ,
    /// `(Σ_i Σ_j K_ij² w_j Δt)^{p/2}`
    IntK,
    /// `sup_i |X_i − ζ|^p`
    SupIncX,
}

impl Functional {
    pub const ALL: [Functional; 5] = [
        Functional::SupX,
        Functional::SupY,
        Functional::IntZ,
        Functional::IntK,
        Functional::SupIncX,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Functional::SupX => "sup_x",
            Functional::SupY => "sup_y",
            Functional::IntZ => "int_z",
            Functional::IntK => "int_k",
            Functional::SupIncX => "sup_inc_x",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Functional::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub functional: Functional,
    pub p: f64,
    pub value: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub grid: TimeGrid,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Per-path values of one functional.
pub fn functional_values(
    bundle: &PathBundle,
    ms: &MarkSpace,
    p: f64,
    which: Functional,
) -> Result<Vec<f64>, AuditError> {
    if !(p >= 2.0) {
        return Err(AuditError::InvalidP(p));
    }
    let nn = bundle.n_steps();
    let dt = bundle.grid.dt();
    let weights: Vec<f64> = ms.weights().collect();
    Ok((0..bundle.n_paths)
        .into_par_iter()
        .map(|path| match which {
            Functional::SupX => (0..=nn)
                .map(|i| norm(bundle.x(path, i)).powf(p))
                .fold(0.0, f64::max),
            Functional::SupY => (0..=nn)
                .map(|i| bundle.y(path, i).abs().powf(p))
                .fold(0.0, f64::max),
            Functional::SupIncX => {
                let z0 = bundle.zeta(path);
                (0..=nn)
                    .map(|i| {
                        let x = bundle.x(path, i);
                        x.iter()
                            .zip(z0)
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>()
                            .sqrt()
                            .powf(p)
                    })
                    .fold(0.0, f64::max)
            }
            Functional::IntZ => {
                let s: f64 = (0..nn)
                    .map(|i| bundle.z(path, i).iter().map(|v| v * v).sum::<f64>() * dt)
                    .sum();
                s.powf(p / 2.0)
            }
            Functional::IntK => {
                let s: f64 = (0..nn)
                    .map(|i| {
                        bundle
                            .k(path, i)
                            .iter()
                            .zip(&weights)
                            .map(|(k, w)| k * k * w)
                            .sum::<f64>()
                            * dt
                    })
                    .sum();
                s.powf(p / 2.0)
            }
        })
        .collect())
}

/// Mean ± stderr of each requested functional.
pub fn estimate_moments(
    bundle: &PathBundle,
    ms: &MarkSpace,
    p: f64,
    which: &[Functional],
) -> Result<Vec<MomentEstimate>, AuditError> {
    which
        .iter()
        .map(|&f| {
            let v = functional_values(bundle, ms, p, f)?;
            let m = mean_stderr(&v);
            Ok(MomentEstimate {
                functional: f,
                p,
                value: m.mean,
                stderr: m.stderr,
                n_paths: bundle.n_paths,
                grid: bundle.grid,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;
    use crate::solver::{picard_solve, SolverConfig, ZetaSampler};

    #[test]
    fn zero_model_moments_are_exact() {
        let m = builtin("T0").unwrap();
        let c = SolverConfig::new(0.5, 10, 500, ZetaSampler::Point(vec![1.5]), 3);
        let sol = picard_solve(&m.coeffs, &m.marks, &c).unwrap();
        for p in [2.0, 4.0] {
            let est = estimate_moments(&sol.bundle, &m.marks, p, &Functional::ALL).unwrap();
            for e in est {
                let expect = match e.functional {
                    Functional::SupX | Functional::SupY => 1.5f64.powf(p),
                    _ => 0.0,
                };
                assert_eq!(e.value, expect, "{:?}", e.functional);
                assert_eq!(e.stderr, 0.0);
            }
        }
    }

    #[test]
    fn rejects_small_p() {
        let m = builtin("T0").unwrap();
        let c = SolverConfig::new(0.5, 4, 10, ZetaSampler::Point(vec![1.5]), 3);
        let sol = picard_solve(&m.coeffs, &m.marks, &c).unwrap();
        assert!(matches!(
            estimate_moments(&sol.bundle, &m.marks, 1.5, &[Functional::SupX]),
            Err(AuditError::InvalidP(_))
        ));
    }

    #[test]
    fn names_round_trip() {
        for f in Functional::ALL {
            assert_eq!(Functional::parse(f.name()), Some(f));
        }
    }
}
