//! Jump-moment inequality
//! `E[(∫∫|K|² λ(de) ds)^{p/2}] ≤ (p/2)^{p/2} E[(∫∫|K|² μ(ds de))^{p/2}]`,
//! with both sides estimated on the same paths: the `λ`-side from compensator
//! sums, the `μ`-side from raw jump counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AuditError, AuditThresholds};
use crate::mark_space::MarkSpace;
use crate::pathsim::{sample_drivers, DriverBundle, PathBundle, TimeGrid};
use crate::stats::{mean_stderr, studentize, MeanStderr};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaResult {
    pub p: f64,
    pub lhs: MeanStderr,
    pub rhs: MeanStderr,
    /// `(RHS − LHS) / stderr` of the paired per-path differences.
    pub studentized_margin: f64,
    /// `sqrt((se_L/L)² + (se_R/R)²)`.
    pub combined_stderr_ratio: f64,
    pub pass: bool,
}

fn sides<K>(k: K, drivers: &DriverBundle, weights: &[f64], p: f64) -> (Vec<f64>, Vec<f64>)
where
    K: Fn(usize, usize, usize) -> f64 + Sync,
{
    let nn = drivers.grid.n_steps;
    let j = weights.len();
    let dt = drivers.grid.dt();
    let c = (p / 2.0).powf(p / 2.0);
    (0..drivers.n_paths)
        .into_par_iter()
        .map(|path| {
            let (mut l, mut r) = (0.0, 0.0);
            for i in 0..nn {
                for a in 0..j {
                    let kk = k(path, i, a).powi(2);
                    l += kk * weights[a] * dt;
                    r += kk * drivers.dn(path, i, a);
                }
            }
            (l.powf(p / 2.0), c * r.powf(p / 2.0))
        })
        .unzip()
}

fn verdict(p: f64, l: Vec<f64>, r: Vec<f64>, th: &AuditThresholds) -> LemmaResult {
    let lhs = mean_stderr(&l);
    let rhs = mean_stderr(&r);
    let diff: Vec<f64> = r.iter().zip(&l).map(|(a, b)| a - b).collect();
    let d = mean_stderr(&diff);
    let rel = |m: &MeanStderr| {
        if m.mean != 0.0 {
            m.stderr / m.mean.abs()
        } else {
            0.0
        }
    };
    let ratio = (rel(&lhs).powi(2) + rel(&rhs).powi(2)).sqrt();
    let pass = lhs.mean <= rhs.mean * (1.0 + th.stderr_multiple * ratio);
    LemmaResult {
        p,
        lhs,
        rhs,
        studentized_margin: studentize(d.mean, d.stderr),
        combined_stderr_ratio: ratio,
        pass,
    }
}

/// Both sides along a solved bundle and the drivers it was simulated from.
pub fn check_jump_moment_lemma(
    bundle: &PathBundle,
    drivers: &DriverBundle,
    ms: &MarkSpace,
    p: f64,
    th: &AuditThresholds,
) -> Result<LemmaResult, AuditError> {
    if !(p >= 2.0) {
        return Err(AuditError::InvalidP(p));
    }
    if bundle.n_paths != drivers.n_paths || bundle.n_steps() != drivers.grid.n_steps {
        return Err(AuditError::Config(
            "bundle and drivers differ in shape".into(),
        ));
    }
    let weights: Vec<f64> = ms.weights().collect();
    let (l, r) = sides(|path, i, a| bundle.k(path, i)[a], drivers, &weights, p);
    Ok(verdict(p, l, r, th))
}

/// The analytic case `K ≡ c` on fresh drivers.
pub fn constant_k_lemma(
    c: f64,
    ms: &MarkSpace,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    p: f64,
    th: &AuditThresholds,
) -> Result<LemmaResult, AuditError> {
    if !(p >= 2.0) {
        return Err(AuditError::InvalidP(p));
    }
    let drivers = sample_drivers(grid, ms, 1, n_paths, seed);
    let weights: Vec<f64> = ms.weights().collect();
    let (l, r) = sides(|_, _, _| c, &drivers, &weights, p);
    Ok(verdict(p, l, r, th))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mark_space::build_finite;

    #[test]
    fn constant_k_matches_poisson_oracle() {
        let ms = build_finite(&[(0.5, 2.0)]).unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 10).unwrap();
        let th = AuditThresholds::default();
        let c = 0.7;
        let lam = 2.0 * 0.5;
        let r2 = constant_k_lemma(c, &ms, &grid, 200_000, 5, 2.0, &th).unwrap();
        // λ-side is deterministic
        assert!((r2.lhs.mean - c * c * lam).abs() < 1e-12);
        assert!(r2.lhs.stderr < 1e-12);
        assert!(r2.studentized_margin.abs() <= 3.0, "{r2:?}");
        assert!(r2.pass);
        let r4 = constant_k_lemma(c, &ms, &grid, 200_000, 5, 4.0, &th).unwrap();
        assert!((r4.lhs.mean - (c * c * lam).powi(2)).abs() < 1e-12);
        let rhs_exact = 4.0 * c.powi(4) * (lam + lam * lam);
        assert!(((r4.rhs.mean - rhs_exact) / r4.rhs.stderr).abs() <= 3.0);
        assert!(r4.rhs.mean > r4.lhs.mean && r4.pass);
    }

    #[test]
    fn rejects_small_p() {
        let ms = build_finite(&[(0.5, 2.0)]).unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 10).unwrap();
        assert!(
            constant_k_lemma(1.0, &ms, &grid, 10, 1, 1.0, &AuditThresholds::default()).is_err()
        );
    }
}
