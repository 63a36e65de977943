//! Statistical checks of the sampled drivers: Brownian moments, Poisson
//! mean and dispersion, independence, and the Itô isometries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AuditError, AuditThresholds};
use crate::mark_space::MarkSpace;
use crate::pathsim::{ito_integral, sample_drivers, DriverBundle, Integrand, Integrator, TimeGrid};
use crate::stats::mean_stderr;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatCheck {
    pub name: String,
    pub observed: f64,
    pub expected: f64,
    pub stderr: f64,
    pub z: f64,
    pub pass: bool,
}

fn check(
    name: impl Into<String>,
    per_path: &[f64],
    expected: f64,
    th: &AuditThresholds,
) -> StatCheck {
    let m = mean_stderr(per_path);
    let z = m.z_score(expected);
    StatCheck {
        name: name.into(),
        observed: m.mean,
        expected,
        stderr: m.stderr,
        z,
        pass: z.abs() <= th.stderr_multiple,
    }
}

fn per_path<F: Fn(usize) -> f64 + Sync + Send>(n: usize, f: F) -> Vec<f64> {
    (0..n).into_par_iter().map(f).collect()
}

/// Running value of a process before each step, as an integrand.
fn running(dr: &DriverBundle, inc: impl Fn(usize, usize) -> f64 + Sync + Send) -> Integrand {
    let nn = dr.grid.n_steps;
    let values: Vec<f64> = (0..dr.n_paths)
        .into_par_iter()
        .flat_map_iter(|p| {
            let mut acc = 0.0;
            (0..nn)
                .map(|i| {
                    let v = acc;
                    acc += inc(p, i);
                    v
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Integrand {
        n_paths: dr.n_paths,
        n_steps: nn,
        width: 1,
        values,
    }
}

/// Run all checks on freshly sampled drivers. Statistics are per-path
/// averages over cells, so standard errors come from independent paths.
pub fn driver_statistics(
    grid: &TimeGrid,
    ms: &MarkSpace,
    d: usize,
    n_paths: usize,
    seed: u64,
    th: &AuditThresholds,
) -> Result<Vec<StatCheck>, AuditError> {
    let dr = sample_drivers(grid, ms, d, n_paths, seed);
    let nn = grid.n_steps;
    let dt = grid.dt();
    let sq = dt.sqrt();
    let nf = nn as f64;
    let mut out = Vec::new();
    for c in 0..d {
        let b = |p: usize, i: usize| dr.db(p, i)[c] / sq;
        out.push(check(
            format!("brownian[{c}] mean"),
            &per_path(n_paths, |p| (0..nn).map(|i| b(p, i)).sum::<f64>() / nf),
            0.0,
            th,
        ));
        out.push(check(
            format!("brownian[{c}] variance / dt"),
            &per_path(n_paths, |p| {
                (0..nn).map(|i| b(p, i).powi(2)).sum::<f64>() / nf
            }),
            1.0,
            th,
        ));
        out.push(check(
            format!("brownian[{c}] fourth moment / dt^2"),
            &per_path(n_paths, |p| {
                (0..nn).map(|i| b(p, i).powi(4)).sum::<f64>() / nf
            }),
            3.0,
            th,
        ));
        if nn > 1 {
            out.push(check(
                format!("brownian[{c}] lag-1 correlation"),
                &per_path(n_paths, |p| {
                    (0..nn - 1).map(|i| b(p, i) * b(p, i + 1)).sum::<f64>() / (nf - 1.0)
                }),
                0.0,
                th,
            ));
        }
        for c2 in c + 1..d {
            out.push(check(
                format!("brownian[{c}] x brownian[{c2}]"),
                &per_path(n_paths, |p| {
                    (0..nn).map(|i| b(p, i) * dr.db(p, i)[c2] / sq).sum::<f64>() / nf
                }),
                0.0,
                th,
            ));
        }
        let integrand = running(&dr, |p, i| dr.db(p, i)[c]);
        let isometry = ito_integral(&integrand, &dr, Integrator::Brownian(c))?;
        let quad = per_path(n_paths, |p| {
            (0..nn)
                .map(|i| integrand.values[p * nn + i].powi(2) * dt)
                .sum()
        });
        let diff: Vec<f64> = isometry.iter().zip(&quad).map(|(i, q)| i * i - q).collect();
        out.push(check(format!("ito isometry brownian[{c}]"), &diff, 0.0, th));
    }
    let comp = dr.compensator().to_vec();
    for (a, lam) in comp.iter().enumerate() {
        let lam = *lam;
        out.push(check(
            format!("poisson[{a}] mean / (w dt)"),
            &per_path(n_paths, |p| {
                (0..nn).map(|i| dr.dn(p, i, a)).sum::<f64>() / (nf * lam)
            }),
            1.0,
            th,
        ));
        out.push(check(
            format!("poisson[{a}] dispersion (var - mean) / (w dt)"),
            &per_path(n_paths, |p| {
                (0..nn)
                    .map(|i| (dr.dn(p, i, a) - lam).powi(2) - dr.dn(p, i, a))
                    .sum::<f64>()
                    / (nf * lam)
            }),
            0.0,
            th,
        ));
        if d > 0 {
            out.push(check(
                format!("brownian[0] x poisson[{a}]"),
                &per_path(n_paths, |p| {
                    (0..nn)
                        .map(|i| dr.db(p, i)[0] / sq * (dr.dn(p, i, a) - lam) / lam.sqrt())
                        .sum::<f64>()
                        / nf
                }),
                0.0,
                th,
            ));
        }
        let integrand = running(&dr, |p, i| dr.dn(p, i, a) - lam);
        let iso = ito_integral(&integrand, &dr, Integrator::Compensated(Some(a)))?;
        let quad = per_path(n_paths, |p| {
            (0..nn)
                .map(|i| integrand.values[p * nn + i].powi(2) * lam)
                .sum()
        });
        let diff: Vec<f64> = iso.iter().zip(&quad).map(|(i, q)| i * i - q).collect();
        out.push(check(
            format!("ito isometry compensated poisson[{a}]"),
            &diff,
            0.0,
            th,
        ));
    }
    for a in 0..comp.len() {
        for b in a + 1..comp.len() {
            let (la, lb) = (comp[a], comp[b]);
            out.push(check(
                format!("poisson[{a}] x poisson[{b}]"),
                &per_path(n_paths, |p| {
                    (0..nn)
                        .map(|i| (dr.dn(p, i, a) - la) * (dr.dn(p, i, b) - lb) / (la * lb).sqrt())
                        .sum::<f64>()
                        / nf
                }),
                0.0,
                th,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mark_space::build_finite;

    #[test]
    fn checks_pass_on_a_moderate_sample() {
        let ms = build_finite(&[(0.5, 2.0), (-1.0, 0.7)]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let checks =
            driver_statistics(&grid, &ms, 2, 20_000, 17, &AuditThresholds::default()).unwrap();
        assert!(checks.len() >= 14);
        for c in &checks {
            assert!(c.pass, "{c:?}");
        }
    }
}
