//! Time grid, driver sampling, forward Euler simulation of the controlled
//! jump-diffusion and discrete stochastic integrals.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mark_space::{sample_jumps_in, JumpSchedule, MarkSpace};
use crate::model::{CoefficientSet, Point};
use crate::rng::{StreamKey, Substream};

/// States beyond this magnitude abort a simulation.
pub const EXPLOSION_BOUND: f64 = 1e9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid grid: delta = {delta}, n_steps = {n_steps}")]
    BadGrid { delta: f64, n_steps: usize },
    #[error("state exploded or became non-finite at path {path}, step {step} (|x| = {value})")]
    Explosion {
        path: usize,
        step: usize,
        value: f64,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Uniform grid on `[t0, t0 + delta]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub delta: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, delta: f64, n_steps: usize) -> Result<Self, SimError> {
        if !(delta > 0.0) || !delta.is_finite() || n_steps == 0 || !t0.is_finite() {
            return Err(SimError::BadGrid { delta, n_steps });
        }
        Ok(TimeGrid { t0, delta, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.delta / self.n_steps as f64
    }

    pub fn time(&self, step: usize) -> f64 {
        self.t0 + self.delta * step as f64 / self.n_steps as f64
    }

    pub fn end(&self) -> f64 {
        self.t0 + self.delta
    }
}

/// Brownian increments and jump counts for a set of paths.
#[derive(Clone, Debug)]
pub struct DriverBundle {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub d: usize,
    pub seed: u64,
    pub window: u64,
    db: Vec<f64>,
    pub jumps: JumpSchedule,
    compensator: Vec<f64>,
}

impl DriverBundle {
    pub fn db(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.grid.n_steps + step) * self.d;
        &self.db[o..o + self.d]
    }

    pub fn dn(&self, path: usize, step: usize, atom: usize) -> f64 {
        f64::from(self.jumps.count(path, step, atom))
    }

    /// `w_j Δt` for each atom.
    pub fn compensator(&self) -> &[f64] {
        &self.compensator
    }

    /// Compensated count `ΔN − w_j Δt`.
    pub fn dn_tilde(&self, path: usize, step: usize, atom: usize) -> f64 {
        self.dn(path, step, atom) - self.compensator[atom]
    }

    pub fn n_atoms(&self) -> usize {
        self.jumps.n_atoms
    }

    pub fn brownian_increments(&self) -> &[f64] {
        &self.db
    }
}

/// Sample drivers for window 0.
pub fn sample_drivers(
    grid: &TimeGrid,
    ms: &MarkSpace,
    d: usize,
    n_paths: usize,
    seed: u64,
) -> DriverBundle {
    sample_window_drivers(grid, ms, d, n_paths, seed, 0)
}

/// Sample drivers on the substreams of `window`; Brownian and jump streams
/// are keyed disjointly.
pub fn sample_window_drivers(
    grid: &TimeGrid,
    ms: &MarkSpace,
    d: usize,
    n_paths: usize,
    seed: u64,
    window: u64,
) -> DriverBundle {
    let key = StreamKey::new(seed, Substream::BROWNIAN.indexed(window));
    let n_steps = grid.n_steps;
    let sqdt = grid.dt().sqrt();
    let mut db = vec![0.0; n_paths * n_steps * d];
    if d > 0 {
        db.par_chunks_mut(n_steps * d)
            .enumerate()
            .for_each(|(p, out)| {
                let mut s = key.path(p as u64);
                for v in out.iter_mut() {
                    *v = sqdt * s.normal();
                }
            });
    }
    let jumps = sample_jumps_in(ms, grid, n_paths, seed, Substream::JUMPS.indexed(window));
    let compensator = ms.weights().map(|w| w * grid.dt()).collect();
    DriverBundle {
        grid: *grid,
        n_paths,
        d,
        seed,
        window,
        db,
        jumps,
        compensator,
    }
}

/// Feedback law `x ↦ (y, z, k)` at a grid step.
pub trait Feedback: Sync {
    /// Returns `y` and writes `z` (length d) and `k` (one entry per atom).
    fn feedback(&self, step: usize, x: &[f64], z: &mut [f64], k: &mut [f64]) -> f64;
}

/// `(y, z, k) ≡ 0`.
pub struct ZeroFeedback;

impl Feedback for ZeroFeedback {
    fn feedback(&self, _step: usize, _x: &[f64], z: &mut [f64], k: &mut [f64]) -> f64 {
        z.iter_mut().for_each(|v| *v = 0.0);
        k.iter_mut().for_each(|v| *v = 0.0);
        0.0
    }
}

/// Simulated states `X` and the feedback values `Y, Z, K` along each path.
#[derive(Clone, Debug)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub n: usize,
    pub d: usize,
    pub n_atoms: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    k: Vec<f64>,
}

impl PathBundle {
    pub fn zeros(grid: TimeGrid, n_paths: usize, n: usize, d: usize, n_atoms: usize) -> Self {
        let nodes = grid.n_steps + 1;
        PathBundle {
            grid,
            n_paths,
            n,
            d,
            n_atoms,
            x: vec![0.0; n_paths * nodes * n],
            y: vec![0.0; n_paths * nodes],
            z: vec![0.0; n_paths * grid.n_steps * d],
            k: vec![0.0; n_paths * grid.n_steps * n_atoms],
        }
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    pub fn x(&self, path: usize, node: usize) -> &[f64] {
        let o = (path * (self.grid.n_steps + 1) + node) * self.n;
        &self.x[o..o + self.n]
    }

    pub fn zeta(&self, path: usize) -> &[f64] {
        self.x(path, 0)
    }

    pub fn y(&self, path: usize, node: usize) -> f64 {
        self.y[path * (self.grid.n_steps + 1) + node]
    }

    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.grid.n_steps + step) * self.d;
        &self.z[o..o + self.d]
    }

    pub fn k(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.grid.n_steps + step) * self.n_atoms;
        &self.k[o..o + self.n_atoms]
    }

    pub fn set_k(&mut self, path: usize, step: usize, values: &[f64]) {
        let o = (path * self.grid.n_steps + step) * self.n_atoms;
        self.k[o..o + self.n_atoms].copy_from_slice(values);
    }

    pub fn set_y(&mut self, path: usize, node: usize, value: f64) {
        self.y[path * (self.grid.n_steps + 1) + node] = value;
    }

    pub fn set_z(&mut self, path: usize, step: usize, values: &[f64]) {
        let o = (path * self.grid.n_steps + step) * self.d;
        self.z[o..o + self.d].copy_from_slice(values);
    }

    pub fn set_x(&mut self, path: usize, node: usize, values: &[f64]) {
        let o = (path * (self.grid.n_steps + 1) + node) * self.n;
        self.x[o..o + self.n].copy_from_slice(values);
    }

    /// Terminal states `X_N` of every path, path-major.
    pub fn terminal_states(&self) -> Vec<Vec<f64>> {
        (0..self.n_paths)
            .map(|p| self.x(p, self.grid.n_steps).to_vec())
            .collect()
    }

    /// One row per (path, node): `path, step, t, x1.., y, z1.., k1..`. Z and K
    /// are left blank on the terminal node. At most `max_paths` paths.
    pub fn write_csv<W: Write>(&self, out: W, max_paths: usize) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string(), "step".to_string(), "t".to_string()];
        header.extend((1..=self.n).map(|i| format!("x{i}")));
        header.push("y".into());
        header.extend((1..=self.d).map(|i| format!("z{i}")));
        header.extend((1..=self.n_atoms).map(|i| format!("k{i}")));
        w.write_record(&header)?;
        let n_steps = self.grid.n_steps;
        for p in 0..self.n_paths.min(max_paths) {
            for i in 0..=n_steps {
                let mut rec = vec![p.to_string(), i.to_string(), self.grid.time(i).to_string()];
                rec.extend(self.x(p, i).iter().map(|v| v.to_string()));
                rec.push(self.y(p, i).to_string());
                if i < n_steps {
                    rec.extend(self.z(p, i).iter().map(|v| v.to_string()));
                    rec.extend(self.k(p, i).iter().map(|v| v.to_string()));
                } else {
                    rec.extend(std::iter::repeat_n(String::new(), self.d + self.n_atoms));
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Forward Euler under a feedback law:
///
/// `X_{i+1} = X_i + b Δt + σ ΔB_i + Σ_j h_j (ΔN_ij − w_j Δt)`
///
/// with every coefficient evaluated at the start-of-step state and
/// `(y_i, z_i, k_i) = policy(i, X_i)`. `Y_N` is set to `Φ(X_N)`.
pub fn euler_forward<F: Feedback + ?Sized>(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    policy: &F,
    zeta: &[Vec<f64>],
    drivers: &DriverBundle,
) -> Result<PathBundle, SimError> {
    let n = cs.n();
    let d = cs.d();
    let j = ms.len();
    let grid = drivers.grid;
    let n_paths = drivers.n_paths;
    if zeta.len() != n_paths {
        return Err(SimError::Shape(format!(
            "{} initial states for {} driver paths",
            zeta.len(),
            n_paths
        )));
    }
    if drivers.d != d || drivers.n_atoms() != j {
        return Err(SimError::Shape(format!(
            "drivers have d = {}, J = {}; model expects d = {d}, J = {j}",
            drivers.d,
            drivers.n_atoms()
        )));
    }
    if let Some(z) = zeta.iter().find(|z| z.len() != n) {
        return Err(SimError::Shape(format!(
            "initial state of length {} for n = {n}",
            z.len()
        )));
    }
    let mut bundle = PathBundle::zeros(grid, n_paths, n, d, j);
    let n_steps = grid.n_steps;
    let nodes = n_steps + 1;
    let dt = grid.dt();
    let marks: Vec<f64> = ms.marks().collect();
    let comp = drivers.compensator();

    let PathBundle { x, y, z, k, .. } = &mut bundle;
    let results: Vec<Result<(), SimError>> = x
        .par_chunks_mut(nodes * n)
        .zip(y.par_chunks_mut(nodes))
        .zip(z.par_chunks_mut((n_steps * d).max(1)))
        .zip(k.par_chunks_mut((n_steps * j).max(1)))
        .enumerate()
        .map(|(p, (((xs, ys), zs), ks))| {
            let mut state = zeta[p].clone();
            let mut next = vec![0.0; n];
            let mut drift = vec![0.0; n];
            let mut diff = vec![0.0; n * d];
            let mut jump = vec![0.0; n];
            let mut zv = vec![0.0; d];
            let mut kv = vec![0.0; j];
            xs[..n].copy_from_slice(&state);
            for i in 0..n_steps {
                let t = grid.time(i);
                let yv = policy.feedback(i, &state, &mut zv, &mut kv);
                ys[i] = yv;
                if d > 0 {
                    zs[i * d..(i + 1) * d].copy_from_slice(&zv);
                }
                if j > 0 {
                    ks[i * j..(i + 1) * j].copy_from_slice(&kv);
                }
                let q = ms.reduce_k(&kv);
                let pt = Point {
                    t,
                    x: &state,
                    y: yv,
                    z: &zv,
                    k: &kv,
                    q,
                };
                cs.drift(&pt, &mut drift);
                cs.diffusion(&pt, &mut diff);
                next.copy_from_slice(&state);
                for r in 0..n {
                    next[r] += drift[r] * dt;
                }
                let db = drivers.db(p, i);
                for r in 0..n {
                    let row = &diff[r * d..(r + 1) * d];
                    next[r] += row.iter().zip(db).map(|(s, b)| s * b).sum::<f64>();
                }
                for a in 0..j {
                    let dnt = drivers.dn(p, i, a) - comp[a];
                    if dnt == 0.0 {
                        continue;
                    }
                    cs.jump(&pt, a, marks[a], &mut jump);
                    for r in 0..n {
                        next[r] += jump[r] * dnt;
                    }
                }
                let mag = next.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !mag.is_finite() || mag > EXPLOSION_BOUND {
                    return Err(SimError::Explosion {
                        path: p,
                        step: i + 1,
                        value: mag,
                    });
                }
                std::mem::swap(&mut state, &mut next);
                xs[(i + 1) * n..(i + 2) * n].copy_from_slice(&state);
            }
            ys[n_steps] = cs.terminal(&state);
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }
    Ok(bundle)
}

/// Integrator of a discrete stochastic integral.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrator {
    /// `Σ φ_i ΔB_i[c]`
    Brownian(usize),
    /// `Σ_j φ_ij (ΔN_ij − w_j Δt)`, over one atom or all atoms.
    Compensated(Option<usize>),
    /// `Σ_j φ_ij ΔN_ij`
    Raw(Option<usize>),
    /// `Σ φ_i Δt`
    Time,
}

/// Integrand values at start-of-step states: `width` is 1 or the number of
/// atoms.
#[derive(Clone, Debug)]
pub struct Integrand {
    pub n_paths: usize,
    pub n_steps: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Integrand {
    pub fn constant(n_paths: usize, n_steps: usize, c: f64) -> Self {
        Integrand {
            n_paths,
            n_steps,
            width: 1,
            values: vec![c; n_paths * n_steps],
        }
    }

    /// `φ(step, X_step)` along a bundle.
    pub fn from_states<F: Fn(usize, &[f64]) -> f64>(bundle: &PathBundle, f: F) -> Self {
        let n_steps = bundle.n_steps();
        let mut values = Vec::with_capacity(bundle.n_paths * n_steps);
        for p in 0..bundle.n_paths {
            for i in 0..n_steps {
                values.push(f(i, bundle.x(p, i)));
            }
        }
        Integrand {
            n_paths: bundle.n_paths,
            n_steps,
            width: 1,
            values,
        }
    }

    fn at(&self, path: usize, step: usize, atom: usize) -> f64 {
        let col = if self.width == 1 { 0 } else { atom };
        self.values[(path * self.n_steps + step) * self.width + col]
    }
}

/// Per-path Riemann–Itô sums.
pub fn ito_integral(
    integrand: &Integrand,
    drivers: &DriverBundle,
    integrator: Integrator,
) -> Result<Vec<f64>, SimError> {
    let n_steps = drivers.grid.n_steps;
    let j = drivers.n_atoms();
    if integrand.n_paths != drivers.n_paths || integrand.n_steps != n_steps {
        return Err(SimError::Shape(format!(
            "integrand is {}x{}, drivers are {}x{}",
            integrand.n_paths, integrand.n_steps, drivers.n_paths, n_steps
        )));
    }
    if integrand.width != 1 && integrand.width != j {
        return Err(SimError::Shape(format!(
            "integrand width {} is neither 1 nor the atom count {j}",
            integrand.width
        )));
    }
    if integrand.values.len() != integrand.n_paths * n_steps * integrand.width {
        return Err(SimError::Shape("integrand storage length".into()));
    }
    let atoms = |sel: Option<usize>| -> Result<std::ops::Range<usize>, SimError> {
        match sel {
            None => Ok(0..j),
            Some(a) if a < j => Ok(a..a + 1),
            Some(a) => Err(SimError::Shape(format!(
                "atom {a} out of range ({j} atoms)"
            ))),
        }
    };
    let dt = drivers.grid.dt();
    let comp = drivers.compensator();
    match integrator {
        Integrator::Brownian(c) if c >= drivers.d => {
            return Err(SimError::Shape(format!(
                "Brownian component {c} out of range (d = {})",
                drivers.d
            )))
        }
        _ => {}
    }
    let range = match integrator {
        Integrator::Compensated(s) | Integrator::Raw(s) => atoms(s)?,
        _ => 0..0,
    };
    Ok((0..drivers.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            for i in 0..n_steps {
                acc += match integrator {
                    Integrator::Brownian(c) => integrand.at(p, i, 0) * drivers.db(p, i)[c],
                    Integrator::Time => integrand.at(p, i, 0) * dt,
                    Integrator::Compensated(_) => range
                        .clone()
                        .map(|a| integrand.at(p, i, a) * (drivers.dn(p, i, a) - comp[a]))
                        .sum(),
                    Integrator::Raw(_) => range
                        .clone()
                        .map(|a| integrand.at(p, i, a) * drivers.dn(p, i, a))
                        .sum(),
                };
            }
            acc
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mark_space::build_finite;
    use crate::model::builtin;

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(0.0, 0.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        let g = TimeGrid::new(1.0, 0.5, 4).unwrap();
        assert_eq!(g.dt(), 0.125);
        assert_eq!(g.time(4), 1.5);
    }

    #[test]
    fn drivers_deterministic_per_seed() {
        let ms = build_finite(&[(0.5, 2.0)]).unwrap();
        let g = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let a = sample_drivers(&g, &ms, 2, 1, 42);
        let b = sample_drivers(&g, &ms, 2, 1, 42);
        assert_eq!(a.brownian_increments(), b.brownian_increments());
        assert_eq!(a.jumps.counts(), b.jumps.counts());
        let c = sample_drivers(&g, &ms, 2, 1, 43);
        assert_ne!(a.brownian_increments(), c.brownian_increments());
        // a larger bundle extends rather than reshuffles the paths
        let big = sample_drivers(&g, &ms, 2, 5, 42);
        assert_eq!(big.db(0, 3), a.db(0, 3));
    }

    #[test]
    fn zero_coefficients_keep_state() {
        let m = builtin("T0").unwrap();
        let g = TimeGrid::new(0.0, 0.5, 8).unwrap();
        let dr = sample_drivers(&g, &m.marks, 1, 50, 1);
        let zeta = vec![vec![1.5]; 50];
        let b = euler_forward(&m.coeffs, &m.marks, &ZeroFeedback, &zeta, &dr).unwrap();
        for p in 0..50 {
            for i in 0..=8 {
                assert_eq!(b.x(p, i), &[1.5]);
            }
            assert_eq!(b.y(p, 8), 1.5);
        }
    }

    #[test]
    fn constant_coefficients_are_exact() {
        let m = crate::model::ModelFile::from_json_str(
            r#"{"n":1,"d":1,"b":["0.3"],"sigma":[["2"]],"h":["-0.5"],"f":"0","phi":"x",
                "marks":{"atoms":[{"e":0.5,"w":2.0}]}}"#,
        )
        .unwrap()
        .build()
        .unwrap();
        let g = TimeGrid::new(0.0, 0.4, 16).unwrap();
        let dr = sample_drivers(&g, &m.marks, 1, 20, 3);
        let zeta = vec![vec![0.25]; 20];
        let b = euler_forward(&m.coeffs, &m.marks, &ZeroFeedback, &zeta, &dr).unwrap();
        for p in 0..20 {
            let sum_db: f64 = (0..16).map(|i| dr.db(p, i)[0]).sum();
            let n_tot = f64::from(dr.jumps.total(p, 0));
            let expect = 0.25 + 0.3 * 0.4 + 2.0 * sum_db - 0.5 * (n_tot - 2.0 * 0.4);
            assert!((b.x(p, 16)[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn explosion_is_reported() {
        let m = crate::model::ModelFile::from_json_str(
            r#"{"n":1,"d":1,"b":["1e12*x"],"sigma":[["0"]],"h":["0"],"f":"0","phi":"x",
                "marks":{"atoms":[{"e":0.5,"w":2.0}]}}"#,
        )
        .unwrap()
        .build()
        .unwrap();
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let dr = sample_drivers(&g, &m.marks, 1, 3, 3);
        let err = euler_forward(&m.coeffs, &m.marks, &ZeroFeedback, &vec![vec![1.0]; 3], &dr)
            .unwrap_err();
        assert!(
            matches!(
                err,
                SimError::Explosion {
                    path: 0,
                    step: 1,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn integral_identities() {
        let ms = build_finite(&[(0.5, 2.0)]).unwrap();
        let g = TimeGrid::new(0.0, 0.3, 12).unwrap();
        let dr = sample_drivers(&g, &ms, 1, 10, 8);
        let one = Integrand::constant(10, 12, 1.0);
        let comp = ito_integral(&one, &dr, Integrator::Compensated(Some(0))).unwrap();
        for (p, v) in comp.iter().enumerate() {
            let expect = f64::from(dr.jumps.total(p, 0)) - 2.0 * 0.3;
            assert!((v - expect).abs() < 1e-12);
        }
        let c = Integrand::constant(10, 12, 2.5);
        for v in ito_integral(&c, &dr, Integrator::Time).unwrap() {
            assert!((v - 0.75).abs() < 1e-14);
        }
        let bad = Integrand::constant(9, 12, 1.0);
        assert!(ito_integral(&bad, &dr, Integrator::Time).is_err());
        assert!(ito_integral(&one, &dr, Integrator::Brownian(3)).is_err());
        assert!(ito_integral(&one, &dr, Integrator::Raw(Some(2))).is_err());
    }

    #[test]
    fn csv_export_layout() {
        let m = builtin("T2").unwrap();
        let g = TimeGrid::new(0.0, 0.1, 2).unwrap();
        let dr = sample_drivers(&g, &m.marks, 1, 2, 1);
        let b =
            euler_forward(&m.coeffs, &m.marks, &ZeroFeedback, &vec![vec![0.0]; 2], &dr).unwrap();
        let mut out = Vec::new();
        b.write_csv(&mut out, 10).unwrap();
        let s = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "path,step,t,x1,y,z1,k1");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[3].ends_with(",,"));
    }
}
