//! Finite mark spaces: the Lévy measure as weighted atoms, the jump kernels
//! `rho(e) = C (1 ∧ |e|)` and `l(e)`, and exact Poisson sampling of jump counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{cap1, parse_expr, CoefficientExpr, EvalEnv, ParseError, Var};
use crate::pathsim::TimeGrid;
use crate::rng::{StreamKey, Substream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkError {
    #[error("mark space has no atoms")]
    Empty,
    #[error("atom {index}: mark must be nonzero and finite, got {mark}")]
    BadMark { index: usize, mark: f64 },
    #[error("atom {index}: weight must be positive and finite, got {weight}")]
    BadWeight { index: usize, weight: f64 },
    #[error("atoms {first} and {second} share the mark {mark}")]
    DuplicateMark {
        first: usize,
        second: usize,
        mark: f64,
    },
    #[error("cutoff must be positive, got {0}")]
    BadCutoff(f64),
    #[error("support bound {support} must exceed cutoff {cutoff}")]
    BadSupport { support: f64, cutoff: f64 },
    #[error("density is negative ({value}) at e = {at}")]
    NegativeDensity { at: f64, value: f64 },
    #[error("density vanishes on |e| >= cutoff: empty effective support")]
    EmptySupport,
    #[error("integrand is not finite at atom {index} (e = {mark})")]
    NonFinite { index: usize, mark: f64 },
    #[error("rho_scale must be positive, l_scale nonnegative (got {rho_scale}, {l_scale})")]
    BadScale { rho_scale: f64, l_scale: f64 },
    #[error("l kernel: {0}")]
    LKernel(#[from] ParseError),
    #[error("l kernel may only reference `e`, found `{0}`")]
    LKernelVariable(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkAtom {
    pub e: f64,
    #[serde(rename = "w")]
    pub weight: f64,
}

/// Lévy measure discretized as finitely many atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MarkSpaceDoc", into = "MarkSpaceDoc")]
pub struct MarkSpace {
    atoms: Vec<MarkAtom>,
    cutoff: f64,
    rho_scale: f64,
    l_scale: f64,
    l_expr: CoefficientExpr,
    l_values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MarkSpaceDoc {
    atoms: Vec<MarkAtom>,
    #[serde(default)]
    cutoff: f64,
    #[serde(default = "one")]
    rho_scale: f64,
    #[serde(default = "default_l")]
    l: String,
    #[serde(default = "one")]
    l_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn default_l() -> String {
    "cap1(e)".to_string()
}

impl TryFrom<MarkSpaceDoc> for MarkSpace {
    type Error = MarkError;

    fn try_from(doc: MarkSpaceDoc) -> Result<Self, MarkError> {
        let pairs: Vec<(f64, f64)> = doc.atoms.iter().map(|a| (a.e, a.weight)).collect();
        let mut ms = build_finite(&pairs)?;
        ms.cutoff = doc.cutoff;
        ms.with_kernels(doc.rho_scale, &doc.l, doc.l_scale)
    }
}

impl From<MarkSpace> for MarkSpaceDoc {
    fn from(ms: MarkSpace) -> Self {
        MarkSpaceDoc {
            atoms: ms.atoms,
            cutoff: ms.cutoff,
            rho_scale: ms.rho_scale,
            l: ms.l_expr.to_string(),
            l_scale: ms.l_scale,
        }
    }
}

/// Build a mark space from `(mark, weight)` pairs, with `rho_scale = 1` and
/// `l(e) = 1 ∧ |e|`.
pub fn build_finite(atoms: &[(f64, f64)]) -> Result<MarkSpace, MarkError> {
    if atoms.is_empty() {
        return Err(MarkError::Empty);
    }
    for (index, &(e, w)) in atoms.iter().enumerate() {
        if e == 0.0 || !e.is_finite() {
            return Err(MarkError::BadMark { index, mark: e });
        }
        if !(w > 0.0) || !w.is_finite() {
            return Err(MarkError::BadWeight { index, weight: w });
        }
    }
    for i in 0..atoms.len() {
        for j in (i + 1)..atoms.len() {
            if atoms[i].0 == atoms[j].0 {
                return Err(MarkError::DuplicateMark {
                    first: i,
                    second: j,
                    mark: atoms[i].0,
                });
            }
        }
    }
    let mut ms = MarkSpace {
        atoms: atoms
            .iter()
            .map(|&(e, weight)| MarkAtom { e, weight })
            .collect(),
        cutoff: 0.0,
        rho_scale: 1.0,
        l_scale: 1.0,
        l_expr: parse_expr("cap1(e)").expect("builtin kernel"),
        l_values: Vec::new(),
    };
    ms.refresh_l();
    Ok(ms)
}

/// Restrict an intensity density to `cutoff <= |e| <= support` and discretize
/// each side into `n_atoms` equal cells. Each atom sits at its cell midpoint and
/// carries the cell's mass, computed by a composite midpoint rule with
/// `SUBCELLS` nodes. Cells with zero mass are dropped.
pub fn truncate_density<F>(
    density: F,
    cutoff: f64,
    support: f64,
    n_atoms: usize,
) -> Result<MarkSpace, MarkError>
where
    F: Fn(f64) -> f64,
{
    const SUBCELLS: usize = 64;
    if !(cutoff > 0.0) || !cutoff.is_finite() {
        return Err(MarkError::BadCutoff(cutoff));
    }
    if !(support > cutoff) || !support.is_finite() {
        return Err(MarkError::BadSupport { support, cutoff });
    }
    let n_atoms = n_atoms.max(1);
    let width = (support - cutoff) / n_atoms as f64;
    let mut atoms = Vec::new();
    for sign in [-1.0, 1.0] {
        for c in 0..n_atoms {
            let lo = cutoff + c as f64 * width;
            let h = width / SUBCELLS as f64;
            let mut mass = 0.0;
            for s in 0..SUBCELLS {
                let node = sign * (lo + (s as f64 + 0.5) * h);
                let v = density(node);
                if v < 0.0 || v.is_nan() {
                    return Err(MarkError::NegativeDensity { at: node, value: v });
                }
                mass += v * h;
            }
            if mass > 0.0 {
                atoms.push((sign * (lo + 0.5 * width), mass));
            }
        }
    }
    if atoms.is_empty() {
        return Err(MarkError::EmptySupport);
    }
    let mut ms = build_finite(&atoms)?;
    ms.cutoff = cutoff;
    Ok(ms)
}

impl MarkSpace {
    /// Replace the kernel configuration. `l` must only reference `e`.
    pub fn with_kernels(
        mut self,
        rho_scale: f64,
        l: &str,
        l_scale: f64,
    ) -> Result<Self, MarkError> {
        if !(rho_scale > 0.0) || !(l_scale >= 0.0) || !rho_scale.is_finite() || !l_scale.is_finite()
        {
            return Err(MarkError::BadScale { rho_scale, l_scale });
        }
        let expr = parse_expr(l)?;
        if let Some(v) = expr.variables().into_iter().find(|v| *v != Var::E) {
            return Err(MarkError::LKernelVariable(v.to_string()));
        }
        self.rho_scale = rho_scale;
        self.l_scale = l_scale;
        self.l_expr = expr;
        self.refresh_l();
        Ok(self)
    }

    fn refresh_l(&mut self) {
        self.l_values = self.atoms.iter().map(|a| self.l_kernel(a.e)).collect();
    }

    pub fn atoms(&self) -> &[MarkAtom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn marks(&self) -> impl Iterator<Item = f64> + '_ {
        self.atoms.iter().map(|a| a.e)
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.atoms.iter().map(|a| a.weight)
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn rho_scale(&self) -> f64 {
        self.rho_scale
    }

    pub fn l_scale(&self) -> f64 {
        self.l_scale
    }

    pub fn l_expr(&self) -> &CoefficientExpr {
        &self.l_expr
    }

    pub fn total_intensity(&self) -> f64 {
        self.weights().sum()
    }

    /// `rho(e) = rho_scale · (1 ∧ |e|)`.
    pub fn rho(&self, e: f64) -> f64 {
        self.rho_scale * cap1(e)
    }

    /// Configured `l(e)`, clipped into `[0, l_scale (1 ∧ |e|)]`.
    pub fn l_kernel(&self, e: f64) -> f64 {
        let raw = self.l_expr.eval(&EvalEnv {
            e,
            ..Default::default()
        });
        let cap = self.l_scale * cap1(e);
        if raw.is_nan() {
            return 0.0;
        }
        raw.clamp(0.0, cap)
    }

    /// `l(e_j)` for every atom, cached at construction.
    pub fn l_values(&self) -> &[f64] {
        &self.l_values
    }

    /// `∫ f dλ = Σ_j f(e_j) w_j`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64, MarkError> {
        let mut acc = 0.0;
        for (index, a) in self.atoms.iter().enumerate() {
            let v = f(a.e);
            if !v.is_finite() {
                return Err(MarkError::NonFinite { index, mark: a.e });
            }
            acc += v * a.weight;
        }
        Ok(acc)
    }

    /// The reduction `q = Σ_j k_j l(e_j) w_j` used by `g` (and by `b`, `σ`
    /// when they reference `k`).
    pub fn reduce_k(&self, k: &[f64]) -> f64 {
        k.iter()
            .zip(&self.l_values)
            .zip(&self.atoms)
            .map(|((kj, lj), a)| kj * lj * a.weight)
            .sum()
    }

    /// `Σ_j k_j² w_j`, the squared `L²(λ)` norm of a per-atom vector.
    pub fn k_norm_sq(&self, k: &[f64]) -> f64 {
        k.iter()
            .zip(&self.atoms)
            .map(|(kj, a)| kj * kj * a.weight)
            .sum()
    }
}

pub fn integrate_mark<F: Fn(f64) -> f64>(f: F, ms: &MarkSpace) -> Result<f64, MarkError> {
    ms.integrate(f)
}

/// Jump counts `ΔN[path, step, atom]` for a set of paths on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpSchedule {
    pub n_paths: usize,
    pub n_steps: usize,
    pub n_atoms: usize,
    pub grid: TimeGrid,
    counts: Vec<u32>,
}

impl JumpSchedule {
    pub fn count(&self, path: usize, step: usize, atom: usize) -> u32 {
        self.counts[(path * self.n_steps + step) * self.n_atoms + atom]
    }

    /// All counts of one path, step-major.
    pub fn path(&self, path: usize) -> &[u32] {
        let w = self.n_steps * self.n_atoms;
        &self.counts[path * w..(path + 1) * w]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self, path: usize, atom: usize) -> u32 {
        (0..self.n_steps).map(|s| self.count(path, s, atom)).sum()
    }
}

/// Independent Poisson counts with mean `w_j Δt` per (path, step, atom).
/// Cell `step · J + atom` of path `p` on the jump substream determines each
/// count, so the output is a pure function of `(seed, path, step, atom)`.
pub fn sample_jumps(ms: &MarkSpace, grid: &TimeGrid, n_paths: usize, seed: u64) -> JumpSchedule {
    sample_jumps_in(ms, grid, n_paths, seed, Substream::JUMPS)
}

pub(crate) fn sample_jumps_in(
    ms: &MarkSpace,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    sub: Substream,
) -> JumpSchedule {
    let key = StreamKey::new(seed, sub);
    let dt = grid.dt();
    let means: Vec<f64> = ms.weights().map(|w| w * dt).collect();
    let n_steps = grid.n_steps;
    let j = means.len();
    let mut counts = vec![0u32; n_paths * n_steps * j];
    counts
        .par_chunks_mut((n_steps * j).max(1))
        .enumerate()
        .for_each(|(p, out)| {
            let mut s = key.path(p as u64);
            for (c, m) in out.iter_mut().zip(means.iter().cycle()) {
                *c = s.poisson(*m);
            }
        });
    JumpSchedule {
        n_paths,
        n_steps,
        n_atoms: j,
        grid: *grid,
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_finite_examples() {
        let one = build_finite(&[(1.0, 1.0)]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.total_intensity(), 1.0);
        let sym = build_finite(&[(0.5, 2.0), (-0.5, 2.0)]).unwrap();
        assert_eq!(sym.total_intensity(), 4.0);
        assert!(matches!(
            build_finite(&[(1.0, 0.0)]),
            Err(MarkError::BadWeight { index: 0, .. })
        ));
        assert!(matches!(build_finite(&[]), Err(MarkError::Empty)));
        assert!(matches!(
            build_finite(&[(0.0, 1.0)]),
            Err(MarkError::BadMark { .. })
        ));
        assert!(matches!(
            build_finite(&[(0.3, 1.0), (0.3, 2.0)]),
            Err(MarkError::DuplicateMark { .. })
        ));
    }

    #[test]
    fn truncation_matches_analytic_mass() {
        // ∫_{0.5}^{1} e^{-2} de = 1
        let ms = truncate_density(
            |e| {
                if (0.5..=1.0).contains(&e) {
                    e.powi(-2)
                } else {
                    0.0
                }
            },
            0.5,
            1.0,
            1,
        )
        .unwrap();
        assert_eq!(ms.len(), 1);
        assert!((ms.atoms()[0].e - 0.75).abs() < 1e-15);
        assert!(
            (ms.total_intensity() - 1.0).abs() < 1e-4,
            "{}",
            ms.total_intensity()
        );
        assert_eq!(ms.cutoff(), 0.5);

        let flat = truncate_density(|e| if e > 0.0 { 1.0 } else { 0.0 }, 1.0, 2.0, 2).unwrap();
        assert_eq!(flat.len(), 2);
        assert!((flat.total_intensity() - 1.0).abs() < 1e-12);
        assert!((flat.atoms()[0].e - 1.25).abs() < 1e-15);

        assert!(matches!(
            truncate_density(|_| 0.0, 0.1, 1.0, 4),
            Err(MarkError::EmptySupport)
        ));
        assert!(matches!(
            truncate_density(|_| 1.0, 0.0, 1.0, 4),
            Err(MarkError::BadCutoff(_))
        ));
        assert!(matches!(
            truncate_density(|_| -1.0, 0.1, 1.0, 4),
            Err(MarkError::NegativeDensity { .. })
        ));
    }

    #[test]
    fn truncation_of_infinite_activity_density() {
        // alpha-stable-like density |e|^{-1-a}: mass on [eps, 1] is (eps^{-a} - 1)/a per side
        let a = 0.5;
        let eps = 0.05;
        let ms = truncate_density(|e: f64| e.abs().powf(-1.0 - a), eps, 1.0, 40).unwrap();
        let exact = 2.0 * (eps.powf(-a) - 1.0) / a;
        assert!((ms.total_intensity() - exact).abs() / exact < 1e-4);
    }

    #[test]
    fn integrate_examples() {
        let sym = build_finite(&[(0.5, 2.0), (-0.5, 2.0)]).unwrap();
        assert_eq!(integrate_mark(|_| 1.0, &sym).unwrap(), 4.0);
        assert_eq!(integrate_mark(|e| e, &sym).unwrap(), 0.0);
        let big = build_finite(&[(2.0, 3.0)]).unwrap();
        assert_eq!(integrate_mark(|e| (e * e).min(1.0), &big).unwrap(), 3.0);
        assert!(matches!(
            integrate_mark(|e| 1.0 / (e - 2.0), &big),
            Err(MarkError::NonFinite { index: 0, .. })
        ));
    }

    #[test]
    fn kernels() {
        let ms = build_finite(&[(0.5, 2.0)])
            .unwrap()
            .with_kernels(2.0, "cap1(e)", 1.0)
            .unwrap();
        assert_eq!(ms.rho(0.25), 0.5);
        assert_eq!(ms.rho(7.0), 2.0);
        assert_eq!(ms.l_kernel(-0.3), 0.3);
        // clipped into [0, l_scale (1 ∧ |e|)]
        let clipped = ms.clone().with_kernels(2.0, "3*e", 1.0).unwrap();
        assert_eq!(clipped.l_kernel(0.2), 0.2);
        assert_eq!(clipped.l_kernel(-0.2), 0.0);
        assert!(matches!(
            ms.with_kernels(1.0, "x", 1.0),
            Err(MarkError::LKernelVariable(_))
        ));
    }

    #[test]
    fn reduction_matches_definition() {
        let ms = build_finite(&[(0.5, 2.0)]).unwrap();
        // 1 * 0.5 * 2.0
        assert_eq!(ms.reduce_k(&[1.0]), 1.0);
    }

    #[test]
    fn json_roundtrip_and_schema() {
        let ms = build_finite(&[(0.5, 2.0), (-0.25, 1.5)])
            .unwrap()
            .with_kernels(0.1, "cap1(e)", 1.0)
            .unwrap();
        let s = serde_json::to_string(&ms).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["atoms"][0]["e"], 0.5);
        assert_eq!(v["atoms"][0]["w"], 2.0);
        assert_eq!(v["rho_scale"], 0.1);
        assert_eq!(v["l"], "cap1(e)");
        let back: MarkSpace = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ms);
        let bad = r#"{"atoms":[{"e":0.0,"w":1.0}],"cutoff":0,"rho_scale":1,"l":"cap1(e)"}"#;
        assert!(serde_json::from_str::<MarkSpace>(bad).is_err());
    }

    #[test]
    fn integrability_invariant_equals_integral() {
        let ms = build_finite(&[(0.5, 2.0), (-3.0, 0.25), (0.01, 40.0)]).unwrap();
        let direct: f64 = ms
            .atoms()
            .iter()
            .map(|a| a.weight * (a.e * a.e).min(1.0))
            .sum();
        assert_eq!(ms.integrate(|e| (e * e).min(1.0)).unwrap(), direct);
    }
}
