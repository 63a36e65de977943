//! Sampled validators for the standing assumptions.
//!
//! Each check draws random argument tuples (or pairs) from a box, evaluates a
//! difference quotient, growth ratio or one-sided inequality, and records the
//! worst case. Sampling gives falsification power, not proof.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{assemble_a, CoefficientSet, Point};
use crate::mark_space::MarkSpace;
use crate::rng::{PathStream, StreamKey, Substream};

/// Negative margins smaller than this (relative to the bound) are rounding.
const ROUNDING_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Assumption {
    #[serde(rename = "H2.1")]
    H21,
    #[serde(rename = "H3.1")]
    H31,
    #[serde(rename = "H3.2")]
    H32,
    #[serde(rename = "H3.3")]
    H33,
    #[serde(rename = "H3.4")]
    H34,
}

impl Assumption {
    pub const DEFAULT: [Assumption; 4] = [
        Assumption::H21,
        Assumption::H31,
        Assumption::H33,
        Assumption::H34,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "H2.1" => Some(Assumption::H21),
            "H3.1" => Some(Assumption::H31),
            "H3.2" => Some(Assumption::H32),
            "H3.3" => Some(Assumption::H33),
            "H3.4" => Some(Assumption::H34),
            _ => None,
        }
    }
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Assumption::H21 => "H2.1",
            Assumption::H31 => "H3.1",
            Assumption::H32 => "H3.2",
            Assumption::H33 => "H3.3",
            Assumption::H34 => "H3.4",
        };
        f.write_str(s)
    }
}

/// Which monotonicity statement to check.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonotonicityForm {
    /// H2.2 (i) and (ii).
    #[default]
    Full,
    /// H2.2 (i) with the weakened terminal condition (ii)'.
    WeakTerminal,
    /// H2.3 with (ii)'.
    H23,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityParams {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub mu1: f64,
}

impl MonotonicityParams {
    /// Positivity constraints for backward dimension 1 and forward dimension `n`.
    pub fn validate(&self, form: MonotonicityForm, n: usize) -> Result<(), String> {
        let MonotonicityParams {
            beta1,
            beta2,
            beta3,
            mu1,
        } = *self;
        if [beta1, beta2, beta3, mu1].iter().any(|v| !(*v >= 0.0)) {
            return Err("all parameters must be nonnegative".into());
        }
        let m = 1;
        match form {
            MonotonicityForm::H23 => {
                if !(beta1 + beta2 > 0.0) {
                    return Err("beta1 + beta2 must be positive".into());
                }
                if m < n && !(beta2 > 0.0) {
                    return Err("beta2 must be positive when m < n".into());
                }
            }
            MonotonicityForm::Full | MonotonicityForm::WeakTerminal => {
                let mu = if form == MonotonicityForm::Full {
                    mu1
                } else {
                    0.0
                };
                for (s, name) in [
                    (beta1 + beta2, "beta1 + beta2"),
                    (beta1 + beta3, "beta1 + beta3"),
                    (beta2 + mu, "beta2 + mu1"),
                    (beta3 + mu, "beta3 + mu1"),
                ] {
                    if !(s > 0.0) {
                        return Err(format!("{name} must be positive"));
                    }
                }
                if m < n && !(beta2 > 0.0 && beta3 > 0.0) {
                    return Err("beta2 and beta3 must be positive when m < n".into());
                }
            }
        }
        Ok(())
    }
}

/// Sampling box: every state coordinate in `[lo, hi]`, time in `[t_lo, t_hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub lo: f64,
    pub hi: f64,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl Default for SampleBox {
    fn default() -> Self {
        SampleBox {
            lo: -5.0,
            hi: 5.0,
            t_lo: 0.0,
            t_hi: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    /// Declared bound (1 for normalized ratios, 0 for one-sided inequalities).
    pub bound: f64,
    /// Worst observed quotient.
    pub observed: f64,
    /// `bound - observed`, rounding-level negatives clamped to 0.
    pub margin: f64,
    pub pass: bool,
    pub witness: String,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn extend(&mut self, other: AssumptionReport) {
        self.checks.extend(other.checks);
    }

    pub fn worst_margin(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.margin)
            .fold(f64::INFINITY, f64::min)
    }
}

impl fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .checks
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(
            f,
            "{:<w$}  {:>10}  {:>12}  {:>12}  {:>7}  {:>7}  witness",
            "check", "bound", "observed", "margin", "samples", "verdict"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<w$}  {:>10.4e}  {:>12.5e}  {:>12.5e}  {:>7}  {:>7}  {}",
                c.name,
                c.bound,
                c.observed,
                c.margin,
                c.samples,
                if c.pass { "pass" } else { "FAIL" },
                c.witness
            )?;
        }
        write!(f, "overall: {}", if self.pass() { "pass" } else { "FAIL" })
    }
}

/// Running worst case of one check.
struct Worst {
    name: String,
    bound: f64,
    observed: f64,
    witness: String,
    samples: usize,
}

impl Worst {
    fn new(name: impl Into<String>, bound: f64) -> Self {
        Worst {
            name: name.into(),
            bound,
            observed: f64::NEG_INFINITY,
            witness: String::new(),
            samples: 0,
        }
    }

    fn offer(&mut self, value: f64, witness: impl FnOnce() -> String) {
        self.samples += 1;
        // NaN counts as a violation
        if value > self.observed || value.is_nan() && !self.observed.is_nan() {
            self.observed = value;
            self.witness = witness();
        }
    }

    fn finish(self) -> AssumptionCheck {
        let mut margin = self.bound - self.observed;
        if margin.is_nan() {
            margin = f64::NEG_INFINITY;
        }
        if margin < 0.0 && margin > -ROUNDING_SLACK * self.bound.abs().max(1.0) {
            margin = 0.0;
        }
        AssumptionCheck {
            name: self.name,
            bound: self.bound,
            observed: self.observed,
            margin,
            pass: margin >= 0.0,
            witness: self.witness,
            samples: self.samples,
        }
    }
}

fn undeclared(name: &str, what: &str) -> AssumptionCheck {
    AssumptionCheck {
        name: name.into(),
        bound: f64::NAN,
        observed: f64::NAN,
        margin: f64::NEG_INFINITY,
        pass: false,
        witness: format!("constant {what} not declared"),
        samples: 0,
    }
}

#[derive(Clone, Debug)]
struct Tuple {
    t: f64,
    x: Vec<f64>,
    y: f64,
    z: Vec<f64>,
    k: Vec<f64>,
}

impl Tuple {
    fn draw(s: &mut PathStream, bx: &SampleBox, n: usize, d: usize, j: usize) -> Self {
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * s.uniform();
        let t = u(bx.t_lo, bx.t_hi);
        let x = (0..n).map(|_| u(bx.lo, bx.hi)).collect();
        let y = u(bx.lo, bx.hi);
        let z = (0..d).map(|_| u(bx.lo, bx.hi)).collect();
        let k = (0..j).map(|_| u(bx.lo, bx.hi)).collect();
        Tuple { t, x, y, z, k }
    }

    fn point<'a>(&'a self, ms: &MarkSpace) -> Point<'a> {
        Point {
            t: self.t,
            x: &self.x,
            y: self.y,
            z: &self.z,
            k: &self.k,
            q: ms.reduce_k(&self.k),
        }
    }
}

impl fmt::Display for Tuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(t={:.4}, x={:?}, y={:.4}, z={:?}, k={:?})",
            self.t,
            fmt_vec(&self.x),
            self.y,
            fmt_vec(&self.z),
            fmt_vec(&self.k)
        )
    }
}

fn fmt_vec(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:.4}")).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn k_dist(ms: &MarkSpace, a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(u, v)| u - v).collect();
    ms.k_norm_sq(&diff).sqrt()
}

fn sampler(seed: u64, check: u64) -> PathStream {
    StreamKey::new(seed, Substream::SAMPLER.indexed(check)).path(0)
}

/// Which argument groups a pair may differ in.
#[derive(Clone, Copy)]
struct Vary {
    x: bool,
    y: bool,
    z: bool,
    k: bool,
}

impl Vary {
    const ALL: Vary = Vary {
        x: true,
        y: true,
        z: true,
        k: true,
    };
    const X: Vary = Vary {
        x: true,
        y: false,
        z: false,
        k: false,
    };
    const Y: Vary = Vary {
        x: false,
        y: true,
        z: false,
        k: false,
    };
    const Z: Vary = Vary {
        x: false,
        y: false,
        z: true,
        k: false,
    };
    const K: Vary = Vary {
        x: false,
        y: false,
        z: false,
        k: true,
    };

    /// Single-argument perturbations cycling through `options`.
    fn cycle(options: &[Vary], i: usize) -> Vary {
        options[i % options.len()]
    }
}

fn draw_pair(
    s: &mut PathStream,
    bx: &SampleBox,
    cs: &CoefficientSet,
    j: usize,
    vary: Vary,
) -> (Tuple, Tuple) {
    let a = Tuple::draw(s, bx, cs.n(), cs.d(), j);
    let mut b = Tuple::draw(s, bx, cs.n(), cs.d(), j);
    b.t = a.t;
    if !vary.x {
        b.x = a.x.clone();
    }
    if !vary.y {
        b.y = a.y;
    }
    if !vary.z {
        b.z = a.z.clone();
    }
    if !vary.k {
        b.k = a.k.clone();
    }
    (a, b)
}

/// Per-pair evaluation of all coefficients.
struct Evals {
    b: Vec<f64>,
    sigma: Vec<f64>,
    g: f64,
    h: Vec<Vec<f64>>,
}

fn evaluate(cs: &CoefficientSet, ms: &MarkSpace, tp: &Tuple) -> Evals {
    let p = tp.point(ms);
    let mut b = vec![0.0; cs.n()];
    let mut sigma = vec![0.0; cs.n() * cs.d()];
    cs.drift(&p, &mut b);
    cs.diffusion(&p, &mut sigma);
    let g = cs.f_value(&p);
    let h = ms
        .marks()
        .enumerate()
        .map(|(a, e)| {
            let mut out = vec![0.0; cs.n()];
            cs.jump(&p, a, e, &mut out);
            out
        })
        .collect();
    Evals { b, sigma, g, h }
}

/// Lipschitz and growth checks for the listed assumptions.
pub fn check_lipschitz_growth(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    assumptions: &[super::validate::Assumption],
    bx: &SampleBox,
    n_samples: usize,
    seed: u64,
) -> AssumptionReport {
    let mut report = AssumptionReport::default();
    let c = &cs.constants;
    let j = ms.len();
    let n_samples = n_samples.max(1);
    let rho: Vec<f64> = ms.marks().map(|e| ms.rho(e)).collect();
    let has = |a: Assumption| assumptions.contains(&a);

    if has(Assumption::H21) {
        match c.lipschitz {
            None => {
                for name in [
                    "H2.1(i) b",
                    "H2.1(i) sigma",
                    "H2.1(i) g",
                    "H2.1(i) h",
                    "H2.1(iv) phi",
                ] {
                    report.checks.push(undeclared(name, "lipschitz"));
                }
            }
            Some(kc) => {
                let mut wb = Worst::new("H2.1(i) b", kc);
                let mut ws = Worst::new("H2.1(i) sigma", kc);
                let mut wg = Worst::new("H2.1(i) g", kc);
                let mut wh = Worst::new("H2.1(i) h / (rho(|dx|+|dy|+|dz|) + K|dk|)", 1.0);
                let mut wp = Worst::new("H2.1(iv) phi", kc);
                let mut s = sampler(seed, 1);
                for _ in 0..n_samples {
                    let (a, b) = draw_pair(&mut s, bx, cs, j, Vary::ALL);
                    let (ea, eb) = (evaluate(cs, ms, &a), evaluate(cs, ms, &b));
                    let den = dist(&a.x, &b.x)
                        + (a.y - b.y).abs()
                        + dist(&a.z, &b.z)
                        + k_dist(ms, &a.k, &b.k);
                    let w = || format!("{a} vs {b}");
                    wb.offer(dist(&ea.b, &eb.b) / den, w);
                    ws.offer(dist(&ea.sigma, &eb.sigma) / den, w);
                    wg.offer((ea.g - eb.g).abs() / den, w);
                    for atom in 0..j {
                        let bound = rho[atom]
                            * (dist(&a.x, &b.x) + (a.y - b.y).abs() + dist(&a.z, &b.z))
                            + kc * (a.k[atom] - b.k[atom]).abs();
                        wh.offer(dist(&ea.h[atom], &eb.h[atom]) / bound, || {
                            format!("atom {atom}: {a} vs {b}")
                        });
                    }
                    let dx = dist(&a.x, &b.x);
                    wp.offer((cs.terminal(&a.x) - cs.terminal(&b.x)).abs() / dx, || {
                        format!("x={:?} vs {:?}", fmt_vec(&a.x), fmt_vec(&b.x))
                    });
                }
                report
                    .checks
                    .extend([wb, ws, wg, wh, wp].map(Worst::finish));
            }
        }
        // (ii): f nondecreasing in q
        let mut wm = Worst::new("H2.1(ii) f nondecreasing in q", 0.0);
        let mut s = sampler(seed, 2);
        let span = bx.hi - bx.lo;
        for _ in 0..n_samples {
            let a = Tuple::draw(&mut s, bx, cs.n(), cs.d(), j);
            let q1 = bx.lo + span * s.uniform();
            let q2 = q1 + span * s.uniform();
            let p = a.point(ms);
            let f1 = cs.f_value(&Point { q: q1, ..p });
            let f2 = cs.f_value(&Point { q: q2, ..p });
            wm.offer(f1 - f2, || format!("{a}, q={q1:.4} vs q={q2:.4}"));
        }
        report.checks.push(wm.finish());
        // (iii): kernel bound; holds by clipping, reported for completeness
        let mut wl = Worst::new("H2.1(iii) l / (C_l cap1(e))", 1.0);
        for (e, l) in ms.marks().zip(ms.l_values()) {
            let cap = ms.l_scale() * e.abs().min(1.0);
            let r = if cap > 0.0 {
                l / cap
            } else if *l == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            wl.offer(r.max(if *l < 0.0 { f64::INFINITY } else { 0.0 }), || {
                format!("e={e}")
            });
        }
        report.checks.push(wl.finish());
    }

    if has(Assumption::H31) {
        match c.growth {
            None => report.checks.push(undeclared("H3.1 growth", "growth")),
            Some(lc) => {
                let mut wsum = Worst::new("H3.1 |b|+|sigma|+|g|+|phi| growth", lc);
                let mut wh = Worst::new("H3.1 |h| / rho(1+|x|+|y|+|z|+|k|)", 1.0);
                let mut s = sampler(seed, 3);
                for _ in 0..n_samples {
                    let a = Tuple::draw(&mut s, bx, cs.n(), cs.d(), j);
                    let ev = evaluate(cs, ms, &a);
                    let scale =
                        1.0 + norm(&a.x) + a.y.abs() + norm(&a.z) + ms.k_norm_sq(&a.k).sqrt();
                    let lhs = norm(&ev.b) + norm(&ev.sigma) + ev.g.abs() + cs.terminal(&a.x).abs();
                    wsum.offer(lhs / scale, || a.to_string());
                    for atom in 0..j {
                        let sc = rho[atom]
                            * (1.0 + norm(&a.x) + a.y.abs() + norm(&a.z) + a.k[atom].abs());
                        wh.offer(norm(&ev.h[atom]) / sc, || format!("atom {atom}: {a}"));
                    }
                }
                report.checks.push(wsum.finish());
                report.checks.push(wh.finish());
            }
        }
    }

    if has(Assumption::H32) {
        match c.growth {
            None => report
                .checks
                .push(undeclared("H3.2 sigma growth", "growth")),
            Some(lc) => {
                let mut ws = Worst::new("H3.2 |sigma| / (1+|x|+|y|)", lc);
                let mut s = sampler(seed, 4);
                for _ in 0..n_samples {
                    let a = Tuple::draw(&mut s, bx, cs.n(), cs.d(), j);
                    let ev = evaluate(cs, ms, &a);
                    ws.offer(norm(&ev.sigma) / (1.0 + norm(&a.x) + a.y.abs()), || {
                        a.to_string()
                    });
                }
                report.checks.push(ws.finish());
            }
        }
        report.checks.push(h_growth_xy(
            "H3.2 |h| / rho(1+|x|+|y|)",
            cs,
            ms,
            bx,
            n_samples,
            seed,
            5,
        ));
    }

    if has(Assumption::H33) {
        match (c.lipschitz, c.l_sigma) {
            (Some(kc), Some(ls)) => {
                let mut wz = Worst::new("H3.3 sigma (z,k)-slope", ls);
                let mut wj = Worst::new("H3.3 sigma / (K(|dx|+|dy|) + L_sigma(|dz|+|dk|))", 1.0);
                let mut s = sampler(seed, 6);
                for i in 0..n_samples {
                    let vary = Vary::cycle(&[Vary::Z, Vary::K], i);
                    let (a, b) = draw_pair(&mut s, bx, cs, j, vary);
                    let (ea, eb) = (evaluate(cs, ms, &a), evaluate(cs, ms, &b));
                    let den = dist(&a.z, &b.z) + k_dist(ms, &a.k, &b.k);
                    wz.offer(dist(&ea.sigma, &eb.sigma) / den, || format!("{a} vs {b}"));
                    let (a, b) = draw_pair(&mut s, bx, cs, j, Vary::ALL);
                    let (ea, eb) = (evaluate(cs, ms, &a), evaluate(cs, ms, &b));
                    let bound = kc * (dist(&a.x, &b.x) + (a.y - b.y).abs())
                        + ls * (dist(&a.z, &b.z) + k_dist(ms, &a.k, &b.k));
                    wj.offer(dist(&ea.sigma, &eb.sigma) / bound, || format!("{a} vs {b}"));
                }
                report.checks.push(wz.finish());
                report.checks.push(wj.finish());
            }
            _ => report
                .checks
                .push(undeclared("H3.3 sigma", "lipschitz / l_sigma")),
        }
        match &c.l_h {
            None => report.checks.push(undeclared("H3.3 h", "l_h")),
            Some(l_h) => {
                let mut wz = Worst::new("H3.3 h (z,k)-slope - L_h(e)", 0.0);
                let mut wx = Worst::new("H3.3 h (x,y)-slope / rho(e)", 1.0);
                let mut s = sampler(seed, 7);
                for i in 0..n_samples {
                    let (a, b) = draw_pair(&mut s, bx, cs, j, Vary::cycle(&[Vary::Z, Vary::K], i));
                    let (ea, eb) = (evaluate(cs, ms, &a), evaluate(cs, ms, &b));
                    for atom in 0..j {
                        let den = dist(&a.z, &b.z) + (a.k[atom] - b.k[atom]).abs();
                        let slope = dist(&ea.h[atom], &eb.h[atom]) / den;
                        wz.offer(slope - l_h[atom], || format!("atom {atom}: {a} vs {b}"));
                    }
                    let (a, b) = draw_pair(&mut s, bx, cs, j, Vary::cycle(&[Vary::X, Vary::Y], i));
                    let (ea, eb) = (evaluate(cs, ms, &a), evaluate(cs, ms, &b));
                    for atom in 0..j {
                        let den = rho[atom] * (dist(&a.x, &b.x) + (a.y - b.y).abs());
                        wx.offer(dist(&ea.h[atom], &eb.h[atom]) / den, || {
                            format!("atom {atom}: {a} vs {b}")
                        });
                    }
                }
                report.checks.push(wz.finish());
                report.checks.push(wx.finish());
            }
        }
    }

    if has(Assumption::H34) {
        report.checks.push(h_growth_xy(
            "H3.4 |h| / rho(1+|x|+|y|)",
            cs,
            ms,
            bx,
            n_samples,
            seed,
            8,
        ));
    }
    report
}

fn h_growth_xy(
    name: &str,
    cs: &CoefficientSet,
    ms: &MarkSpace,
    bx: &SampleBox,
    n_samples: usize,
    seed: u64,
    check: u64,
) -> AssumptionCheck {
    let mut w = Worst::new(name, 1.0);
    let mut s = sampler(seed, check);
    let j = ms.len();
    for _ in 0..n_samples {
        let a = Tuple::draw(&mut s, bx, cs.n(), cs.d(), j);
        let ev = evaluate(cs, ms, &a);
        for (atom, e) in ms.marks().enumerate() {
            let sc = ms.rho(e) * (1.0 + norm(&a.x) + a.y.abs());
            w.offer(norm(&ev.h[atom]) / sc, || format!("atom {atom}: {a}"));
        }
    }
    w.finish()
}

/// Both sides of the monotonicity inequality at one pair.
pub(crate) fn monotonicity_sides(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    params: &MonotonicityParams,
    form: MonotonicityForm,
    a: (f64, &[f64], f64, &[f64], &[f64]),
    b: (f64, &[f64], f64, &[f64], &[f64]),
) -> (f64, f64) {
    let (t, x1, y1, z1, k1) = a;
    let (_, x2, y2, z2, k2) = b;
    let gm = cs.g_matrix();
    let g2: f64 = gm.iter().map(|v| v * v).sum();
    let a1 = assemble_a(cs, ms, t, x1, y1, z1, k1);
    let a2 = assemble_a(cs, ms, t, x2, y2, z2, k2);
    let dpi: Vec<f64> = x1
        .iter()
        .zip(x2)
        .map(|(u, v)| u - v)
        .chain(std::iter::once(y1 - y2))
        .chain(z1.iter().zip(z2).map(|(u, v)| u - v))
        .collect();
    let mut lhs: f64 = a1
        .iter()
        .zip(&a2)
        .zip(&dpi)
        .map(|((u, v), p)| (u - v) * p)
        .sum();
    let q1 = ms.reduce_k(k1);
    let q2 = ms.reduce_k(k2);
    let p1 = Point {
        t,
        x: x1,
        y: y1,
        z: z1,
        k: k1,
        q: q1,
    };
    let p2 = Point {
        t,
        x: x2,
        y: y2,
        z: z2,
        k: k2,
        q: q2,
    };
    let mut h1 = vec![0.0; cs.n()];
    let mut h2 = vec![0.0; cs.n()];
    for ((atom, e), w) in ms.marks().enumerate().zip(ms.weights()) {
        cs.jump(&p1, atom, e, &mut h1);
        cs.jump(&p2, atom, e, &mut h2);
        let gh: f64 = gm
            .iter()
            .zip(h1.iter().zip(&h2))
            .map(|(g, (u, v))| g * (u - v))
            .sum();
        lhs += gh * (k1[atom] - k2[atom]) * w;
    }
    let gx: f64 = gm
        .iter()
        .zip(x1.iter().zip(x2))
        .map(|(g, (u, v))| g * (u - v))
        .sum();
    let dy = y1 - y2;
    let dz2: f64 = z1.iter().zip(z2).map(|(u, v)| (u - v).powi(2)).sum();
    let dk2: f64 = k1
        .iter()
        .zip(k2)
        .zip(ms.weights())
        .map(|((u, v), w)| (u - v).powi(2) * w)
        .sum();
    let rhs = match form {
        MonotonicityForm::H23 => -params.beta1 * gx * gx - params.beta2 * g2 * dy * dy,
        _ => {
            -params.beta1 * gx * gx - params.beta2 * g2 * (dy * dy + dz2) - params.beta3 * g2 * dk2
        }
    };
    (lhs, rhs)
}

/// Terminal condition `<Φ(x) − Φ(x̄), G(x − x̄)> − μ|G x̂|²` at one pair.
pub(crate) fn terminal_margin(cs: &CoefficientSet, mu: f64, x1: &[f64], x2: &[f64]) -> f64 {
    let gx: f64 = cs
        .g_matrix()
        .iter()
        .zip(x1.iter().zip(x2))
        .map(|(g, (u, v))| g * (u - v))
        .sum();
    (cs.terminal(x1) - cs.terminal(x2)) * gx - mu * gx * gx
}

/// Sampled monotonicity check. Margins are `RHS − LHS` for the coefficient
/// inequality and the terminal margin for `Φ`; both must be nonnegative.
pub fn check_monotonicity(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    params: &MonotonicityParams,
    form: MonotonicityForm,
    bx: &SampleBox,
    n_samples: usize,
    seed: u64,
) -> AssumptionReport {
    let (name_i, name_ii, mu) = match form {
        MonotonicityForm::Full => ("H2.2(i)", "H2.2(ii)", params.mu1),
        MonotonicityForm::WeakTerminal => ("H2.2(i)", "H2.2(ii)'", 0.0),
        MonotonicityForm::H23 => ("H2.3", "H2.2(ii)'", 0.0),
    };
    // observed = LHS − RHS, bound 0
    let mut wi = Worst::new(name_i, 0.0);
    let mut wii = Worst::new(name_ii, 0.0);
    let mut s = sampler(seed, 20);
    let j = ms.len();
    let n_samples = n_samples.max(1);
    for _ in 0..n_samples {
        let (a, b) = draw_pair(&mut s, bx, cs, j, Vary::ALL);
        let (lhs, rhs) = monotonicity_sides(
            cs,
            ms,
            params,
            form,
            (a.t, &a.x, a.y, &a.z, &a.k),
            (b.t, &b.x, b.y, &b.z, &b.k),
        );
        let slack = ROUNDING_SLACK * (lhs.abs() + rhs.abs());
        let v = lhs - rhs;
        wi.offer(if v > 0.0 && v < slack { 0.0 } else { v }, || {
            format!("{a} vs {b}; LHS={lhs:.6e}, RHS={rhs:.6e}")
        });
        let tm = terminal_margin(cs, mu, &a.x, &b.x);
        wii.offer(-tm, || {
            format!("x={:?} vs {:?}", fmt_vec(&a.x), fmt_vec(&b.x))
        });
    }
    AssumptionReport {
        checks: vec![wi.finish(), wii.finish()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin, ModelFile};

    fn model(
        b: &str,
        sigma: &str,
        h: &str,
        f: &str,
        phi: &str,
        consts: &str,
    ) -> crate::model::Model {
        let text = format!(
            r#"{{"n":1,"d":1,"b":["{b}"],"sigma":[["{sigma}"]],"h":["{h}"],"f":"{f}","phi":"{phi}",
                "marks":{{"atoms":[{{"e":0.5,"w":2.0}}],"rho_scale":0.1}},"constants":{consts}}}"#
        );
        ModelFile::from_json_str(&text).unwrap().build().unwrap()
    }

    const CONSTS: &str = r#"{"lipschitz":1.0,"growth":1.0,"l_sigma":0.05,"l_h":[0.0]}"#;

    #[test]
    fn sigma_slope_at_declared_constant_passes_with_zero_margin() {
        let m = model("0", "0.05*z", "0", "0", "x", CONSTS);
        let r = check_lipschitz_growth(
            &m.coeffs,
            &m.marks,
            &[Assumption::H33],
            &SampleBox::default(),
            10_000,
            1,
        );
        let c = r.get("H3.3 sigma (z,k)-slope").unwrap();
        assert!(c.pass, "{r}");
        assert!(c.margin.abs() < 1e-12, "{}", c.margin);
        assert!((c.observed - 0.05).abs() < 1e-9);
    }

    #[test]
    fn sigma_slope_one_fails_against_small_declaration() {
        let m = model("0", "z", "0", "0", "x", CONSTS);
        let r = check_lipschitz_growth(
            &m.coeffs,
            &m.marks,
            &[Assumption::H33],
            &SampleBox::default(),
            10_000,
            1,
        );
        let c = r.get("H3.3 sigma (z,k)-slope").unwrap();
        assert!(!c.pass);
        assert!((c.observed - 1.0).abs() < 1e-9, "{}", c.observed);
        assert!(!r.pass());
    }

    #[test]
    fn jump_coefficient_scaled_by_kernel_passes() {
        let m = model("0", "0", "cap1(e)*0.1*x", "0", "x", CONSTS);
        let r = check_lipschitz_growth(
            &m.coeffs,
            &m.marks,
            &[Assumption::H21, Assumption::H33, Assumption::H34],
            &SampleBox::default(),
            10_000,
            2,
        );
        assert!(r.pass(), "{r}");
        // slope in x equals rho(0.5) = 0.05 exactly
        let c = r.get("H3.3 h (x,y)-slope / rho(e)").unwrap();
        assert!((c.observed - 1.0).abs() < 1e-9);
    }

    #[test]
    fn builtin_models_pass_their_declared_assumptions() {
        for name in ["T0", "T1", "T2", "T3", "T3-shift"] {
            let m = builtin(name).unwrap();
            let r = check_lipschitz_growth(
                &m.coeffs,
                &m.marks,
                &m.assumptions,
                &m.sample_box,
                5_000,
                3,
            );
            assert!(r.pass(), "{name}\n{r}");
        }
        let neg = builtin("T3-neg").unwrap();
        let r = check_lipschitz_growth(
            &neg.coeffs,
            &neg.marks,
            &neg.assumptions,
            &neg.sample_box,
            5_000,
            3,
        );
        assert!(!r.pass());
    }

    #[test]
    fn growth_violation_detected() {
        let m = model("3*x", "0", "0", "0", "x", CONSTS);
        let r = check_lipschitz_growth(
            &m.coeffs,
            &m.marks,
            &[Assumption::H31],
            &SampleBox::default(),
            2_000,
            4,
        );
        assert!(!r.pass());
        let m = model("0", "0", "0", "-q", "x", CONSTS);
        let r = check_lipschitz_growth(
            &m.coeffs,
            &m.marks,
            &[Assumption::H21],
            &SampleBox::default(),
            2_000,
            4,
        );
        assert!(!r.get("H2.1(ii) f nondecreasing in q").unwrap().pass);
    }

    #[test]
    fn undeclared_constants_fail() {
        let m = model("0", "0", "0", "0", "x", "{}");
        let r = check_lipschitz_growth(
            &m.coeffs,
            &m.marks,
            &[Assumption::H21],
            &SampleBox::default(),
            10,
            4,
        );
        assert!(!r.pass());
    }

    #[test]
    fn zero_model_monotonicity_margin_is_exactly_zero() {
        let m = builtin("T0").unwrap();
        let p = MonotonicityParams {
            beta1: 0.0,
            beta2: 0.0,
            beta3: 0.0,
            mu1: 0.0,
        };
        let r = check_monotonicity(
            &m.coeffs,
            &m.marks,
            &p,
            MonotonicityForm::Full,
            &SampleBox::default(),
            10_000,
            5,
        );
        let c = r.get("H2.2(i)").unwrap();
        assert_eq!(c.margin, 0.0);
        assert_eq!(c.observed, 0.0);
        assert!(r.pass(), "{r}");
        // zero betas break the positivity constraints, checked separately
        assert!(p.validate(MonotonicityForm::Full, 1).is_err());
    }

    fn grid_min_margin(m: &crate::model::Model, p: &MonotonicityParams) -> f64 {
        // brute force over (x, x̄, y, ȳ) at fixed z = z̄ = 0, k = k̄ = 0
        let pts: Vec<f64> = (0..=20).map(|i| -5.0 + 0.5 * i as f64).collect();
        let mut worst = f64::INFINITY;
        for &x1 in &pts {
            for &x2 in &pts {
                for &y1 in &pts {
                    for &y2 in &pts {
                        let (l, r) = monotonicity_sides(
                            &m.coeffs,
                            &m.marks,
                            p,
                            MonotonicityForm::Full,
                            (0.0, &[x1], y1, &[0.0], &[0.0]),
                            (0.0, &[x2], y2, &[0.0], &[0.0]),
                        );
                        worst = worst.min(r - l);
                    }
                }
            }
        }
        worst
    }

    #[test]
    fn classical_monotone_pair_passes_and_matches_grid() {
        // b = -y, g = x: <A - Ā, π - π̄> = -(x̂² + ŷ²)
        let m = model("-y", "0", "0", "x", "x", CONSTS);
        let p = MonotonicityParams {
            beta1: 0.5,
            beta2: 0.0,
            beta3: 0.0,
            mu1: 1.0,
        };
        assert!(p.validate(MonotonicityForm::Full, 1).is_ok());
        let grid = grid_min_margin(&m, &p);
        assert!(grid >= 0.0);
        let r = check_monotonicity(
            &m.coeffs,
            &m.marks,
            &p,
            MonotonicityForm::Full,
            &SampleBox::default(),
            10_000,
            6,
        );
        assert!(r.pass(), "{r}");
        // the margin 0.5x̂² + ŷ² has infimum 0; samples approach it from above
        let c = r.get("H2.2(i)").unwrap();
        assert!(c.margin >= 0.0 && c.margin < 1.0);
        // explicit closed form at one pair
        let (l, rr) = monotonicity_sides(
            &m.coeffs,
            &m.marks,
            &p,
            MonotonicityForm::Full,
            (0.0, &[1.0], 2.0, &[0.0], &[0.0]),
            (0.0, &[0.0], 0.0, &[0.0], &[0.0]),
        );
        assert!((l + 5.0).abs() < 1e-14 && (rr + 0.5).abs() < 1e-14);
    }

    #[test]
    fn anti_monotone_drift_fails() {
        let m = model("y", "0", "0", "0", "x", CONSTS);
        let p = MonotonicityParams {
            beta1: 0.5,
            beta2: 0.5,
            beta3: 0.5,
            mu1: 0.5,
        };
        // explicit counterexample: y = 1, ȳ = 0 gives LHS = 1 > RHS = -0.5
        let (l, r) = monotonicity_sides(
            &m.coeffs,
            &m.marks,
            &p,
            MonotonicityForm::Full,
            (0.0, &[0.0], 1.0, &[0.0], &[0.0]),
            (0.0, &[0.0], 0.0, &[0.0], &[0.0]),
        );
        assert_eq!((l, r), (1.0, -0.5));
        let rep = check_monotonicity(
            &m.coeffs,
            &m.marks,
            &p,
            MonotonicityForm::Full,
            &SampleBox::default(),
            2_000,
            7,
        );
        let c = rep.get("H2.2(i)").unwrap();
        assert!(!c.pass && c.margin < 0.0);
        assert!(grid_min_margin(&m, &p) < 0.0);
    }

    #[test]
    fn weaker_forms() {
        let m = model("-y", "0", "0", "x", "0.5*x", CONSTS);
        let p = MonotonicityParams {
            beta1: 0.5,
            beta2: 0.5,
            beta3: 0.0,
            mu1: 1.0,
        };
        // Φ slope 0.5 < μ₁ = 1 fails (ii) but satisfies (ii)'
        let full = check_monotonicity(
            &m.coeffs,
            &m.marks,
            &p,
            MonotonicityForm::H23,
            &SampleBox::default(),
            2_000,
            8,
        );
        assert!(full.pass(), "{full}");
        let strict = check_monotonicity(
            &m.coeffs,
            &m.marks,
            &p,
            MonotonicityForm::Full,
            &SampleBox::default(),
            2_000,
            8,
        );
        assert!(!strict.get("H2.2(ii)").unwrap().pass);
    }

    #[test]
    fn parameter_constraints() {
        let ok = MonotonicityParams {
            beta1: 1.0,
            beta2: 1.0,
            beta3: 1.0,
            mu1: 0.0,
        };
        assert!(ok.validate(MonotonicityForm::Full, 2).is_ok());
        let bad = MonotonicityParams {
            beta1: 1.0,
            beta2: 0.0,
            beta3: 1.0,
            mu1: 1.0,
        };
        assert!(bad.validate(MonotonicityForm::Full, 2).is_err());
        assert!(bad.validate(MonotonicityForm::Full, 1).is_ok());
        let h23 = MonotonicityParams {
            beta1: 0.0,
            beta2: 1.0,
            beta3: 0.0,
            mu1: 0.0,
        };
        assert!(h23.validate(MonotonicityForm::H23, 1).is_ok());
    }
}
