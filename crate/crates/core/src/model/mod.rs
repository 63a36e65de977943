//! Coefficient model `(b, σ, h, f, Φ)` with the matrix `G`, declared
//! constants, the derived driver `g`, the stacked vector `A(t, π, k)` and
//! sampled assumption validators.
//!
//! Shapes: forward dimension `n`, Brownian dimension `d`, scalar backward
//! component (`m = 1`). `σ` is `n × d` (row-major), `h` has `n` components per
//! mark, `G` is `1 × n`.

mod file;
mod validate;

use thiserror::Error;

pub use file::{builtin, builtin_names, builtin_source, ModelFile, SampleBoxDoc, ZetaDoc};
pub use validate::{
    check_lipschitz_growth, check_monotonicity, Assumption, AssumptionCheck, AssumptionReport,
    MonotonicityForm, MonotonicityParams, SampleBox,
};

use crate::expr::{CoefficientExpr, EvalEnv, ParseError, Var};
use crate::mark_space::{MarkError, MarkSpace};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{field}: {source}")]
    Expr {
        field: String,
        #[source]
        source: ParseError,
    },
    #[error("{field}: variable `{var}` is not allowed here")]
    Variable { field: String, var: String },
    #[error("{field}: expected {expected} entries, found {found}")]
    Shape {
        field: String,
        expected: usize,
        found: usize,
    },
    #[error("G must be a nonzero 1 x n matrix")]
    RankDeficientG,
    #[error("declared constant {name} is invalid: {reason}")]
    Constant { name: String, reason: String },
    #[error("marks: {0}")]
    Marks(#[from] MarkError),
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("malformed JSON at byte offset {offset} (line {line}, column {column}): {message}")]
    Json {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown builtin model `{0}`")]
    UnknownBuiltin(String),
    #[error("monotonicity parameters: {0}")]
    Monotonicity(String),
}

/// Lipschitz and growth constants declared with a model.
#[derive(Clone, Debug, PartialEq)]
pub struct DeclaredConstants {
    /// Global Lipschitz constant `K`.
    pub lipschitz: Option<f64>,
    /// Linear-growth constant `L`.
    pub growth: Option<f64>,
    /// `L_σ`: Lipschitz constant of `σ` in `(z, k)`.
    pub l_sigma: Option<f64>,
    /// `L_h(e_j)` per atom.
    pub l_h: Option<Vec<f64>>,
    /// `C̃_h = max(sup_j L_h(e_j)², Σ_j L_h(e_j)² w_j)`.
    pub c_h: Option<f64>,
}

impl DeclaredConstants {
    pub fn undeclared() -> Self {
        DeclaredConstants {
            lipschitz: None,
            growth: None,
            l_sigma: None,
            l_h: None,
            c_h: None,
        }
    }
}

/// `C̃_h` from a per-atom `L_h` table.
pub fn c_tilde_h(l_h: &[f64], ms: &MarkSpace) -> f64 {
    let sup = l_h.iter().map(|v| v * v).fold(0.0, f64::max);
    let int: f64 = l_h.iter().zip(ms.weights()).map(|(v, w)| v * v * w).sum();
    sup.max(int)
}

/// Arguments of one coefficient evaluation. `k` holds one entry per atom and
/// `q = Σ_j k_j l(e_j) w_j` is its reduction.
#[derive(Clone, Copy, Debug)]
pub struct Point<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: f64,
    pub z: &'a [f64],
    pub k: &'a [f64],
    pub q: f64,
}

/// The coefficient tuple. Immutable after construction.
#[derive(Clone, Debug)]
pub struct CoefficientSet {
    pub name: String,
    n: usize,
    d: usize,
    b: Vec<CoefficientExpr>,
    sigma: Vec<CoefficientExpr>,
    h: Vec<CoefficientExpr>,
    f: CoefficientExpr,
    phi: CoefficientExpr,
    g_matrix: Vec<f64>,
    pub constants: DeclaredConstants,
}

/// Where an expression is used; decides which variables it may reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExprRole {
    /// `b`, `σ`, `f`: `k` is read as the reduction `q`.
    Coefficient,
    /// `h`: may also use `e`; `k` is the per-atom value.
    Jump,
    /// `Φ`: only `x`.
    Terminal,
}

pub(crate) fn check_vars(
    field: &str,
    expr: &CoefficientExpr,
    role: ExprRole,
    n: usize,
    d: usize,
) -> Result<(), ModelError> {
    for v in expr.variables() {
        let ok = match v {
            Var::X(i) => i < n,
            Var::Z(i) => i < d && role != ExprRole::Terminal,
            Var::E => role == ExprRole::Jump,
            Var::T | Var::Y | Var::K | Var::Q => role != ExprRole::Terminal,
        };
        if !ok {
            return Err(ModelError::Variable {
                field: field.to_string(),
                var: v.to_string(),
            });
        }
    }
    Ok(())
}

impl CoefficientSet {
    /// Assemble and check shapes and variable usage.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        n: usize,
        d: usize,
        b: Vec<CoefficientExpr>,
        sigma: Vec<CoefficientExpr>,
        h: Vec<CoefficientExpr>,
        f: CoefficientExpr,
        phi: CoefficientExpr,
        g_matrix: Vec<f64>,
        constants: DeclaredConstants,
    ) -> Result<Self, ModelError> {
        let shape = |field: &str, expected: usize, found: usize| {
            if expected != found {
                Err(ModelError::Shape {
                    field: field.to_string(),
                    expected,
                    found,
                })
            } else {
                Ok(())
            }
        };
        if n == 0 {
            return Err(ModelError::Shape {
                field: "n".into(),
                expected: 1,
                found: 0,
            });
        }
        shape("b", n, b.len())?;
        shape("sigma", n * d, sigma.len())?;
        shape("h", n, h.len())?;
        shape("G", n, g_matrix.len())?;
        if g_matrix.iter().all(|v| *v == 0.0) || g_matrix.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::RankDeficientG);
        }
        for (i, e) in b.iter().enumerate() {
            check_vars(&format!("b[{i}]"), e, ExprRole::Coefficient, n, d)?;
        }
        for (i, e) in sigma.iter().enumerate() {
            check_vars(
                &format!("sigma[{}][{}]", i / d.max(1), i % d.max(1)),
                e,
                ExprRole::Coefficient,
                n,
                d,
            )?;
        }
        for (i, e) in h.iter().enumerate() {
            check_vars(&format!("h[{i}]"), e, ExprRole::Jump, n, d)?;
        }
        check_vars("f", &f, ExprRole::Coefficient, n, d)?;
        check_vars("phi", &phi, ExprRole::Terminal, n, d)?;
        for (name, v) in [
            ("lipschitz", constants.lipschitz),
            ("growth", constants.growth),
            ("l_sigma", constants.l_sigma),
            ("c_h", constants.c_h),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0) {
                    return Err(ModelError::Constant {
                        name: name.into(),
                        reason: format!("must be nonnegative, got {v}"),
                    });
                }
            }
        }
        Ok(CoefficientSet {
            name: name.into(),
            n,
            d,
            b,
            sigma,
            h,
            f,
            phi,
            g_matrix,
            constants,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn g_matrix(&self) -> &[f64] {
        &self.g_matrix
    }

    pub fn b_exprs(&self) -> &[CoefficientExpr] {
        &self.b
    }

    pub fn sigma_exprs(&self) -> &[CoefficientExpr] {
        &self.sigma
    }

    pub fn h_exprs(&self) -> &[CoefficientExpr] {
        &self.h
    }

    pub fn f_expr(&self) -> &CoefficientExpr {
        &self.f
    }

    pub fn phi_expr(&self) -> &CoefficientExpr {
        &self.phi
    }

    /// Same model with a different terminal function.
    pub fn with_phi(&self, phi: CoefficientExpr) -> Result<Self, ModelError> {
        check_vars("phi", &phi, ExprRole::Terminal, self.n, self.d)?;
        let mut out = self.clone();
        out.phi = phi;
        Ok(out)
    }

    /// Same model with different `b` entries.
    pub fn with_b(&self, b: Vec<CoefficientExpr>) -> Result<Self, ModelError> {
        if b.len() != self.n {
            return Err(ModelError::Shape {
                field: "b".into(),
                expected: self.n,
                found: b.len(),
            });
        }
        for (i, e) in b.iter().enumerate() {
            check_vars(&format!("b[{i}]"), e, ExprRole::Coefficient, self.n, self.d)?;
        }
        let mut out = self.clone();
        out.b = b;
        Ok(out)
    }

    fn env<'a>(p: &Point<'a>) -> EvalEnv<'a> {
        EvalEnv {
            t: p.t,
            x: p.x,
            y: p.y,
            z: p.z,
            k: p.q,
            q: p.q,
            e: 0.0,
        }
    }

    pub fn drift(&self, p: &Point<'_>, out: &mut [f64]) {
        let env = Self::env(p);
        for (o, e) in out.iter_mut().zip(&self.b) {
            *o = e.eval(&env);
        }
    }

    /// `σ` as an `n × d` row-major block.
    pub fn diffusion(&self, p: &Point<'_>, out: &mut [f64]) {
        let env = Self::env(p);
        for (o, e) in out.iter_mut().zip(&self.sigma) {
            *o = e.eval(&env);
        }
    }

    /// `h(t, x, y, z, k_j, e_j)` for atom `atom`.
    pub fn jump(&self, p: &Point<'_>, atom: usize, mark: f64, out: &mut [f64]) {
        let env = EvalEnv {
            t: p.t,
            x: p.x,
            y: p.y,
            z: p.z,
            k: p.k.get(atom).copied().unwrap_or(0.0),
            q: p.q,
            e: mark,
        };
        for (o, e) in out.iter_mut().zip(&self.h) {
            *o = e.eval(&env);
        }
    }

    /// `f(t, x, y, z, q)` with the reduction supplied in `p.q`.
    pub fn f_value(&self, p: &Point<'_>) -> f64 {
        self.f.eval(&Self::env(p))
    }

    pub fn terminal(&self, x: &[f64]) -> f64 {
        self.phi.eval(&EvalEnv {
            x,
            ..Default::default()
        })
    }

    /// True when `b`, `σ` and `h` ignore `(y, z, k, q)` so the forward
    /// equation is not coupled to the backward one.
    pub fn is_decoupled(&self) -> bool {
        let forward_free = |e: &CoefficientExpr| {
            e.variables()
                .iter()
                .all(|v| !matches!(v, Var::Y | Var::Z(_) | Var::K | Var::Q))
        };
        self.b.iter().all(forward_free)
            && self.sigma.iter().all(forward_free)
            && self.h.iter().all(forward_free)
    }

    /// True when `b`, `σ`, `h` are free of `k`/`q` (the comparison-theorem class).
    pub fn forward_free_of_k(&self) -> bool {
        let free =
            |e: &CoefficientExpr| e.variables().iter().all(|v| !matches!(v, Var::K | Var::Q));
        self.b.iter().all(free) && self.sigma.iter().all(free) && self.h.iter().all(free)
    }

    /// True when `b`, `σ`, `h` are free of `y`.
    pub fn forward_free_of_y(&self) -> bool {
        let free = |e: &CoefficientExpr| !e.variables().contains(&Var::Y);
        self.b.iter().all(free) && self.sigma.iter().all(free) && self.h.iter().all(free)
    }

    /// True when `f` does not reference `y`.
    pub fn f_free_of_y(&self) -> bool {
        !self.f.variables().contains(&Var::Y)
    }
}

/// Coefficients together with their mark space.
#[derive(Clone, Debug)]
pub struct Model {
    pub coeffs: CoefficientSet,
    pub marks: MarkSpace,
    pub sample_box: SampleBox,
    pub zeta: Option<ZetaDoc>,
    pub monotonicity: Option<(MonotonicityParams, MonotonicityForm)>,
    pub assumptions: Vec<Assumption>,
    pub samples: usize,
}

impl Model {
    /// Sampled checks of the declared assumptions and, when parameters are
    /// given, of the monotonicity condition.
    pub fn validate(&self, seed: u64) -> AssumptionReport {
        let mut report = check_lipschitz_growth(
            &self.coeffs,
            &self.marks,
            &self.assumptions,
            &self.sample_box,
            self.samples,
            seed,
        );
        if let Some((params, form)) = &self.monotonicity {
            report.extend(check_monotonicity(
                &self.coeffs,
                &self.marks,
                params,
                *form,
                &self.sample_box,
                self.samples,
                seed,
            ));
        }
        report
    }
}

/// `g(t, x, y, z, k) = f(t, x, y, z, Σ_j k_j l(e_j) w_j)`.
pub fn derive_g<'a>(
    cs: &'a CoefficientSet,
    ms: &'a MarkSpace,
) -> impl Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + 'a {
    move |t, x, y, z, k| {
        let q = ms.reduce_k(k);
        cs.f_value(&Point { t, x, y, z, k, q })
    }
}

/// `A(t, π, k) = (−Gᵀg, Gb, Gσ)` laid out as `n + 1 + d` entries.
pub fn assemble_a(
    cs: &CoefficientSet,
    ms: &MarkSpace,
    t: f64,
    x: &[f64],
    y: f64,
    z: &[f64],
    k: &[f64],
) -> Vec<f64> {
    let n = cs.n();
    let d = cs.d();
    let q = ms.reduce_k(k);
    let p = Point { t, x, y, z, k, q };
    let g = cs.f_value(&p);
    let gm = cs.g_matrix();
    let mut b = vec![0.0; n];
    let mut s = vec![0.0; n * d];
    cs.drift(&p, &mut b);
    cs.diffusion(&p, &mut s);
    let mut out = Vec::with_capacity(n + 1 + d);
    out.extend(gm.iter().map(|gi| -gi * g));
    out.push(gm.iter().zip(&b).map(|(gi, bi)| gi * bi).sum());
    for c in 0..d {
        out.push((0..n).map(|r| gm[r] * s[r * d + c]).sum());
    }
    out
}
