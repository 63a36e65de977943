//! JSON model files and the builtin benchmark fixtures.

use serde::{Deserialize, Serialize};

use super::validate::{Assumption, MonotonicityForm, MonotonicityParams, SampleBox};
use super::{c_tilde_h, CoefficientSet, DeclaredConstants, Model, ModelError};
use crate::expr::{parse_expr, CoefficientExpr};
use crate::mark_space::MarkSpace;

const BUILTINS: &[(&str, &str)] = &[
    ("T0", include_str!("../../models/T0.json")),
    ("T1", include_str!("../../models/T1.json")),
    ("T2", include_str!("../../models/T2.json")),
    ("T3", include_str!("../../models/T3.json")),
    ("T3-neg", include_str!("../../models/T3-neg.json")),
    ("T3-shift", include_str!("../../models/T3-shift.json")),
];

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTINS.iter().map(|(n, _)| *n)
}

/// Raw text of a builtin fixture.
pub fn builtin_source(alias: &str) -> Option<&'static str> {
    BUILTINS.iter().find(|(n, _)| *n == alias).map(|(_, s)| *s)
}

/// Load a builtin model by alias (`T0`..`T3`, `T3-neg`, `T3-shift`).
pub fn builtin(alias: &str) -> Result<Model, ModelError> {
    let src = builtin_source(alias).ok_or_else(|| ModelError::UnknownBuiltin(alias.into()))?;
    ModelFile::from_json_str(src)?.build()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsDoc {
    #[serde(default)]
    pub lipschitz: Option<f64>,
    #[serde(default)]
    pub growth: Option<f64>,
    #[serde(default)]
    pub l_sigma: Option<f64>,
    #[serde(default)]
    pub l_h: Option<Vec<f64>>,
    #[serde(default)]
    pub c_h: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonotonicityDoc {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub mu1: f64,
    #[serde(default)]
    pub form: MonotonicityForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleBoxDoc {
    #[serde(default = "neg5")]
    pub lo: f64,
    #[serde(default = "pos5")]
    pub hi: f64,
    #[serde(default)]
    pub t_lo: f64,
    #[serde(default = "unit")]
    pub t_hi: f64,
}

fn neg5() -> f64 {
    -5.0
}
fn pos5() -> f64 {
    5.0
}
fn unit() -> f64 {
    1.0
}
fn default_samples() -> usize {
    10_000
}

/// Initial state: a single point or a uniform box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ZetaDoc {
    Point { point: Vec<f64> },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

/// On-disk model document. Expressions are strings in the coefficient grammar.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default)]
    pub name: Option<String>,
    pub n: usize,
    pub d: usize,
    pub b: Vec<String>,
    pub sigma: Vec<Vec<String>>,
    pub h: Vec<String>,
    pub f: String,
    pub phi: String,
    #[serde(default, rename = "G")]
    pub g_matrix: Option<Vec<Vec<f64>>>,
    pub marks: MarkSpace,
    #[serde(default)]
    pub constants: ConstantsDoc,
    #[serde(default)]
    pub monotonicity: Option<MonotonicityDoc>,
    #[serde(default, rename = "box")]
    pub sample_box: Option<SampleBoxDoc>,
    #[serde(default)]
    pub zeta: Option<ZetaDoc>,
    #[serde(default)]
    pub assumptions: Option<Vec<Assumption>>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn line_col_to_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len();
    }
    text.len()
}

impl ModelFile {
    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        // Syntax first, so malformed input reports a byte offset
        if let Err(e) = serde_json::from_str::<serde_json::Value>(text) {
            return Err(ModelError::Json {
                offset: line_col_to_offset(text, e.line(), e.column()),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            });
        }
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ModelError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        match std::str::from_utf8(bytes) {
            Ok(s) => Self::from_json_str(s),
            Err(e) => Err(ModelError::Json {
                offset: e.valid_up_to(),
                line: 0,
                column: 0,
                message: "invalid UTF-8".into(),
            }),
        }
    }

    pub fn build(&self) -> Result<Model, ModelError> {
        let parse = |field: String, s: &str| -> Result<CoefficientExpr, ModelError> {
            parse_expr(s).map_err(|source| ModelError::Expr { field, source })
        };
        let b = self
            .b
            .iter()
            .enumerate()
            .map(|(i, s)| parse(format!("b[{i}]"), s))
            .collect::<Result<Vec<_>, _>>()?;
        if self.sigma.len() != self.n {
            return Err(ModelError::Shape {
                field: "sigma".into(),
                expected: self.n,
                found: self.sigma.len(),
            });
        }
        let mut sigma = Vec::with_capacity(self.n * self.d);
        for (r, row) in self.sigma.iter().enumerate() {
            if row.len() != self.d {
                return Err(ModelError::Shape {
                    field: format!("sigma[{r}]"),
                    expected: self.d,
                    found: row.len(),
                });
            }
            for (c, s) in row.iter().enumerate() {
                sigma.push(parse(format!("sigma[{r}][{c}]"), s)?);
            }
        }
        let h = self
            .h
            .iter()
            .enumerate()
            .map(|(i, s)| parse(format!("h[{i}]"), s))
            .collect::<Result<Vec<_>, _>>()?;
        let f = parse("f".into(), &self.f)?;
        let phi = parse("phi".into(), &self.phi)?;
        let g_matrix = match &self.g_matrix {
            None => vec![1.0; self.n],
            Some(rows) => {
                if rows.len() != 1 {
                    return Err(ModelError::Shape {
                        field: "G".into(),
                        expected: 1,
                        found: rows.len(),
                    });
                }
                rows[0].clone()
            }
        };
        let marks = self.marks.clone();
        let c = &self.constants;
        if let Some(l_h) = &c.l_h {
            if l_h.len() != marks.len() {
                return Err(ModelError::Shape {
                    field: "constants.l_h".into(),
                    expected: marks.len(),
                    found: l_h.len(),
                });
            }
            if l_h.iter().any(|v| !(*v >= 0.0)) {
                return Err(ModelError::Constant {
                    name: "l_h".into(),
                    reason: "entries must be nonnegative".into(),
                });
            }
        }
        let c_h = match (&c.l_h, c.c_h) {
            (Some(l_h), Some(declared)) => {
                let computed = c_tilde_h(l_h, &marks);
                if (computed - declared).abs() > 1e-12 {
                    return Err(ModelError::Constant {
                        name: "c_h".into(),
                        reason: format!(
                            "declared {declared} but max(sup L_h^2, sum L_h^2 w) = {computed}"
                        ),
                    });
                }
                Some(declared)
            }
            (Some(l_h), None) => Some(c_tilde_h(l_h, &marks)),
            (None, declared) => declared,
        };
        let constants = DeclaredConstants {
            lipschitz: c.lipschitz,
            growth: c.growth,
            l_sigma: c.l_sigma,
            l_h: c.l_h.clone(),
            c_h,
        };
        let name = self.name.clone().unwrap_or_else(|| "model".into());
        let coeffs = CoefficientSet::new(
            name, self.n, self.d, b, sigma, h, f, phi, g_matrix, constants,
        )?;
        let sample_box = match &self.sample_box {
            Some(b) => SampleBox {
                lo: b.lo,
                hi: b.hi,
                t_lo: b.t_lo,
                t_hi: b.t_hi,
            },
            None => SampleBox::default(),
        };
        if !(sample_box.lo < sample_box.hi) || !(sample_box.t_lo <= sample_box.t_hi) {
            return Err(ModelError::Schema {
                path: "box".into(),
                message: "lower bounds must not exceed upper bounds".into(),
            });
        }
        if let Some(z) = &self.zeta {
            let ok = match z {
                ZetaDoc::Point { point } => point.len() == self.n,
                ZetaDoc::Box { lo, hi } => {
                    lo.len() == self.n
                        && hi.len() == self.n
                        && lo.iter().zip(hi).all(|(a, b)| a <= b)
                }
            };
            if !ok {
                return Err(ModelError::Schema {
                    path: "zeta".into(),
                    message: format!("needs {} coordinates with lo <= hi", self.n),
                });
            }
        }
        let monotonicity = self.monotonicity.as_ref().map(|m| {
            (
                MonotonicityParams {
                    beta1: m.beta1,
                    beta2: m.beta2,
                    beta3: m.beta3,
                    mu1: m.mu1,
                },
                m.form,
            )
        });
        if let Some((p, _)) = &monotonicity {
            if [p.beta1, p.beta2, p.beta3, p.mu1]
                .iter()
                .any(|v| !(*v >= 0.0))
            {
                return Err(ModelError::Monotonicity(
                    "beta1, beta2, beta3, mu1 must be nonnegative".into(),
                ));
            }
        }
        Ok(Model {
            coeffs,
            marks,
            sample_box,
            zeta: self.zeta.clone(),
            monotonicity,
            assumptions: self
                .assumptions
                .clone()
                .unwrap_or_else(|| Assumption::DEFAULT.to_vec()),
            samples: self.samples.max(1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtins_load() {
        for name in builtin_names() {
            let m = builtin(name).unwrap();
            assert_eq!(m.coeffs.name, name);
        }
        let t0 = builtin("T0").unwrap();
        assert_eq!(t0.coeffs.terminal(&[0.3]), 0.3);
        assert!(t0.coeffs.b_exprs()[0].is_constant());
        assert!(matches!(builtin("T9"), Err(ModelError::UnknownBuiltin(_))));
    }

    #[test]
    fn t3_declares_constants() {
        let t3 = builtin("T3").unwrap();
        let c = &t3.coeffs.constants;
        assert_eq!(c.l_sigma, Some(0.05));
        assert_eq!(c.lipschitz, Some(1.0));
        assert_eq!(t3.marks.rho_scale(), 0.1);
    }

    #[test]
    fn malformed_json_reports_offset() {
        let text = "{\"n\": 1,\n \"d\": }";
        match ModelFile::from_json_str(text) {
            Err(ModelError::Json { offset, line, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(&text[offset..offset + 1], "}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_violation_names_field_path() {
        let text = r#"{"n":1,"d":1,"b":["0"],"sigma":[["0"]],"h":["0"],"f":"0","phi":"x",
            "marks":{"atoms":[{"e":0.5,"w":-1.0}]}}"#;
        match ModelFile::from_json_str(text) {
            Err(ModelError::Schema { path, .. }) => assert!(path.starts_with("marks"), "{path}"),
            other => panic!("unexpected {other:?}"),
        }
        let text = r#"{"n":"one","d":1}"#;
        match ModelFile::from_json_str(text) {
            Err(ModelError::Schema { path, .. }) => assert_eq!(path, "n"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn expression_errors_carry_offset() {
        let text = r#"{"n":1,"d":1,"b":["x +"],"sigma":[["0"]],"h":["0"],"f":"0","phi":"x",
            "marks":{"atoms":[{"e":0.5,"w":1.0}]}}"#;
        match ModelFile::from_json_str(text).unwrap().build() {
            Err(ModelError::Expr { field, source }) => {
                assert_eq!(field, "b[0]");
                assert_eq!(source.offset(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn c_h_must_match_declaration() {
        let text = r#"{"n":1,"d":1,"b":["0"],"sigma":[["0"]],"h":["0"],"f":"0","phi":"x",
            "marks":{"atoms":[{"e":0.5,"w":2.0}]},
            "constants":{"l_h":[0.1],"c_h":0.5}}"#;
        assert!(matches!(
            ModelFile::from_json_str(text).unwrap().build(),
            Err(ModelError::Constant { .. })
        ));
        let ok = text.replace("0.5}}", "0.02}}");
        let m = ModelFile::from_json_str(&ok).unwrap().build().unwrap();
        assert!((m.coeffs.constants.c_h.unwrap() - 0.02).abs() < 1e-15);
    }
}
