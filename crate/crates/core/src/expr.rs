//! Coefficient expression language: parser, printer and evaluator.
//!
//! Grammar (standard precedence, case-sensitive identifiers):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := ['-'] atom
//! atom   := number | ident | ident '(' args ')' | '(' expr ')'
//! ```
//!
//! Variables are `t`, `x` (alias of `x1`), `x1..xn`, `y`, `z` (alias of `z1`),
//! `z1..zd`, `k`, `q`, `e`. Functions are `abs`, `min`, `max`, `exp`, `sin`,
//! `cos`, `tanh` and `cap1(e) = min(1, |e|)`.

use std::fmt;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    T,
    /// Zero-based forward component.
    X(usize),
    Y,
    /// Zero-based Brownian component.
    Z(usize),
    K,
    Q,
    E,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Abs,
    Min,
    Max,
    Exp,
    Sin,
    Cos,
    Tanh,
    Cap1,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "cap1" => Func::Cap1,
            _ => return None,
        })
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Cap1 => "cap1",
        }
    }
}

/// Abstract syntax tree of a coefficient expression.
#[derive(Clone, Debug, PartialEq)]
pub enum CoefficientExpr {
    Num(f64),
    Var(Var),
    Neg(Box<CoefficientExpr>),
    Add(Box<CoefficientExpr>, Box<CoefficientExpr>),
    Sub(Box<CoefficientExpr>, Box<CoefficientExpr>),
    Mul(Box<CoefficientExpr>, Box<CoefficientExpr>),
    Div(Box<CoefficientExpr>, Box<CoefficientExpr>),
    Call(Func, Vec<CoefficientExpr>),
}

/// Variable bindings for one evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalEnv<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: f64,
    pub z: &'a [f64],
    pub k: f64,
    pub q: f64,
    pub e: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("function `{name}` at offset {offset} takes {expected} argument(s), got {found}")]
    Arity {
        offset: usize,
        name: String,
        expected: usize,
        found: usize,
    },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownIdentifier { offset, .. }
            | ParseError::Arity { offset, .. } => *offset,
        }
    }
}

pub fn cap1(v: f64) -> f64 {
    v.abs().min(1.0)
}

impl CoefficientExpr {
    pub fn num(v: f64) -> Self {
        CoefficientExpr::Num(v)
    }

    pub fn var(v: Var) -> Self {
        CoefficientExpr::Var(v)
    }

    /// Evaluate under `env`. Division by zero follows IEEE semantics; callers
    /// that need finite values check the result.
    pub fn eval(&self, env: &EvalEnv<'_>) -> f64 {
        use CoefficientExpr::*;
        match self {
            Num(v) => *v,
            Var(v) => match v {
                self::Var::T => env.t,
                self::Var::X(i) => env.x[*i],
                self::Var::Y => env.y,
                self::Var::Z(i) => env.z[*i],
                self::Var::K => env.k,
                self::Var::Q => env.q,
                self::Var::E => env.e,
            },
            Neg(a) => -a.eval(env),
            Add(a, b) => a.eval(env) + b.eval(env),
            Sub(a, b) => a.eval(env) - b.eval(env),
            Mul(a, b) => a.eval(env) * b.eval(env),
            Div(a, b) => a.eval(env) / b.eval(env),
            Call(f, args) => {
                let a = args[0].eval(env);
                match f {
                    Func::Abs => a.abs(),
                    Func::Min => a.min(args[1].eval(env)),
                    Func::Max => a.max(args[1].eval(env)),
                    Func::Exp => a.exp(),
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Tanh => a.tanh(),
                    Func::Cap1 => cap1(a),
                }
            }
        }
    }

    /// Distinct variables referenced, sorted.
    pub fn variables(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_vars(&self, out: &mut Vec<Var>) {
        use CoefficientExpr::*;
        match self {
            Num(_) => {}
            Var(v) => out.push(*v),
            Neg(a) => a.collect_vars(out),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    pub fn is_constant(&self) -> bool {
        self.variables().is_empty()
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::T => write!(f, "t"),
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::Y => write!(f, "y"),
            Var::Z(i) => write!(f, "z{}", i + 1),
            Var::K => write!(f, "k"),
            Var::Q => write!(f, "q"),
            Var::E => write!(f, "e"),
        }
    }
}

impl fmt::Display for CoefficientExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use CoefficientExpr::*;
        match self {
            Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => write!(f, "(-{:?})", -v),
            Num(v) => write!(f, "{v:?}"),
            Var(v) => write!(f, "{v}"),
            Neg(a) => match **a {
                Neg(_) => write!(f, "-({a})"),
                _ => write!(f, "-{a}"),
            },
            Add(a, b) => write!(f, "({a} + {b})"),
            Sub(a, b) => write!(f, "({a} - {b})"),
            Mul(a, b) => write!(f, "({a} * {b})"),
            Div(a, b) => write!(f, "({a} / {b})"),
            Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl std::str::FromStr for CoefficientExpr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_expr(s)
    }
}

pub fn parse_expr(text: &str) -> Result<CoefficientExpr, ParseError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    p.skip_ws();
    if p.at_end() {
        return Err(p.syntax("empty expression"));
    }
    let e = p.expr()?;
    p.skip_ws();
    if !p.at_end() {
        return Err(p.syntax("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn syntax(&self, message: &str) -> ParseError {
        let message = if self.at_end() && message.starts_with("expected") {
            format!("{message}, found end of input")
        } else {
            message.to_string()
        };
        ParseError::Syntax {
            offset: self.pos,
            message,
        }
    }

    fn expr(&mut self) -> Result<CoefficientExpr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = CoefficientExpr::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = CoefficientExpr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<CoefficientExpr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = CoefficientExpr::Mul(Box::new(lhs), Box::new(rhs));
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = CoefficientExpr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<CoefficientExpr, ParseError> {
        self.skip_ws();
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let a = self.atom()?;
            return Ok(CoefficientExpr::Neg(Box::new(a)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<CoefficientExpr, ParseError> {
        self.skip_ws();
        match self.peek() {
            None => Err(self.syntax("expected a number, identifier or '('")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.skip_ws();
                if self.peek() != Some(b')') {
                    return Err(self.syntax("expected ')'"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            Some(_) => Err(self.syntax("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<CoefficientExpr, ParseError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            let s = p.pos;
            while matches!(p.peek(), Some(c) if c.is_ascii_digit()) {
                p.pos += 1;
            }
            p.pos - s
        };
        let mut n = digits(self);
        if self.peek() == Some(b'.') {
            self.pos += 1;
            n += digits(self);
        }
        if n == 0 {
            self.pos = start;
            return Err(self.syntax("malformed number"));
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                self.pos = save;
                return Err(self.syntax("malformed exponent"));
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<f64>()
            .map(CoefficientExpr::Num)
            .map_err(|_| ParseError::Syntax {
                offset: start,
                message: format!("malformed number `{text}`"),
            })
    }

    fn ident(&mut self) -> Result<CoefficientExpr, ParseError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        let after_name = self.pos;
        self.skip_ws();
        if self.peek() == Some(b'(') {
            let func = Func::lookup(name).ok_or_else(|| ParseError::UnknownIdentifier {
                offset: start,
                name: name.to_string(),
            })?;
            self.pos += 1;
            let mut args = Vec::new();
            self.skip_ws();
            if self.peek() == Some(b')') {
                self.pos += 1;
            } else {
                loop {
                    args.push(self.expr()?);
                    self.skip_ws();
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {
                            self.pos += 1;
                            break;
                        }
                        _ => return Err(self.syntax("expected ',' or ')'")),
                    }
                }
            }
            if args.len() != func.arity() {
                return Err(ParseError::Arity {
                    offset: start,
                    name: name.to_string(),
                    expected: func.arity(),
                    found: args.len(),
                });
            }
            return Ok(CoefficientExpr::Call(func, args));
        }
        self.pos = after_name;
        lookup_var(name)
            .map(CoefficientExpr::Var)
            .ok_or_else(|| ParseError::UnknownIdentifier {
                offset: start,
                name: name.to_string(),
            })
    }
}

fn lookup_var(name: &str) -> Option<Var> {
    let indexed = |rest: &str| -> Option<usize> {
        if rest.is_empty() || rest.starts_with('0') || !rest.bytes().all(|c| c.is_ascii_digit()) {
            return None;
        }
        rest.parse::<usize>().ok().map(|i| i - 1)
    };
    match name {
        "t" => Some(Var::T),
        "x" => Some(Var::X(0)),
        "y" => Some(Var::Y),
        "z" => Some(Var::Z(0)),
        "k" => Some(Var::K),
        "q" => Some(Var::Q),
        "e" => Some(Var::E),
        _ => {
            if let Some(rest) = name.strip_prefix('x') {
                indexed(rest).map(Var::X)
            } else if let Some(rest) = name.strip_prefix('z') {
                indexed(rest).map(Var::Z)
            } else {
                None
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use CoefficientExpr as E;

    fn b(e: E) -> Box<E> {
        Box::new(e)
    }

    #[test]
    fn parses_precedence() {
        let e = parse_expr("x + 2*y").unwrap();
        assert_eq!(
            e,
            E::Add(
                b(E::Var(Var::X(0))),
                b(E::Mul(b(E::Num(2.0)), b(E::Var(Var::Y))))
            )
        );
    }

    #[test]
    fn parses_cap1_kernel() {
        let e = parse_expr("cap1(e)*(1+abs(x))").unwrap();
        assert_eq!(
            e,
            E::Mul(
                b(E::Call(Func::Cap1, vec![E::Var(Var::E)])),
                b(E::Add(
                    b(E::Num(1.0)),
                    b(E::Call(Func::Abs, vec![E::Var(Var::X(0))]))
                ))
            )
        );
        let env = EvalEnv {
            x: &[-2.0],
            e: 0.25,
            ..Default::default()
        };
        assert_eq!(e.eval(&env), 0.75);
    }

    #[test]
    fn dangling_operator_reports_offset() {
        let err = parse_expr("x +").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { offset: 3, .. }), "{err}");
    }

    #[test]
    fn unknown_identifier_and_arity() {
        assert!(matches!(
            parse_expr("1 + w").unwrap_err(),
            ParseError::UnknownIdentifier { offset: 4, .. }
        ));
        assert!(matches!(
            parse_expr("foo(x)").unwrap_err(),
            ParseError::UnknownIdentifier { offset: 0, .. }
        ));
        assert!(matches!(
            parse_expr("min(x)").unwrap_err(),
            ParseError::Arity {
                expected: 2,
                found: 1,
                ..
            }
        ));
        assert!(matches!(
            parse_expr("x0").unwrap_err(),
            ParseError::UnknownIdentifier { .. }
        ));
        assert!(parse_expr("").is_err());
        assert!(parse_expr("x y").is_err());
        assert!(parse_expr("(x").is_err());
    }

    #[test]
    fn indexed_variables_and_numbers() {
        assert_eq!(parse_expr("x3").unwrap(), E::Var(Var::X(2)));
        assert_eq!(parse_expr("z2").unwrap(), E::Var(Var::Z(1)));
        assert_eq!(parse_expr("1.5e-3").unwrap(), E::Num(1.5e-3));
        assert_eq!(parse_expr(".5").unwrap(), E::Num(0.5));
        assert_eq!(
            parse_expr("-x*y").unwrap(),
            E::Mul(b(E::Neg(b(E::Var(Var::X(0))))), b(E::Var(Var::Y)))
        );
    }

    #[test]
    fn evaluates_all_functions() {
        let env = EvalEnv {
            t: 0.5,
            x: &[1.0, 2.0],
            y: -3.0,
            z: &[0.5],
            k: 4.0,
            q: 2.0,
            e: -0.3,
        };
        let v = |s: &str| parse_expr(s).unwrap().eval(&env);
        assert_eq!(v("t + x2 - y"), 5.5);
        assert_eq!(v("min(x1, y) + max(k, q)"), 1.0);
        assert_eq!(v("cap1(e)"), 0.3);
        assert_eq!(v("cap1(k)"), 1.0);
        assert_eq!(v("exp(0) + sin(0) + cos(0) + tanh(0)"), 2.0);
        assert_eq!(v("k / q / z"), 4.0);
        assert!(v("1/(x1-1)").is_infinite());
    }

    fn arb_expr() -> impl Strategy<Value = String> {
        let leaf = prop_oneof![
            Just("x".to_string()),
            Just("y".to_string()),
            Just("z1".to_string()),
            Just("t".to_string()),
            Just("k".to_string()),
            Just("q".to_string()),
            Just("e".to_string()),
            (0u32..1000).prop_map(|n| format!("{}", f64::from(n) / 8.0)),
        ];
        leaf.prop_recursive(4, 32, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("{a} + {b}")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("{a} - {b}")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("{a}*{b}")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a})/({b})")),
                inner.clone().prop_map(|a| format!("-({a})")),
                inner.clone().prop_map(|a| format!("tanh({a})")),
                inner.clone().prop_map(|a| format!("cap1({a})")),
                (inner.clone(), inner).prop_map(|(a, b)| format!("max({a}, {b})")),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_roundtrip(src in arb_expr()) {
            let ast = parse_expr(&src).unwrap();
            let printed = ast.to_string();
            let reparsed = parse_expr(&printed).unwrap();
            prop_assert_eq!(ast, reparsed);
        }
    }
}
