//! Closed-form scalar expressions for problem coefficients.
//!
//! Every data field of a problem specification (diffusion matrix entries,
//! drift components, discount rate, running payoff, terminal payoffs,
//! switching costs, jump maps) is a small expression tree in the variables
//! `x0`, `x1` (space), `t` (time) and `z0`, `z1` (jump mark). Keeping the
//! fields as data rather than opaque callbacks makes problem files
//! serializable, lets validation sample them deterministically, and allows
//! exact symbolic differentiation where boundary rules need derivatives.
//!
//! The JSON form accepts three shapes, and serializes back to the same:
//!
//! ```text
//! 2.5                      constant
//! "x0"                     variable ("x" and "z" alias "x0" and "z0")
//! {"mul": ["x0", "x0"]}    operator applied to a list (or single) operand
//! ```

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

/// A variable an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// Spatial coordinate `x{k}`.
    X(usize),
    /// Time `t`.
    T,
    /// Jump-mark coordinate `z{k}`.
    Z(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::X(k) => write!(f, "x{k}"),
            Var::T => write!(f, "t"),
            Var::Z(k) => write!(f, "z{k}"),
        }
    }
}

impl Var {
    fn parse(name: &str) -> Option<Var> {
        match name {
            "t" => Some(Var::T),
            "x" => Some(Var::X(0)),
            "z" => Some(Var::Z(0)),
            _ => {
                let (head, idx) = name.split_at(1);
                let k: usize = idx.parse().ok()?;
                match head {
                    "x" => Some(Var::X(k)),
                    "z" => Some(Var::Z(k)),
                    _ => None,
                }
            }
        }
    }
}

/// Evaluation point for an expression. Slices hold as many coordinates as
/// the problem dimension requires; out-of-range variable references are
/// caught by [`Expr::check_vars`] before any evaluation loop runs.
#[derive(Debug, Clone, Copy)]
pub struct EvalPoint<'a> {
    pub x: &'a [f64],
    pub t: f64,
    pub z: &'a [f64],
}

impl<'a> EvalPoint<'a> {
    pub fn xt(x: &'a [f64], t: f64) -> Self {
        EvalPoint { x, t, z: &[] }
    }

    fn get(&self, v: Var) -> f64 {
        match v {
            Var::X(k) => self.x.get(k).copied().unwrap_or(f64::NAN),
            Var::T => self.t,
            Var::Z(k) => self.z.get(k).copied().unwrap_or(f64::NAN),
        }
    }
}

/// Expression tree. `Add`/`Mul`/`Min`/`Max` are n-ary; the rest unary or
/// binary. `Pow` is restricted to integer exponents so expressions stay
/// real-valued on all of `R^n`.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Add(Vec<Expr>),
    Mul(Vec<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, i32),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Sqrt(Box<Expr>),
    Abs(Box<Expr>),
    /// Sign function with `sign(0) = 0`; appears in derivatives of `Abs`.
    Sign(Box<Expr>),
    Min(Vec<Expr>),
    Max(Vec<Expr>),
}

impl Expr {
    pub fn zero() -> Expr {
        Expr::Const(0.0)
    }

    pub fn constant(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(Var::parse(name).unwrap_or_else(|| panic!("unknown variable `{name}`")))
    }

    /// Evaluate at a point. Never panics; ill-posed operations surface as
    /// non-finite values, which validation and grid assembly reject with a
    /// pointer to the offending field.
    pub fn eval(&self, p: &EvalPoint) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => p.get(*v),
            Expr::Add(es) => es.iter().map(|e| e.eval(p)).sum(),
            Expr::Mul(es) => es.iter().map(|e| e.eval(p)).product(),
            Expr::Sub(a, b) => a.eval(p) - b.eval(p),
            Expr::Div(a, b) => a.eval(p) / b.eval(p),
            Expr::Neg(e) => -e.eval(p),
            Expr::Pow(e, k) => e.eval(p).powi(*k),
            Expr::Sin(e) => e.eval(p).sin(),
            Expr::Cos(e) => e.eval(p).cos(),
            Expr::Exp(e) => e.eval(p).exp(),
            Expr::Log(e) => e.eval(p).ln(),
            Expr::Sqrt(e) => e.eval(p).sqrt(),
            Expr::Abs(e) => e.eval(p).abs(),
            Expr::Sign(e) => {
                let v = e.eval(p);
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Expr::Min(es) => es.iter().map(|e| e.eval(p)).fold(f64::INFINITY, f64::min),
            Expr::Max(es) => es
                .iter()
                .map(|e| e.eval(p))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Check that all variable references fit the given space dimension `n`
    /// and mark dimension `ell`, and whether `t`/`z` are allowed at all.
    pub fn check_vars(&self, n: usize, allow_t: bool, ell: Option<usize>) -> Result<(), String> {
        let mut bad = None;
        self.visit(&mut |e| {
            if let Expr::Var(v) = e {
                let ok = match *v {
                    Var::X(k) => k < n,
                    Var::T => allow_t,
                    Var::Z(k) => ell.map(|l| k < l).unwrap_or(false),
                };
                if !ok && bad.is_none() {
                    bad = Some(*v);
                }
            }
        });
        match bad {
            None => Ok(()),
            Some(v) => Err(format!("variable `{v}` not available in this field")),
        }
    }

    /// True if the expression reads a spatial coordinate or the time
    /// variable, as opposed to jump marks and constants only. Lets callers
    /// hoist evaluations out of per-state loops.
    pub fn depends_on_state(&self) -> bool {
        let mut found = false;
        self.visit(&mut |e| {
            if let Expr::Var(Var::X(_) | Var::T) = e {
                found = true;
            }
        });
        found
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Const(_) | Expr::Var(_) => {}
            Expr::Add(es) | Expr::Mul(es) | Expr::Min(es) | Expr::Max(es) => {
                for e in es {
                    e.visit(f);
                }
            }
            Expr::Sub(a, b) | Expr::Div(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Expr::Neg(e)
            | Expr::Pow(e, _)
            | Expr::Sin(e)
            | Expr::Cos(e)
            | Expr::Exp(e)
            | Expr::Log(e)
            | Expr::Sqrt(e)
            | Expr::Abs(e)
            | Expr::Sign(e) => e.visit(f),
        }
    }

    /// Exact partial derivative with respect to `var`, with light constant
    /// folding. `Abs` differentiates to `Sign` (zero at the kink) and
    /// `Min`/`Max` pick the active branch through `Sign`, so derivatives are
    /// correct wherever the expression is differentiable.
    pub fn diff(&self, var: Var) -> Expr {
        use Expr::*;
        let d = |e: &Expr| e.diff(var);
        match self {
            Const(_) => Expr::zero(),
            Var(v) => {
                if *v == var {
                    Const(1.0)
                } else {
                    Expr::zero()
                }
            }
            Add(es) => simplify_add(es.iter().map(d).collect()),
            Sub(a, b) => simplify_sub(d(a), d(b)),
            Neg(e) => simplify_neg(d(e)),
            Mul(es) => {
                let mut terms = Vec::new();
                for (i, _) in es.iter().enumerate() {
                    let mut factors: Vec<Expr> = Vec::with_capacity(es.len());
                    for (j, e) in es.iter().enumerate() {
                        factors.push(if i == j { d(e) } else { e.clone() });
                    }
                    terms.push(simplify_mul(factors));
                }
                simplify_add(terms)
            }
            Div(a, b) => {
                // (a/b)' = a'/b - a b' / b^2
                let t1 = Div(Box::new(d(a)), b.clone());
                let t2 = Div(
                    Box::new(simplify_mul(vec![a.as_ref().clone(), d(b)])),
                    Box::new(Pow(b.clone(), 2)),
                );
                simplify_sub(t1, t2)
            }
            Pow(e, k) => {
                if *k == 0 {
                    Expr::zero()
                } else {
                    simplify_mul(vec![
                        Const(f64::from(*k)),
                        Pow(e.clone(), *k - 1),
                        d(e),
                    ])
                }
            }
            Sin(e) => simplify_mul(vec![Cos(e.clone()), d(e)]),
            Cos(e) => simplify_neg(simplify_mul(vec![Sin(e.clone()), d(e)])),
            Exp(e) => simplify_mul(vec![Exp(e.clone()), d(e)]),
            Log(e) => Div(Box::new(d(e)), e.clone()),
            Sqrt(e) => Div(
                Box::new(d(e)),
                Box::new(simplify_mul(vec![Const(2.0), Sqrt(e.clone())])),
            ),
            Abs(e) => simplify_mul(vec![Sign(e.clone()), d(e)]),
            Sign(_) => Expr::zero(),
            Min(es) => branch_derivative(es, var, true),
            Max(es) => branch_derivative(es, var, false),
        }
    }

    pub fn is_const_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }
}

/// Derivative of an n-ary min/max built as a chain of binary selections:
/// `min(a, b)' = a'` where `a` is active, switching via `sign(a - b)`.
fn branch_derivative(es: &[Expr], var: Var, is_min: bool) -> Expr {
    assert!(!es.is_empty(), "empty min/max");
    let mut acc = es[0].clone();
    let mut acc_d = es[0].diff(var);
    for e in &es[1..] {
        let e_d = e.diff(var);
        // s = sign(acc - e); for min: acc active when s <= 0.
        let s = Expr::Sign(Box::new(Expr::Sub(
            Box::new(acc.clone()),
            Box::new(e.clone()),
        )));
        let (w_acc, w_e) = if is_min {
            // weight_acc = (1 - s)/2, weight_e = (1 + s)/2
            (
                half_weight(s.clone(), -1.0),
                half_weight(s.clone(), 1.0),
            )
        } else {
            (half_weight(s.clone(), 1.0), half_weight(s, -1.0))
        };
        acc_d = simplify_add(vec![
            simplify_mul(vec![w_acc, acc_d]),
            simplify_mul(vec![w_e, e_d]),
        ]);
        acc = if is_min {
            Expr::Min(vec![acc, e.clone()])
        } else {
            Expr::Max(vec![acc, e.clone()])
        };
    }
    acc_d
}

fn half_weight(sign: Expr, orient: f64) -> Expr {
    // (1 + orient*sign)/2
    Expr::Mul(vec![
        Expr::Const(0.5),
        Expr::Add(vec![Expr::Const(1.0), Expr::Mul(vec![Expr::Const(orient), sign])]),
    ])
}

fn simplify_add(mut es: Vec<Expr>) -> Expr {
    es.retain(|e| !e.is_const_zero());
    let consts: f64 = es
        .iter()
        .filter_map(|e| match e {
            Expr::Const(c) => Some(*c),
            _ => None,
        })
        .sum();
    es.retain(|e| !matches!(e, Expr::Const(_)));
    if consts != 0.0 {
        es.push(Expr::Const(consts));
    }
    match es.len() {
        0 => Expr::zero(),
        1 => es.pop().unwrap(),
        _ => Expr::Add(es),
    }
}

fn simplify_sub(a: Expr, b: Expr) -> Expr {
    if b.is_const_zero() {
        a
    } else if a.is_const_zero() {
        simplify_neg(b)
    } else if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
        Expr::Const(x - y)
    } else {
        Expr::Sub(Box::new(a), Box::new(b))
    }
}

fn simplify_neg(e: Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

fn simplify_mul(mut es: Vec<Expr>) -> Expr {
    if es.iter().any(Expr::is_const_zero) {
        return Expr::zero();
    }
    let consts: f64 = es
        .iter()
        .filter_map(|e| match e {
            Expr::Const(c) => Some(*c),
            _ => None,
        })
        .product();
    es.retain(|e| !matches!(e, Expr::Const(_)));
    if consts != 1.0 {
        es.insert(0, Expr::Const(consts));
    }
    match es.len() {
        0 => Expr::Const(1.0),
        1 => es.pop().unwrap(),
        _ => Expr::Mul(es),
    }
}

// ---------------------------------------------------------------------------
// Serde: numbers, variable names, and single-key operator maps.
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(untagged)]
enum ExprRepr {
    Num(f64),
    Name(String),
    Op(std::collections::BTreeMap<String, OperandRepr>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OperandRepr {
    One(Box<ExprRepr>),
    Many(Vec<ExprRepr>),
    PowPair(Box<ExprRepr>, i64),
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let repr = ExprRepr::deserialize(de)?;
        convert::<D>(repr)
    }
}

fn convert<'de, D: Deserializer<'de>>(repr: ExprRepr) -> Result<Expr, D::Error> {
    match repr {
        ExprRepr::Num(v) => Ok(Expr::Const(v)),
        ExprRepr::Name(s) => {
            Var::parse(&s).map(Expr::Var).ok_or_else(|| {
                D::Error::custom(format!(
                    "unknown variable `{s}` (expected x0/x1/t/z0/z1 or aliases x/z)"
                ))
            })
        }
        ExprRepr::Op(map) => {
            if map.len() != 1 {
                return Err(D::Error::custom(
                    "operator object must have exactly one key",
                ));
            }
            let (op, operand) = map.into_iter().next().unwrap();
            let many = |operand: OperandRepr| -> Result<Vec<Expr>, D::Error> {
                match operand {
                    OperandRepr::One(e) => Ok(vec![convert::<D>(*e)?]),
                    OperandRepr::Many(es) => {
                        es.into_iter().map(|e| convert::<D>(e)).collect()
                    }
                    OperandRepr::PowPair(..) => {
                        Err(D::Error::custom("unexpected pow-style operand"))
                    }
                }
            };
            let unary = |operand: OperandRepr| -> Result<Box<Expr>, D::Error> {
                let mut es = many(operand)?;
                if es.len() != 1 {
                    return Err(D::Error::custom("expected a single operand"));
                }
                Ok(Box::new(es.pop().unwrap()))
            };
            let binary = |operand: OperandRepr| -> Result<(Box<Expr>, Box<Expr>), D::Error> {
                let mut es = many(operand)?;
                if es.len() != 2 {
                    return Err(D::Error::custom("expected exactly two operands"));
                }
                let b = es.pop().unwrap();
                let a = es.pop().unwrap();
                Ok((Box::new(a), Box::new(b)))
            };
            match op.as_str() {
                "add" => Ok(Expr::Add(many(operand)?)),
                "mul" => Ok(Expr::Mul(many(operand)?)),
                "min" => Ok(Expr::Min(many(operand)?)),
                "max" => Ok(Expr::Max(many(operand)?)),
                "sub" => binary(operand).map(|(a, b)| Expr::Sub(a, b)),
                "div" => binary(operand).map(|(a, b)| Expr::Div(a, b)),
                "neg" => unary(operand).map(Expr::Neg),
                "sin" => unary(operand).map(Expr::Sin),
                "cos" => unary(operand).map(Expr::Cos),
                "exp" => unary(operand).map(Expr::Exp),
                "log" => unary(operand).map(Expr::Log),
                "sqrt" => unary(operand).map(Expr::Sqrt),
                "abs" => unary(operand).map(Expr::Abs),
                "sign" => unary(operand).map(Expr::Sign),
                "pow" => match operand {
                    OperandRepr::PowPair(base, k) => {
                        let k = i32::try_from(k)
                            .map_err(|_| D::Error::custom("pow exponent out of range"))?;
                        Ok(Expr::Pow(Box::new(convert::<D>(*base)?), k))
                    }
                    OperandRepr::Many(mut es) if es.len() == 2 => {
                        let k = match es.pop().unwrap() {
                            ExprRepr::Num(v) if v.fract() == 0.0 => v as i32,
                            _ => {
                                return Err(D::Error::custom(
                                    "pow exponent must be an integer literal",
                                ))
                            }
                        };
                        Ok(Expr::Pow(Box::new(convert::<D>(es.pop().unwrap())?), k))
                    }
                    _ => Err(D::Error::custom("pow expects [base, integer exponent]")),
                },
                other => Err(D::Error::custom(format!("unknown operator `{other}`"))),
            }
        }
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let one = |ser: S, key: &str, e: &Expr| -> Result<S::Ok, S::Error> {
            let mut map = ser.serialize_map(Some(1))?;
            map.serialize_entry(key, e)?;
            map.end()
        };
        let list = |ser: S, key: &str, es: &[Expr]| -> Result<S::Ok, S::Error> {
            let mut map = ser.serialize_map(Some(1))?;
            map.serialize_entry(key, es)?;
            map.end()
        };
        match self {
            Expr::Const(c) => ser.serialize_f64(*c),
            Expr::Var(v) => ser.serialize_str(&v.to_string()),
            Expr::Add(es) => list(ser, "add", es),
            Expr::Mul(es) => list(ser, "mul", es),
            Expr::Min(es) => list(ser, "min", es),
            Expr::Max(es) => list(ser, "max", es),
            Expr::Sub(a, b) => list(ser, "sub", &[a.as_ref().clone(), b.as_ref().clone()]),
            Expr::Div(a, b) => list(ser, "div", &[a.as_ref().clone(), b.as_ref().clone()]),
            Expr::Neg(e) => one(ser, "neg", e),
            Expr::Sin(e) => one(ser, "sin", e),
            Expr::Cos(e) => one(ser, "cos", e),
            Expr::Exp(e) => one(ser, "exp", e),
            Expr::Log(e) => one(ser, "log", e),
            Expr::Sqrt(e) => one(ser, "sqrt", e),
            Expr::Abs(e) => one(ser, "abs", e),
            Expr::Sign(e) => one(ser, "sign", e),
            Expr::Pow(e, k) => {
                let mut map = ser.serialize_map(Some(1))?;
                map.serialize_entry("pow", &(e.as_ref(), k))?;
                map.end()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn parse(json: &str) -> Expr {
        serde_json::from_str(json).expect("expression should parse")
    }

    fn at(e: &Expr, x: &[f64], t: f64) -> f64 {
        e.eval(&EvalPoint::xt(x, t))
    }

    #[test]
    fn parses_shorthand_forms() {
        assert_eq!(parse("2.5"), Expr::Const(2.5));
        assert_eq!(parse("\"x0\""), Expr::Var(Var::X(0)));
        assert_eq!(parse("\"x\""), Expr::Var(Var::X(0)));
        assert_eq!(parse("\"t\""), Expr::Var(Var::T));
        let sq = parse(r#"{"mul": ["x0", "x0"]}"#);
        assert_relative_eq!(at(&sq, &[3.0], 0.0), 9.0);
    }

    #[test]
    fn evaluates_composites() {
        let e = parse(r#"{"add": [{"pow": ["x0", 2]}, {"mul": [2.0, {"sub": [1.0, "t"]}]}]}"#);
        assert_relative_eq!(at(&e, &[1.5], 0.25), 2.25 + 2.0 * 0.75);
        let g = parse(r#"{"abs": "x0"}"#);
        assert_relative_eq!(at(&g, &[-2.0], 0.0), 2.0);
        let m = parse(r#"{"max": ["x0", 0.0]}"#);
        assert_relative_eq!(at(&m, &[-1.0], 0.0), 0.0);
    }

    #[test]
    fn roundtrips_through_json() {
        let src = r#"{"add": [{"pow": ["x0", 3]}, {"sin": {"mul": [2.0, "t"]}}, -1.5]}"#;
        let e = parse(src);
        let json = serde_json::to_string(&e).unwrap();
        let e2 = parse(&json);
        for &x in &[-2.0, -0.3, 0.0, 1.7] {
            for &t in &[0.0, 0.4, 1.0] {
                assert_relative_eq!(at(&e, &[x], t), at(&e2, &[x], t));
            }
        }
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(serde_json::from_str::<Expr>(r#""q7""#).is_err());
        assert!(serde_json::from_str::<Expr>(r#"{"frobnicate": ["x0"]}"#).is_err());
        assert!(serde_json::from_str::<Expr>(r#"{"pow": ["x0", 0.5]}"#).is_err());
        assert!(serde_json::from_str::<Expr>(r#"{"div": ["x0"]}"#).is_err());
    }

    #[test]
    fn check_vars_flags_out_of_range_references() {
        let e = parse(r#"{"mul": ["x1", "t"]}"#);
        assert!(e.check_vars(2, true, None).is_ok());
        assert!(e.check_vars(1, true, None).is_err());
        let j = parse(r#"{"mul": ["z0", "x0"]}"#);
        assert!(j.check_vars(1, true, Some(1)).is_ok());
        assert!(j.check_vars(1, true, None).is_err());
    }

    /// Symbolic derivatives must agree with central finite differences at
    /// generic points (checked away from kinks of abs/min/max).
    #[test]
    fn derivative_matches_finite_differences() {
        let cases = [
            r#"{"pow": ["x0", 4]}"#,
            r#"{"mul": ["x0", {"sin": "x0"}, {"exp": {"mul": [0.3, "x0"]}}]}"#,
            r#"{"div": [{"add": ["x0", 1.0]}, {"add": [{"pow": ["x0", 2]}, 2.0]}]}"#,
            r#"{"sqrt": {"add": [{"pow": ["x0", 2]}, 1.0]}}"#,
            r#"{"abs": "x0"}"#,
            r#"{"max": [{"pow": ["x0", 2]}, {"add": ["x0", 0.4]}]}"#,
            r#"{"log": {"add": [{"pow": ["x0", 2]}, 1.5]}}"#,
        ];
        let h = 1e-6;
        for src in cases {
            let e = parse(src);
            let d = e.diff(Var::X(0));
            for &x in &[-1.7, -0.9, 0.31, 0.85, 2.2] {
                let fd = (at(&e, &[x + h], 0.0) - at(&e, &[x - h], 0.0)) / (2.0 * h);
                let sym = at(&d, &[x], 0.0);
                assert_relative_eq!(sym, fd, max_relative = 1e-5, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn second_derivative_of_square_is_exactly_two() {
        let e = parse(r#"{"pow": ["x0", 2]}"#);
        let d2 = e.diff(Var::X(0)).diff(Var::X(0));
        assert_eq!(at(&d2, &[123.456], 9.0), 2.0);
    }

    #[test]
    fn time_derivative_independent_of_space() {
        let e = parse(r#"{"mul": [2.0, {"sub": [1.0, "t"]}]}"#);
        let dt = e.diff(Var::T);
        assert_relative_eq!(at(&dt, &[5.0], 0.3), -2.0);
        assert!(e.diff(Var::X(0)).is_const_zero());
    }
}
