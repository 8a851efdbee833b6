//! Expression trees for the small analytic DSL used throughout the crate.
//!
//! An expression is built from numbers, variables, the arithmetic operators,
//! a fixed set of unary functions, rational powers, and a definite-integral
//! node `quad(t, lower, upper, body)` whose bound variable scopes over the
//! body only.  Trees are immutable and shared through `Arc`, so cloning a
//! subtree is cheap and evaluation is pure.

mod calculus;
mod eval;
mod parse;

pub use calculus::{diff_expr, simplify, substitute, substitute_one, CalculusError};
pub use eval::{eval_expr, Env, EvalError, Evaluator};
pub use parse::{parse_expr, ParseError};

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

/// Interned-ish variable name. Clones share the backing allocation.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Symbol(Arc<str>);

impl Symbol {
    pub fn new(name: &str) -> Self {
        Symbol(Arc::from(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for Symbol {
    fn from(name: &str) -> Self {
        Symbol::new(name)
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Symbol({})", self.0)
    }
}

/// Returns the first of `base`, `base1`, `base2`, ... not present in `avoid`.
pub fn fresh_symbol(base: &str, avoid: &BTreeSet<Symbol>) -> Symbol {
    let direct = Symbol::new(base);
    if !avoid.contains(&direct) {
        return direct;
    }
    for k in 1u32.. {
        let candidate = Symbol::new(&format!("{base}{k}"));
        if !avoid.contains(&candidate) {
            return candidate;
        }
    }
    unreachable!("symbol space exhausted")
}

/// Exponent of a power node. Kept exact so that differentiation can shift it
/// without rounding and the printer can reproduce the source form.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Rational {
    num: i64,
    den: i64,
}

impl Rational {
    pub const ZERO: Rational = Rational { num: 0, den: 1 };
    pub const ONE: Rational = Rational { num: 1, den: 1 };

    /// Reduced form with a positive denominator. Panics on a zero denominator.
    pub fn new(num: i64, den: i64) -> Self {
        assert!(den != 0, "rational exponent with zero denominator");
        let g = gcd(num.unsigned_abs(), den.unsigned_abs()) as i64;
        let sign = if den < 0 { -1 } else { 1 };
        Rational {
            num: sign * num / g,
            den: den.abs() / g,
        }
    }

    pub fn num(&self) -> i64 {
        self.num
    }

    pub fn den(&self) -> i64 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_integer(&self) -> bool {
        self.den == 1
    }

    pub fn minus_one(&self) -> Rational {
        Rational::new(self.num - self.den, self.den)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

pub type ExprRef = Arc<Expr>;

#[derive(Clone, PartialEq, Debug)]
pub enum Expr {
    Number(f64),
    Variable(Symbol),
    Add(ExprRef, ExprRef),
    Sub(ExprRef, ExprRef),
    Mul(ExprRef, ExprRef),
    Div(ExprRef, ExprRef),
    Neg(ExprRef),
    /// Base raised to an exact rational exponent. General powers go through
    /// `exp`/`log` instead.
    Pow(ExprRef, Rational),
    Exp(ExprRef),
    Log(ExprRef),
    Sin(ExprRef),
    Cos(ExprRef),
    Sqrt(ExprRef),
    /// Definite integral over `bound` from `lower` to `upper`. The bound
    /// symbol scopes over `body` only; the limits live in the enclosing scope.
    Integral {
        bound: Symbol,
        lower: ExprRef,
        upper: ExprRef,
        body: ExprRef,
    },
}

/// Errors from the structural well-formedness check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExprStructureError {
    /// A bound symbol is re-bound by a nested integral inside its own body.
    NestedRebinding(Symbol),
}

impl fmt::Display for ExprStructureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprStructureError::NestedRebinding(s) => {
                write!(f, "bound symbol `{s}` is re-bound by a nested integral")
            }
        }
    }
}

impl std::error::Error for ExprStructureError {}

impl Expr {
    pub fn number(v: f64) -> ExprRef {
        Arc::new(Expr::Number(v))
    }

    pub fn var(name: impl Into<Symbol>) -> ExprRef {
        Arc::new(Expr::Variable(name.into()))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Number(v) if *v == 0.0)
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Number(v) if *v == 1.0)
    }

    /// Folding constructor: constant children are combined, additive zeros
    /// dropped. Used by differentiation and the reduction engine so derived
    /// trees stay small; the parser builds raw nodes instead.
    pub fn add(a: ExprRef, b: ExprRef) -> ExprRef {
        match (&*a, &*b) {
            (Expr::Number(x), Expr::Number(y)) => Expr::number(x + y),
            (Expr::Number(z), _) if *z == 0.0 => b,
            (_, Expr::Number(z)) if *z == 0.0 => a,
            _ => Arc::new(Expr::Add(a, b)),
        }
    }

    pub fn sub(a: ExprRef, b: ExprRef) -> ExprRef {
        match (&*a, &*b) {
            (Expr::Number(x), Expr::Number(y)) => Expr::number(x - y),
            (_, Expr::Number(z)) if *z == 0.0 => a,
            (Expr::Number(z), _) if *z == 0.0 => Expr::neg(b),
            _ => Arc::new(Expr::Sub(a, b)),
        }
    }

    pub fn mul(a: ExprRef, b: ExprRef) -> ExprRef {
        match (&*a, &*b) {
            (Expr::Number(x), Expr::Number(y)) => Expr::number(x * y),
            (Expr::Number(z), _) | (_, Expr::Number(z)) if *z == 0.0 => Expr::number(0.0),
            (Expr::Number(o), _) if *o == 1.0 => b,
            (_, Expr::Number(o)) if *o == 1.0 => a,
            _ => Arc::new(Expr::Mul(a, b)),
        }
    }

    pub fn div(a: ExprRef, b: ExprRef) -> ExprRef {
        match (&*a, &*b) {
            (Expr::Number(x), Expr::Number(y)) if *y != 0.0 => Expr::number(x / y),
            // 0/g folds to 0; quotient domains are not tracked, same as g*0.
            (Expr::Number(z), _) if *z == 0.0 => Expr::number(0.0),
            (_, Expr::Number(o)) if *o == 1.0 => a,
            _ => Arc::new(Expr::Div(a, b)),
        }
    }

    pub fn neg(a: ExprRef) -> ExprRef {
        match &*a {
            Expr::Number(x) => Expr::number(-x),
            _ => Arc::new(Expr::Neg(a)),
        }
    }

    pub fn pow(base: ExprRef, exponent: Rational) -> ExprRef {
        if exponent == Rational::ZERO {
            return Expr::number(1.0);
        }
        if exponent == Rational::ONE {
            return base;
        }
        if let Expr::Number(v) = &*base {
            if let Ok(folded) = eval::pow_value(*v, exponent) {
                return Expr::number(folded);
            }
        }
        Arc::new(Expr::Pow(base, exponent))
    }

    pub fn exp(a: ExprRef) -> ExprRef {
        match &*a {
            Expr::Number(v) if *v == 0.0 => Expr::number(1.0),
            _ => Arc::new(Expr::Exp(a)),
        }
    }

    pub fn log(a: ExprRef) -> ExprRef {
        Arc::new(Expr::Log(a))
    }

    pub fn sin(a: ExprRef) -> ExprRef {
        Arc::new(Expr::Sin(a))
    }

    pub fn cos(a: ExprRef) -> ExprRef {
        Arc::new(Expr::Cos(a))
    }

    pub fn sqrt(a: ExprRef) -> ExprRef {
        Arc::new(Expr::Sqrt(a))
    }

    /// Integral constructor. Folds a zero body and coincident limits; anything
    /// else is kept as written.
    pub fn integral(bound: Symbol, lower: ExprRef, upper: ExprRef, body: ExprRef) -> ExprRef {
        if body.is_zero() || lower == upper {
            return Expr::number(0.0);
        }
        Arc::new(Expr::Integral {
            bound,
            lower,
            upper,
            body,
        })
    }

    /// Free variables: everything not bound by an enclosing integral node.
    /// This is exactly the set an evaluation environment must bind.
    pub fn free_vars(&self) -> BTreeSet<Symbol> {
        let mut out = BTreeSet::new();
        let mut shadow = Vec::new();
        collect_free(self, &mut shadow, &mut out);
        out
    }

    /// All symbols appearing as integral bound variables anywhere in the tree.
    pub fn bound_symbols(&self) -> BTreeSet<Symbol> {
        let mut out = BTreeSet::new();
        collect_bound(self, &mut out);
        out
    }

    /// Free and bound symbols together; the avoid-set for fresh names.
    pub fn all_symbols(&self) -> BTreeSet<Symbol> {
        let mut out = self.free_vars();
        out.append(&mut self.bound_symbols());
        out
    }

    /// Checks the no-shadowing invariant: a bound symbol may not be re-bound
    /// by a nested integral inside its own body.
    pub fn check_structure(&self) -> Result<(), ExprStructureError> {
        fn walk(e: &Expr, stack: &mut Vec<Symbol>) -> Result<(), ExprStructureError> {
            match e {
                Expr::Number(_) | Expr::Variable(_) => Ok(()),
                Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                    walk(a, stack)?;
                    walk(b, stack)
                }
                Expr::Neg(a)
                | Expr::Pow(a, _)
                | Expr::Exp(a)
                | Expr::Log(a)
                | Expr::Sin(a)
                | Expr::Cos(a)
                | Expr::Sqrt(a) => walk(a, stack),
                Expr::Integral {
                    bound,
                    lower,
                    upper,
                    body,
                } => {
                    walk(lower, stack)?;
                    walk(upper, stack)?;
                    if stack.contains(bound) {
                        return Err(ExprStructureError::NestedRebinding(bound.clone()));
                    }
                    stack.push(bound.clone());
                    let r = walk(body, stack);
                    stack.pop();
                    r
                }
            }
        }
        walk(self, &mut Vec::new())
    }
}

fn collect_free(e: &Expr, shadow: &mut Vec<Symbol>, out: &mut BTreeSet<Symbol>) {
    match e {
        Expr::Number(_) => {}
        Expr::Variable(s) => {
            if !shadow.contains(s) {
                out.insert(s.clone());
            }
        }
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            collect_free(a, shadow, out);
            collect_free(b, shadow, out);
        }
        Expr::Neg(a)
        | Expr::Pow(a, _)
        | Expr::Exp(a)
        | Expr::Log(a)
        | Expr::Sin(a)
        | Expr::Cos(a)
        | Expr::Sqrt(a) => collect_free(a, shadow, out),
        Expr::Integral {
            bound,
            lower,
            upper,
            body,
        } => {
            collect_free(lower, shadow, out);
            collect_free(upper, shadow, out);
            shadow.push(bound.clone());
            collect_free(body, shadow, out);
            shadow.pop();
        }
    }
}

fn collect_bound(e: &Expr, out: &mut BTreeSet<Symbol>) {
    match e {
        Expr::Number(_) | Expr::Variable(_) => {}
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            collect_bound(a, out);
            collect_bound(b, out);
        }
        Expr::Neg(a)
        | Expr::Pow(a, _)
        | Expr::Exp(a)
        | Expr::Log(a)
        | Expr::Sin(a)
        | Expr::Cos(a)
        | Expr::Sqrt(a) => collect_bound(a, out),
        Expr::Integral {
            bound,
            lower,
            upper,
            body,
        } => {
            out.insert(bound.clone());
            collect_bound(lower, out);
            collect_bound(upper, out);
            collect_bound(body, out);
        }
    }
}

// Printer precedence levels. A child is parenthesized when its level is below
// the minimum its position requires, which makes `parse(print(e)) == e`.
const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => PREC_ADD,
        Expr::Mul(..) | Expr::Div(..) => PREC_MUL,
        // A negative literal prints with a leading minus, so it binds like
        // a unary minus. Sign test, not `< 0.0`: the formatter renders -0.0
        // with the minus too.
        Expr::Neg(..) => PREC_NEG,
        Expr::Number(v) if v.is_sign_negative() => PREC_NEG,
        Expr::Pow(..) => PREC_POW,
        _ => PREC_ATOM,
    }
}

fn fmt_prec(e: &Expr, min: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let p = precedence(e);
    let parens = p < min;
    if parens {
        f.write_str("(")?;
    }
    match e {
        Expr::Number(v) => write!(f, "{v}")?,
        Expr::Variable(s) => write!(f, "{s}")?,
        Expr::Add(a, b) => {
            fmt_prec(a, PREC_ADD, f)?;
            f.write_str(" + ")?;
            fmt_prec(b, PREC_ADD + 1, f)?;
        }
        Expr::Sub(a, b) => {
            fmt_prec(a, PREC_ADD, f)?;
            f.write_str(" - ")?;
            fmt_prec(b, PREC_ADD + 1, f)?;
        }
        Expr::Mul(a, b) => {
            fmt_prec(a, PREC_MUL, f)?;
            f.write_str(" * ")?;
            fmt_prec(b, PREC_MUL + 1, f)?;
        }
        Expr::Div(a, b) => {
            fmt_prec(a, PREC_MUL, f)?;
            f.write_str(" / ")?;
            fmt_prec(b, PREC_MUL + 1, f)?;
        }
        Expr::Neg(a) => {
            // `-(2)` keeps an explicit Neg over a literal from re-parsing as
            // a negative literal.
            f.write_str("-")?;
            if matches!(&**a, Expr::Number(v) if *v >= 0.0) {
                f.write_str("(")?;
                fmt_prec(a, 0, f)?;
                f.write_str(")")?;
            } else {
                fmt_prec(a, PREC_NEG, f)?;
            }
        }
        Expr::Pow(base, r) => {
            fmt_prec(base, PREC_ATOM, f)?;
            if r.is_integer() && r.num() >= 0 {
                write!(f, "^{}", r.num())?;
            } else {
                write!(f, "^({r})")?;
            }
        }
        Expr::Exp(a) => write_call(f, "exp", a)?,
        Expr::Log(a) => write_call(f, "log", a)?,
        Expr::Sin(a) => write_call(f, "sin", a)?,
        Expr::Cos(a) => write_call(f, "cos", a)?,
        Expr::Sqrt(a) => write_call(f, "sqrt", a)?,
        Expr::Integral {
            bound,
            lower,
            upper,
            body,
        } => {
            write!(f, "quad({bound}, ")?;
            fmt_prec(lower, 0, f)?;
            f.write_str(", ")?;
            fmt_prec(upper, 0, f)?;
            f.write_str(", ")?;
            fmt_prec(body, 0, f)?;
            f.write_str(")")?;
        }
    }
    if parens {
        f.write_str(")")?;
    }
    Ok(())
}

fn write_call(f: &mut fmt::Formatter<'_>, name: &str, arg: &Expr) -> fmt::Result {
    write!(f, "{name}(")?;
    fmt_prec(arg, 0, f)?;
    f.write_str(")")
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_prec(self, 0, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> ExprRef {
        parse_expr(s).unwrap()
    }

    #[test]
    fn free_vars_exclude_bound_symbol() {
        let e = p("quad(t, 0, x, t * c1)");
        let fv = e.free_vars();
        let names: Vec<&str> = fv.iter().map(|s| s.as_str()).collect();
        assert_eq!(names, vec!["c1", "x"]);
    }

    #[test]
    fn free_vars_include_limit_variables() {
        let e = p("quad(t, c2, x, sin(t))");
        let fv = e.free_vars();
        assert!(fv.contains(&Symbol::new("c2")));
        assert!(fv.contains(&Symbol::new("x")));
        assert!(!fv.contains(&Symbol::new("t")));
    }

    #[test]
    fn nested_rebinding_is_rejected() {
        let inner = Expr::integral(
            Symbol::new("t"),
            Expr::number(0.0),
            Expr::number(1.0),
            Expr::var("t"),
        );
        let outer = Expr::Integral {
            bound: Symbol::new("t"),
            lower: Expr::number(0.0),
            upper: Expr::number(1.0),
            body: Expr::add(inner, Expr::var("t")),
        };
        assert!(matches!(
            outer.check_structure(),
            Err(ExprStructureError::NestedRebinding(_))
        ));
    }

    #[test]
    fn sibling_integrals_may_share_a_bound_symbol() {
        let e = p("quad(t, 0, 1, t) + quad(t, 0, 1, t * t)");
        assert!(e.check_structure().is_ok());
    }

    #[test]
    fn printer_respects_precedence() {
        let cases = [
            "x + c1 * c2",
            "(x + c1) * c2",
            "x - (c1 - c2)",
            "x / (c1 * c2)",
            "-x^2",
            "(-2)^2",
            "x^(1/2)",
            "exp(-(x + c1))",
            "quad(t, 0, x, t * exp(t))",
        ];
        for src in cases {
            let e = p(src);
            assert_eq!(format!("{e}"), src, "print of parse of {src:?}");
        }
    }

    #[test]
    fn negative_zero_literal_round_trips() {
        // -0.0 renders as "-0", so as a power base it needs parentheses like
        // any other negative literal; unparenthesized, the minus would
        // re-parse outside the power.
        let e = ExprRef::new(Expr::Pow(Expr::number(-0.0), Rational::new(-1, 1)));
        let text = format!("{e}");
        assert_eq!(text, "(-0)^(-1)");
        assert_eq!(p(&text), e);

        // Raw node: the smart constructor would fold the zero operand away.
        let m = ExprRef::new(Expr::Mul(Expr::number(-0.0), Expr::var("x")));
        assert_eq!(format!("{m}"), "-0 * x");
        assert_eq!(p(&format!("{m}")), m);
    }

    #[test]
    fn fresh_symbol_skips_taken_names() {
        let e = p("quad(t, 0, 1, t) + t1");
        let s = fresh_symbol("t", &e.all_symbols());
        assert_eq!(s.as_str(), "t2");
    }

    #[test]
    fn rational_reduction_and_shift() {
        let r = Rational::new(2, -4);
        assert_eq!((r.num(), r.den()), (-1, 2));
        assert_eq!(r.minus_one(), Rational::new(-3, 2));
    }
}
