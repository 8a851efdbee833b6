//! Symbolic differentiation, substitution, and conservative simplification.

use super::{Expr, ExprRef, Rational, Symbol};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CalculusError {
    /// Differentiation with respect to a symbol that an integral node binds.
    BoundSymbol(Symbol),
    /// Substitution would move a free occurrence of `moved` under an integral
    /// that binds it.
    Capture { target: Symbol, moved: Symbol },
}

impl fmt::Display for CalculusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalculusError::BoundSymbol(s) => {
                write!(f, "cannot differentiate with respect to bound symbol `{s}`")
            }
            CalculusError::Capture { target, moved } => write!(
                f,
                "substituting for `{target}` would capture `{moved}` under an integral binder"
            ),
        }
    }
}

impl std::error::Error for CalculusError {}

/// Simultaneous capture-avoiding substitution. Bindings do not apply to
/// occurrences shadowed by an integral's bound variable; moving an expression
/// containing a symbol under a binder for that symbol is an error.
pub fn substitute(
    e: &ExprRef,
    bindings: &BTreeMap<Symbol, ExprRef>,
) -> Result<ExprRef, CalculusError> {
    if bindings.is_empty() {
        return Ok(e.clone());
    }
    let mut shadow = Vec::new();
    subst(e, bindings, &mut shadow)
}

/// Single-variable convenience wrapper around [`substitute`].
pub fn substitute_one(
    e: &ExprRef,
    target: impl Into<Symbol>,
    replacement: ExprRef,
) -> Result<ExprRef, CalculusError> {
    let mut bindings = BTreeMap::new();
    bindings.insert(target.into(), replacement);
    substitute(e, &bindings)
}

fn subst(
    e: &ExprRef,
    bindings: &BTreeMap<Symbol, ExprRef>,
    shadow: &mut Vec<Symbol>,
) -> Result<ExprRef, CalculusError> {
    Ok(match &**e {
        Expr::Number(_) => e.clone(),
        Expr::Variable(name) => {
            if shadow.contains(name) {
                return Ok(e.clone());
            }
            match bindings.get(name) {
                None => e.clone(),
                Some(repl) => {
                    for fv in repl.free_vars() {
                        if shadow.contains(&fv) {
                            return Err(CalculusError::Capture {
                                target: name.clone(),
                                moved: fv,
                            });
                        }
                    }
                    repl.clone()
                }
            }
        }
        Expr::Add(a, b) => ExprRef::new(Expr::Add(
            subst(a, bindings, shadow)?,
            subst(b, bindings, shadow)?,
        )),
        Expr::Sub(a, b) => ExprRef::new(Expr::Sub(
            subst(a, bindings, shadow)?,
            subst(b, bindings, shadow)?,
        )),
        Expr::Mul(a, b) => ExprRef::new(Expr::Mul(
            subst(a, bindings, shadow)?,
            subst(b, bindings, shadow)?,
        )),
        Expr::Div(a, b) => ExprRef::new(Expr::Div(
            subst(a, bindings, shadow)?,
            subst(b, bindings, shadow)?,
        )),
        Expr::Neg(a) => ExprRef::new(Expr::Neg(subst(a, bindings, shadow)?)),
        Expr::Pow(a, r) => ExprRef::new(Expr::Pow(subst(a, bindings, shadow)?, *r)),
        Expr::Exp(a) => ExprRef::new(Expr::Exp(subst(a, bindings, shadow)?)),
        Expr::Log(a) => ExprRef::new(Expr::Log(subst(a, bindings, shadow)?)),
        Expr::Sin(a) => ExprRef::new(Expr::Sin(subst(a, bindings, shadow)?)),
        Expr::Cos(a) => ExprRef::new(Expr::Cos(subst(a, bindings, shadow)?)),
        Expr::Sqrt(a) => ExprRef::new(Expr::Sqrt(subst(a, bindings, shadow)?)),
        Expr::Integral {
            bound,
            lower,
            upper,
            body,
        } => {
            // Limits sit in the enclosing scope; only the body is shadowed.
            let lo = subst(lower, bindings, shadow)?;
            let hi = subst(upper, bindings, shadow)?;
            shadow.push(bound.clone());
            let new_body = subst(body, bindings, shadow);
            shadow.pop();
            ExprRef::new(Expr::Integral {
                bound: bound.clone(),
                lower: lo,
                upper: hi,
                body: new_body?,
            })
        }
    })
}

/// Partial derivative with respect to `v`, with the full Leibniz rule on
/// integral nodes. Differentiating with respect to any symbol that occurs
/// as a bound variable in `e` is rejected.
pub fn diff_expr(e: &ExprRef, v: &Symbol) -> Result<ExprRef, CalculusError> {
    if e.bound_symbols().contains(v) {
        return Err(CalculusError::BoundSymbol(v.clone()));
    }
    diff(e, v)
}

fn diff(e: &ExprRef, v: &Symbol) -> Result<ExprRef, CalculusError> {
    Ok(match &**e {
        Expr::Number(_) => Expr::number(0.0),
        Expr::Variable(name) => {
            if name == v {
                Expr::number(1.0)
            } else {
                Expr::number(0.0)
            }
        }
        Expr::Add(a, b) => Expr::add(diff(a, v)?, diff(b, v)?),
        Expr::Sub(a, b) => Expr::sub(diff(a, v)?, diff(b, v)?),
        Expr::Mul(a, b) => Expr::add(
            Expr::mul(diff(a, v)?, b.clone()),
            Expr::mul(a.clone(), diff(b, v)?),
        ),
        Expr::Div(a, b) => {
            let da = diff(a, v)?;
            let db = diff(b, v)?;
            if db.is_zero() {
                Expr::div(da, b.clone())
            } else {
                Expr::div(
                    Expr::sub(Expr::mul(da, b.clone()), Expr::mul(a.clone(), db)),
                    Expr::pow(b.clone(), Rational::new(2, 1)),
                )
            }
        }
        Expr::Neg(a) => Expr::neg(diff(a, v)?),
        Expr::Pow(base, r) => {
            let db = diff(base, v)?;
            if db.is_zero() {
                return Ok(Expr::number(0.0));
            }
            let coeff = if r.is_integer() {
                Expr::number(r.num() as f64)
            } else {
                Expr::div(
                    Expr::number(r.num() as f64),
                    Expr::number(r.den() as f64),
                )
            };
            Expr::mul(
                Expr::mul(coeff, Expr::pow(base.clone(), r.minus_one())),
                db,
            )
        }
        Expr::Exp(a) => Expr::mul(Expr::exp(a.clone()), diff(a, v)?),
        Expr::Log(a) => Expr::div(diff(a, v)?, a.clone()),
        Expr::Sin(a) => Expr::mul(Expr::cos(a.clone()), diff(a, v)?),
        Expr::Cos(a) => Expr::neg(Expr::mul(Expr::sin(a.clone()), diff(a, v)?)),
        Expr::Sqrt(a) => Expr::div(
            diff(a, v)?,
            Expr::mul(Expr::number(2.0), Expr::sqrt(a.clone())),
        ),
        Expr::Integral {
            bound,
            lower,
            upper,
            body,
        } => {
            // d/dv int_{lo}^{hi} g(t, v) dt
            //   = g(hi, v) hi' - g(lo, v) lo' + int_{lo}^{hi} dg/dv dt
            let d_hi = diff(upper, v)?;
            let d_lo = diff(lower, v)?;
            let mut total = Expr::number(0.0);
            if !d_hi.is_zero() {
                let at_hi = substitute_one(body, bound.clone(), upper.clone())?;
                total = Expr::add(total, Expr::mul(at_hi, d_hi));
            }
            if !d_lo.is_zero() {
                let at_lo = substitute_one(body, bound.clone(), lower.clone())?;
                total = Expr::sub(total, Expr::mul(at_lo, d_lo));
            }
            let d_body = diff(body, v)?;
            if !d_body.is_zero() {
                total = Expr::add(
                    total,
                    Expr::integral(bound.clone(), lower.clone(), upper.clone(), d_body),
                );
            }
            total
        }
    })
}

/// Conservative bottom-up simplification: constant folding, additive zeros,
/// unit factors, zero factors, `exp(0)`, and trivial powers. Transcendental
/// functions of constants are left symbolic so printed forms stay readable.
pub fn simplify(e: &ExprRef) -> ExprRef {
    match &**e {
        Expr::Number(_) | Expr::Variable(_) => e.clone(),
        Expr::Add(a, b) => Expr::add(simplify(a), simplify(b)),
        Expr::Sub(a, b) => Expr::sub(simplify(a), simplify(b)),
        Expr::Mul(a, b) => Expr::mul(simplify(a), simplify(b)),
        Expr::Div(a, b) => Expr::div(simplify(a), simplify(b)),
        Expr::Neg(a) => Expr::neg(simplify(a)),
        Expr::Pow(a, r) => Expr::pow(simplify(a), *r),
        Expr::Exp(a) => Expr::exp(simplify(a)),
        Expr::Log(a) => Expr::log(simplify(a)),
        Expr::Sin(a) => Expr::sin(simplify(a)),
        Expr::Cos(a) => Expr::cos(simplify(a)),
        Expr::Sqrt(a) => Expr::sqrt(simplify(a)),
        Expr::Integral {
            bound,
            lower,
            upper,
            body,
        } => Expr::integral(
            bound.clone(),
            simplify(lower),
            simplify(upper),
            simplify(body),
        ),
    }
}
