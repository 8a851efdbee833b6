//! Numeric evaluation of expression trees.
//!
//! Integral nodes are evaluated by adaptive quadrature. An `Evaluator` owns
//! the quadrature tolerances plus a per-call memo table for repeated integral
//! subtrees; it is cheap to construct and not shared between threads.

use super::{Expr, ExprRef, Rational, Symbol};
use crate::numeric::quadrature::{adaptive_quadrature, QuadratureError};
use crate::tolerance::ToleranceConfig;
use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    UnboundVariable(Symbol),
    /// Function evaluated outside its real domain (log of a non-positive
    /// value, even root of a negative value, ...).
    Domain { op: &'static str, value: f64 },
    DivisionByZero,
    NonFinite { op: &'static str },
    QuadratureDidNotConverge { achieved: f64, requested: f64 },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::UnboundVariable(s) => write!(f, "unbound variable `{s}`"),
            EvalError::Domain { op, value } => {
                write!(f, "domain error: {op} of {value}")
            }
            EvalError::DivisionByZero => write!(f, "division by zero"),
            EvalError::NonFinite { op } => write!(f, "non-finite value from {op}"),
            EvalError::QuadratureDidNotConverge {
                achieved,
                requested,
            } => write!(
                f,
                "quadrature did not converge: error estimate {achieved:.3e} \
                 (requested {requested:.3e})"
            ),
        }
    }
}

impl std::error::Error for EvalError {}

/// Variable bindings for evaluation. Extra bindings are ignored.
#[derive(Debug, Clone, Default)]
pub struct Env {
    vars: BTreeMap<Symbol, f64>,
}

impl Env {
    pub fn new() -> Self {
        Env::default()
    }

    pub fn with(mut self, name: impl Into<Symbol>, value: f64) -> Self {
        self.vars.insert(name.into(), value);
        self
    }

    pub fn set(&mut self, name: impl Into<Symbol>, value: f64) {
        self.vars.insert(name.into(), value);
    }

    pub fn get(&self, name: &Symbol) -> Option<f64> {
        self.vars.get(name).copied()
    }

    pub fn from_pairs<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut env = Env::new();
        for (k, v) in pairs {
            env.set(k, v);
        }
        env
    }
}

/// Rational power with the real-root convention: odd roots of negative bases
/// keep their sign, even roots of negative bases are domain errors.
pub(super) fn pow_value(base: f64, r: Rational) -> Result<f64, EvalError> {
    let v = if r.is_integer() {
        if base == 0.0 && r.num() < 0 {
            return Err(EvalError::DivisionByZero);
        }
        let n = i32::try_from(r.num()).map_err(|_| EvalError::NonFinite { op: "pow" })?;
        base.powi(n)
    } else if base > 0.0 {
        base.powf(r.as_f64())
    } else if base == 0.0 {
        if r.num() > 0 {
            0.0
        } else {
            return Err(EvalError::DivisionByZero);
        }
    } else if r.den() % 2 == 1 {
        let magnitude = (-base).powf(r.as_f64());
        if r.num() % 2 == 0 {
            magnitude
        } else {
            -magnitude
        }
    } else {
        return Err(EvalError::Domain {
            op: "even root of negative base",
            value: base,
        });
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite { op: "pow" })
    }
}

/// Memo key for an integral node: node address plus the bits of everything
/// the node's value can depend on within one top-level evaluation (the
/// evaluated limits and the enclosing bound-variable stack). The table is
/// cleared on every public `eval` call, so node addresses cannot go stale.
fn integral_key(node: *const Expr, lower: f64, upper: f64, scope: &[(Symbol, f64)]) -> u64 {
    let mut h = DefaultHasher::new();
    (node as usize).hash(&mut h);
    lower.to_bits().hash(&mut h);
    upper.to_bits().hash(&mut h);
    for (s, v) in scope {
        s.hash(&mut h);
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

pub struct Evaluator {
    rtol: f64,
    atol: f64,
    max_intervals: usize,
    cache: RefCell<HashMap<u64, f64>>,
}

impl Evaluator {
    pub fn new(tol: &ToleranceConfig) -> Self {
        Evaluator {
            rtol: tol.ode_tol,
            atol: tol.ode_tol * 1e-2,
            max_intervals: 4000,
            cache: RefCell::new(HashMap::new()),
        }
    }

    /// Evaluates `e` under `env`. Unbound free variables, domain violations,
    /// and quadrature failures are reported as errors, never as NaN.
    pub fn eval(&self, e: &Expr, env: &Env) -> Result<f64, EvalError> {
        self.cache.borrow_mut().clear();
        let mut scope = Vec::new();
        self.eval_scoped(e, env, &mut scope)
    }

    fn eval_scoped(
        &self,
        e: &Expr,
        env: &Env,
        scope: &mut Vec<(Symbol, f64)>,
    ) -> Result<f64, EvalError> {
        let v = match e {
            Expr::Number(v) => *v,
            Expr::Variable(name) => scope
                .iter()
                .rev()
                .find(|(s, _)| s == name)
                .map(|(_, v)| *v)
                .or_else(|| env.get(name))
                .ok_or_else(|| EvalError::UnboundVariable(name.clone()))?,
            Expr::Add(a, b) => self.eval_scoped(a, env, scope)? + self.eval_scoped(b, env, scope)?,
            Expr::Sub(a, b) => self.eval_scoped(a, env, scope)? - self.eval_scoped(b, env, scope)?,
            Expr::Mul(a, b) => self.eval_scoped(a, env, scope)? * self.eval_scoped(b, env, scope)?,
            Expr::Div(a, b) => {
                let den = self.eval_scoped(b, env, scope)?;
                if den == 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                self.eval_scoped(a, env, scope)? / den
            }
            Expr::Neg(a) => -self.eval_scoped(a, env, scope)?,
            Expr::Pow(base, r) => pow_value(self.eval_scoped(base, env, scope)?, *r)?,
            Expr::Exp(a) => self.eval_scoped(a, env, scope)?.exp(),
            Expr::Log(a) => {
                let v = self.eval_scoped(a, env, scope)?;
                if v <= 0.0 {
                    return Err(EvalError::Domain { op: "log", value: v });
                }
                v.ln()
            }
            Expr::Sin(a) => self.eval_scoped(a, env, scope)?.sin(),
            Expr::Cos(a) => self.eval_scoped(a, env, scope)?.cos(),
            Expr::Sqrt(a) => {
                let v = self.eval_scoped(a, env, scope)?;
                if v < 0.0 {
                    return Err(EvalError::Domain { op: "sqrt", value: v });
                }
                v.sqrt()
            }
            Expr::Integral {
                bound,
                lower,
                upper,
                body,
            } => {
                let lo = self.eval_scoped(lower, env, scope)?;
                let hi = self.eval_scoped(upper, env, scope)?;
                let key = integral_key(e as *const Expr, lo, hi, scope);
                if let Some(hit) = self.cache.borrow().get(&key) {
                    return Ok(*hit);
                }
                scope.push((bound.clone(), 0.0));
                let result = {
                    let mut f = |t: f64| {
                        scope.last_mut().expect("bound slot").1 = t;
                        self.eval_scoped(body, env, scope)
                    };
                    adaptive_quadrature(&mut f, lo, hi, self.rtol, self.atol, self.max_intervals)
                };
                scope.pop();
                let value = result.map_err(|qe| match qe {
                    QuadratureError::Integrand(inner) => inner,
                    QuadratureError::DidNotConverge {
                        achieved,
                        requested,
                    } => EvalError::QuadratureDidNotConverge {
                        achieved,
                        requested,
                    },
                })?;
                self.cache.borrow_mut().insert(key, value);
                value
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite { op: "expression" })
        }
    }
}

/// One-shot evaluation with the given tolerances.
pub fn eval_expr(e: &ExprRef, env: &Env, tol: &ToleranceConfig) -> Result<f64, EvalError> {
    Evaluator::new(tol).eval(e, env)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn ev(src: &str, env: &Env) -> Result<f64, EvalError> {
        eval_expr(&parse_expr(src).unwrap(), env, &ToleranceConfig::default())
    }

    #[test]
    fn arithmetic_and_functions() {
        let env = Env::new().with("x", 2.0);
        assert!((ev("1 + 2 * x^2", &env).unwrap() - 9.0).abs() < 1e-14);
        assert!((ev("exp(log(x))", &env).unwrap() - 2.0).abs() < 1e-14);
        assert!((ev("sin(x)^2 + cos(x)^2", &env).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn integral_of_exp_matches_closed_form() {
        let env = Env::new();
        let v = ev("quad(t, 0, 1, exp(t))", &env).unwrap();
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-10, "got {v}");
    }

    #[test]
    fn swapped_limits_negate() {
        let env = Env::new();
        let a = ev("quad(t, 0, 1, t)", &env).unwrap();
        let b = ev("quad(t, 1, 0, t)", &env).unwrap();
        assert!((a + b).abs() < 1e-13);
        assert!((a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nested_integral_evaluates() {
        // f(x) = int_0^x exp(int_0^t 1 dr) dt = e^x - 1
        let env = Env::new().with("x", 1.0);
        let v = ev("quad(t, 0, x, exp(quad(r, 0, t, 1)))", &env).unwrap();
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn unbound_variable_is_reported() {
        let e = ev("x + y", &Env::new().with("x", 1.0));
        assert!(matches!(e, Err(EvalError::UnboundVariable(s)) if s.as_str() == "y"));
    }

    #[test]
    fn domain_errors_are_reported() {
        let env = Env::new().with("x", -1.0);
        assert!(matches!(
            ev("log(x)", &env),
            Err(EvalError::Domain { op: "log", .. })
        ));
        assert!(matches!(ev("sqrt(x)", &env), Err(EvalError::Domain { .. })));
        assert!(matches!(ev("1 / (x + 1)", &env), Err(EvalError::DivisionByZero)));
    }

    #[test]
    fn extra_bindings_are_ignored() {
        let env = Env::new().with("x", 2.0).with("unused", 7.0);
        assert!((ev("x", &env).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rational_powers_follow_real_root_convention() {
        let env = Env::new().with("x", -8.0);
        // Odd root of a negative base keeps the sign.
        let v = ev("x^(1/3)", &env).unwrap();
        assert!((v + 2.0).abs() < 1e-12, "got {v}");
        // Even root of a negative base is a domain error.
        assert!(matches!(ev("x^(1/2)", &env), Err(EvalError::Domain { .. })));
        // Integer powers of negative bases are fine.
        assert!((ev("x^2", &env).unwrap() - 64.0).abs() < 1e-12);
    }

    #[test]
    fn bound_variable_shadows_env_binding() {
        // The env binds t, but inside the quad body t is the bound variable.
        let env = Env::new().with("t", 100.0);
        let v = ev("quad(t, 0, 1, t)", &env).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }
}
