//! Symbolic-numeric toolkit for iterated systems of quadratures.
//!
//! The crate exposes a small analytic expression DSL with definite-integral
//! nodes, hierarchical quadrature systems evaluated as joint initial-value
//! problems, integral families built over them, a reduction engine that
//! rewrites a multi-quadrature family down to a two-quadrature normal form
//! with an auditable trace, and an ODE lab covering first-order linear
//! equations, angular phase coordinates for second-order equations, and the
//! obstruction argument for non-constant coefficients.

pub mod expr;
pub mod family;
pub mod numeric;
pub mod odelab;
pub mod reduction;
pub mod sampling;
pub mod system;
pub mod tolerance;

pub use expr::{
    diff_expr, eval_expr, parse_expr, simplify, substitute, substitute_one, Env, EvalError,
    Evaluator, Expr, ExprRef, Rational, Symbol,
};
pub use tolerance::ToleranceConfig;
