//! Stepwise removal of quadratures from an admissible family.
//!
//! Every step inspects the ratio of the combining map's last two slopes.
//! When that ratio is affine in the last argument with a constant
//! coefficient, one quadrature can be traded away:
//!
//! * coefficient zero: the last constant shifts into the preceding slot and
//!   the last quadrature is absorbed (constant shift);
//! * coefficient nonzero: the preceding quadrature becomes an exponential
//!   prefactor (exponential rescale), after which the same trade repeats one
//!   level down on the prefactor's argument (exponential contraction).
//!
//! The chain bottoms out at a first-order linear profile (p, q) plus a
//! readout: the normal form. Each step is guarded by sampled structure,
//! redundancy, absorption, and independence checks, and optionally by a
//! trajectory-level equivalence comparison between the families before and
//! after the step.

use crate::expr::{
    diff_expr, fresh_symbol, simplify, substitute, substitute_one, CalculusError, Env, EvalError,
    Evaluator, Expr, ExprRef, Symbol,
};
use crate::family::{
    check_admissible, check_equivalence, v_sym, w_sym, EquivalenceReport, EquivalenceBoxes,
    ExprFamily, Family, FamilyError, QuadratureIntegral, WorkingBox,
};
use crate::sampling::{chebyshev_points, latin_hypercube, rng_from_seed, DEFAULT_SEED};
use crate::system::{check_independence, u_sym, QuadratureSystem, SystemError};
use crate::tolerance::ToleranceConfig;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum ReductionError {
    Family(FamilyError),
    System(SystemError),
    Calculus(CalculusError),
    Eval(EvalError),
    WrongArity { expected: &'static str, got: usize },
    NotAdmissible { min_last_slope: f64, min_readout_slope: f64, floor: f64 },
    NotIndependent { sigma: f64, threshold: f64 },
    StructureAbsent { stage: &'static str, residual: f64, limit: f64 },
    RedundancyCheckFailed { stage: &'static str, residual: f64, limit: f64 },
    AbsorptionIdentityFailed { residual: f64, limit: f64 },
    NotASolution { residual: f64, limit: f64 },
    ForeignVariable { role: &'static str, var: Symbol },
    LoopGuard,
}

impl fmt::Display for ReductionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReductionError::Family(e) => write!(f, "{e}"),
            ReductionError::System(e) => write!(f, "{e}"),
            ReductionError::Calculus(e) => write!(f, "{e}"),
            ReductionError::Eval(e) => write!(f, "{e}"),
            ReductionError::WrongArity { expected, got } => {
                write!(f, "step needs {expected}, got {got}")
            }
            ReductionError::NotAdmissible {
                min_last_slope,
                min_readout_slope,
                floor,
            } => write!(
                f,
                "family is not admissible: last slope {min_last_slope:.3e}, readout slope \
                 {min_readout_slope:.3e}, floor {floor:.3e}"
            ),
            ReductionError::NotIndependent { sigma, threshold } => write!(
                f,
                "system integrands are not independent: smallest singular value {sigma:.3e} \
                 below threshold {threshold:.3e}"
            ),
            ReductionError::StructureAbsent {
                stage,
                residual,
                limit,
            } => write!(
                f,
                "{stage}: structure residual {residual:.3e} exceeds {limit:.3e}; the family \
                 does not carry the required shift structure"
            ),
            ReductionError::RedundancyCheckFailed {
                stage,
                residual,
                limit,
            } => write!(
                f,
                "{stage}: the absorbed quadrature is still live (residual {residual:.3e}, \
                 limit {limit:.3e})"
            ),
            ReductionError::AbsorptionIdentityFailed { residual, limit } => write!(
                f,
                "absorption identity violated: residual {residual:.3e} exceeds {limit:.3e}"
            ),
            ReductionError::NotASolution { residual, limit } => write!(
                f,
                "expression does not satisfy the transport equation: residual {residual:.3e} \
                 exceeds {limit:.3e}"
            ),
            ReductionError::ForeignVariable { role, var } => {
                write!(f, "{role} must not depend on `{var}`")
            }
            ReductionError::LoopGuard => {
                write!(f, "reduction did not terminate within the expected number of steps")
            }
        }
    }
}

impl std::error::Error for ReductionError {}

impl From<FamilyError> for ReductionError {
    fn from(e: FamilyError) -> Self {
        ReductionError::Family(e)
    }
}

impl From<SystemError> for ReductionError {
    fn from(e: SystemError) -> Self {
        ReductionError::System(e)
    }
}

impl From<CalculusError> for ReductionError {
    fn from(e: CalculusError) -> Self {
        ReductionError::Calculus(e)
    }
}

impl From<EvalError> for ReductionError {
    fn from(e: EvalError) -> Self {
        ReductionError::Eval(e)
    }
}

type Axes = [(Symbol, (f64, f64))];

fn sampled_values(
    e: &ExprRef,
    axes: &Axes,
    tol: &ToleranceConfig,
    seed: u64,
    draws: usize,
) -> Result<Vec<f64>, ReductionError> {
    let mut rng = rng_from_seed(seed);
    let ranges: Vec<(f64, f64)> = axes.iter().map(|(_, r)| *r).collect();
    let samples = latin_hypercube(&mut rng, &ranges, draws);
    let evaluator = Evaluator::new(tol);
    let mut out = Vec::with_capacity(samples.len());
    for sample in &samples {
        let mut env = Env::new();
        for ((sym, _), &value) in axes.iter().zip(sample) {
            env.set(sym.clone(), value);
        }
        out.push(evaluator.eval(e, &env)?);
    }
    Ok(out)
}

fn sampled_max_abs(
    e: &ExprRef,
    axes: &Axes,
    tol: &ToleranceConfig,
    seed: u64,
    draws: usize,
) -> Result<f64, ReductionError> {
    Ok(sampled_values(e, axes, tol, seed, draws)?
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs())))
}

fn sampled_mean_spread(
    e: &ExprRef,
    axes: &Axes,
    tol: &ToleranceConfig,
    seed: u64,
    draws: usize,
) -> Result<(f64, f64), ReductionError> {
    let values = sampled_values(e, axes, tol, seed, draws)?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let spread = values
        .iter()
        .fold(0.0f64, |a, v| a.max((v - mean).abs()));
    Ok((mean, spread))
}

fn v_axes(working_box: &WorkingBox, count: usize) -> Vec<(Symbol, (f64, f64))> {
    (0..count)
        .map(|j| (v_sym(j + 1), working_box.ranges()[j]))
        .collect()
}

/// Affine data of the slope ratio of a plain family's combining map:
/// ratio = alpha * v_N + beta(v_1..v_{N-1}).
#[derive(Debug, Clone)]
pub struct PlainShiftData {
    pub alpha: f64,
    pub beta: ExprRef,
    pub residual: f64,
}

/// Samples the ratio (d F / d v_{N-1}) / (d F / d v_N) over the working box
/// and verifies it is affine in v_N with a constant coefficient.
pub fn extract_shift_structure(
    fam: &QuadratureIntegral,
    working_box: &WorkingBox,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<PlainShiftData, ReductionError> {
    let n_args = fam.param_dim();
    if n_args < 2 {
        return Err(ReductionError::WrongArity {
            expected: "at least two quadratures",
            got: n_args,
        });
    }
    working_box.check_dim(n_args)?;
    let last = v_sym(n_args);
    let d_mid = diff_expr(fam.outer(), &v_sym(n_args - 1))?;
    let d_last = diff_expr(fam.outer(), &last)?;
    let ratio = Expr::div(d_mid, d_last);
    let d_ratio = diff_expr(&ratio, &last)?;
    let axes = v_axes(working_box, n_args);
    let draws = (tol.sample_count / 4).max(24);
    let (alpha, spread) = sampled_mean_spread(&d_ratio, &axes, tol, seed, draws)?;
    let beta = simplify(&substitute_one(&ratio, last.clone(), Expr::number(0.0))?);
    let affine_gap = Expr::sub(
        ratio,
        Expr::add(
            Expr::mul(Expr::number(alpha), Expr::var(last)),
            beta.clone(),
        ),
    );
    let affine_residual = sampled_max_abs(&affine_gap, &axes, tol, seed ^ 1, draws)?;
    let residual = spread.max(affine_residual);
    if residual > tol.constancy_tol {
        return Err(ReductionError::StructureAbsent {
            stage: "affine slope ratio",
            residual,
            limit: tol.constancy_tol,
        });
    }
    Ok(PlainShiftData {
        alpha,
        beta,
        residual,
    })
}

/// Affine data for an exponential-shape family: the coefficient may now be a
/// function of the surviving arguments, ratio = alpha(v) * D + beta(v).
#[derive(Debug, Clone)]
pub struct ExponentialShiftData {
    pub alpha: ExprRef,
    pub beta: ExprRef,
    pub residual: f64,
}

pub fn extract_exponential_structure(
    fam: &ExponentialShapeIntegral,
    working_box: &WorkingBox,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<ExponentialShiftData, ReductionError> {
    let n = fam.plain_count();
    if n < 1 {
        return Err(ReductionError::WrongArity {
            expected: "at least one plain quadrature",
            got: n,
        });
    }
    working_box.check_dim(n + 2)?;
    let compound = v_sym(n + 1);
    let d_mid = diff_expr(fam.outer(), &v_sym(n))?;
    let d_last = diff_expr(fam.outer(), &compound)?;
    let ratio = Expr::div(d_mid, d_last);
    let d1 = diff_expr(&ratio, &compound)?;
    let d2 = diff_expr(&d1, &compound)?;

    let mut axes = v_axes(working_box, n);
    axes.push((compound.clone(), working_box.last_range()));
    let draws = (tol.sample_count / 4).max(24);
    let curvature = sampled_max_abs(&d2, &axes, tol, seed, draws)?;
    let alpha = simplify(&substitute_one(&d1, compound.clone(), Expr::number(0.0))?);
    let beta = simplify(&substitute_one(&ratio, compound.clone(), Expr::number(0.0))?);
    let affine_gap = Expr::sub(
        ratio,
        Expr::add(
            Expr::mul(alpha.clone(), Expr::var(compound)),
            beta.clone(),
        ),
    );
    let affine_residual = sampled_max_abs(&affine_gap, &axes, tol, seed ^ 1, draws)?;
    let residual = curvature.max(affine_residual);
    if residual > tol.constancy_tol {
        return Err(ReductionError::StructureAbsent {
            stage: "affine slope ratio (exponential shape)",
            residual,
            limit: tol.constancy_tol,
        });
    }
    Ok(ExponentialShiftData {
        alpha,
        beta,
        residual,
    })
}

/// Adds the total derivative of `shift` along the system to the integrand at
/// `target` (0-based). `shift` may only read running values strictly before
/// the target, so the new running value satisfies
///
///   s_target_new(x) = s_target(x) + shift(s+c) - shift(c),
///
/// which is verified numerically before the new system is returned.
pub fn absorb_into_integrand(
    sys: &QuadratureSystem,
    target: usize,
    shift: &ExprRef,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<(QuadratureSystem, f64), ReductionError> {
    if target >= sys.len() {
        return Err(ReductionError::WrongArity {
            expected: "an absorption target inside the system",
            got: target,
        });
    }
    let allowed: BTreeSet<Symbol> = (1..=target).map(u_sym).collect();
    for fv in shift.free_vars() {
        if !allowed.contains(&fv) {
            return Err(ReductionError::ForeignVariable {
                role: "absorbed shift",
                var: fv,
            });
        }
    }
    let mut integrands = sys.integrands().to_vec();
    let mut acc = integrands[target].clone();
    for j in 1..=target {
        let d = diff_expr(shift, &u_sym(j))?;
        acc = Expr::add(acc, Expr::mul(d, integrands[j - 1].clone()));
    }
    integrands[target] = acc;
    let new_sys = QuadratureSystem::new(sys.x0(), sys.interval(), integrands)?
        .with_breakpoints(sys.breakpoints().to_vec());
    let residual = absorption_identity_residual(sys, &new_sys, target, shift, tol, seed)?;
    if residual > tol.constancy_tol {
        return Err(ReductionError::AbsorptionIdentityFailed {
            residual,
            limit: tol.constancy_tol,
        });
    }
    Ok((new_sys, residual))
}

fn absorption_identity_residual(
    old: &QuadratureSystem,
    new: &QuadratureSystem,
    target: usize,
    shift: &ExprRef,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<f64, ReductionError> {
    let (lo, hi) = old.interval();
    let xs = chebyshev_points(lo, hi, 5);
    let n_c = old.len() - 1;
    let mut rng = rng_from_seed(seed);
    let cs = latin_hypercube(&mut rng, &vec![(-1.0, 1.0); n_c], 4);
    let evaluator = Evaluator::new(tol);
    let mut worst = 0.0f64;
    for c in &cs {
        let old_rows = old.eval_grid(&xs, c, tol)?;
        let new_rows = new.eval_grid(&xs, c, tol)?;
        let mut env = Env::new();
        for j in 1..=target {
            env.set(u_sym(j), c[j - 1]);
        }
        let at_c = evaluator.eval(shift, &env)?;
        for (row_old, row_new) in old_rows.iter().zip(&new_rows) {
            for j in 1..=target {
                env.set(u_sym(j), row_old[j - 1] + c[j - 1]);
            }
            let at_u = evaluator.eval(shift, &env)?;
            let expected = row_old[target] + at_u - at_c;
            worst = worst.max((row_new[target] - expected).abs());
        }
    }
    Ok(worst)
}

/// General solution of the transport equation
///
///   dH/d mid = (a(mid, ..) * last + b(mid, ..)) * dH/d last
///
/// by characteristics: H(.., mid, last) = G(.., T(mid, last)) with
/// T = e^{A(mid)} last + int_0^mid b e^{A}, A = int_0^s a, and the profile
/// G recovered as H at mid = 0. Both the equation and the reconstruction are
/// verified by sampling over `axes`.
#[derive(Debug, Clone)]
pub struct LinearPdeSolution {
    pub general: ExprRef,
    pub profile: ExprRef,
    pub transform: ExprRef,
    pub pde_residual: f64,
    pub reconstruction_residual: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn solve_linear_pde(
    h: &ExprRef,
    mid: &Symbol,
    last: &Symbol,
    a: &ExprRef,
    b: &ExprRef,
    axes: &Axes,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<LinearPdeSolution, ReductionError> {
    if mid == last {
        return Err(ReductionError::ForeignVariable {
            role: "transport direction",
            var: last.clone(),
        });
    }
    for fv in a.free_vars().into_iter().chain(b.free_vars()) {
        if fv == *last {
            return Err(ReductionError::ForeignVariable {
                role: "transport coefficients",
                var: fv,
            });
        }
    }
    let d_mid = diff_expr(h, mid)?;
    let d_last = diff_expr(h, last)?;
    let pde_gap = Expr::sub(
        d_mid,
        Expr::mul(
            Expr::add(Expr::mul(a.clone(), Expr::var(last.clone())), b.clone()),
            d_last,
        ),
    );
    let draws = (tol.sample_count / 2).max(32);
    let pde_residual = sampled_max_abs(&pde_gap, axes, tol, seed, draws)?;
    if pde_residual > tol.constancy_tol {
        return Err(ReductionError::NotASolution {
            residual: pde_residual,
            limit: tol.constancy_tol,
        });
    }

    let mut avoid: BTreeSet<Symbol> = h.all_symbols();
    avoid.extend(a.all_symbols());
    avoid.extend(b.all_symbols());
    avoid.insert(mid.clone());
    avoid.insert(last.clone());
    let t = fresh_symbol("t", &avoid);
    avoid.insert(t.clone());
    let r = fresh_symbol("r", &avoid);
    let weight = |upper: ExprRef| -> Result<ExprRef, ReductionError> {
        Ok(Expr::integral(
            r.clone(),
            Expr::number(0.0),
            upper,
            substitute_one(a, mid.clone(), Expr::var(r.clone()))?,
        ))
    };
    let transform = Expr::add(
        Expr::mul(
            Expr::exp(weight(Expr::var(mid.clone()))?),
            Expr::var(last.clone()),
        ),
        Expr::integral(
            t.clone(),
            Expr::number(0.0),
            Expr::var(mid.clone()),
            Expr::mul(
                substitute_one(b, mid.clone(), Expr::var(t.clone()))?,
                Expr::exp(weight(Expr::var(t))?),
            ),
        ),
    );
    let profile = simplify(&substitute_one(h, mid.clone(), Expr::number(0.0))?);
    let general = substitute_one(&profile, last.clone(), transform.clone())?;
    let gap = Expr::sub(general.clone(), h.clone());
    let reconstruction_residual = sampled_max_abs(&gap, axes, tol, seed ^ 3, draws)?;
    Ok(LinearPdeSolution {
        general,
        profile,
        transform,
        pde_residual,
        reconstruction_residual,
    })
}

/// A family whose combining map reads its last two running values through an
/// exponential prefactor: y = theta(x, G(u_1, .., u_{N-2}, e^{u_{N-1}} u_N)).
/// Numerically it is just a plain family with a composed combining map, and
/// all evaluation delegates to that view.
#[derive(Debug, Clone)]
pub struct ExponentialShapeIntegral {
    outer: ExprRef,
    composite: QuadratureIntegral,
}

impl ExponentialShapeIntegral {
    pub fn new(
        sys: QuadratureSystem,
        outer: ExprRef,
        theta: ExprRef,
    ) -> Result<Self, FamilyError> {
        let n_quads = sys.len();
        if n_quads < 2 {
            return Err(FamilyError::Structure(
                "an exponential-shape family needs at least two quadratures".into(),
            ));
        }
        let allowed: BTreeSet<Symbol> = (1..n_quads).map(v_sym).collect();
        for fv in outer.free_vars() {
            if !allowed.contains(&fv) {
                return Err(FamilyError::ForeignVariable {
                    role: "exponential combining map",
                    var: fv,
                });
            }
        }
        let slot = v_sym(n_quads - 1);
        let folded = substitute_one(
            &outer,
            slot.clone(),
            Expr::mul(Expr::exp(Expr::var(slot)), Expr::var(v_sym(n_quads))),
        )
        .map_err(FamilyError::from)?;
        let composite = QuadratureIntegral::new(sys, folded, theta)?;
        Ok(ExponentialShapeIntegral { outer, composite })
    }

    pub fn outer(&self) -> &ExprRef {
        &self.outer
    }

    pub fn theta(&self) -> &ExprRef {
        self.composite.theta()
    }

    pub fn system(&self) -> &QuadratureSystem {
        self.composite.system()
    }

    /// The plain view with the exponential prefactor folded into the
    /// combining map.
    pub fn composite(&self) -> &QuadratureIntegral {
        &self.composite
    }

    /// Quadratures before the exponent/scaled pair.
    pub fn plain_count(&self) -> usize {
        self.system().len() - 2
    }
}

impl Family for ExponentialShapeIntegral {
    fn param_dim(&self) -> usize {
        self.composite.param_dim()
    }

    fn base_point(&self) -> f64 {
        self.composite.base_point()
    }

    fn interval(&self) -> (f64, f64) {
        self.composite.interval()
    }

    fn eval(&self, x: f64, c: &[f64], tol: &ToleranceConfig) -> Result<f64, FamilyError> {
        self.composite.eval(x, c, tol)
    }

    fn eval_grid(
        &self,
        xs: &[f64],
        c: &[f64],
        tol: &ToleranceConfig,
    ) -> Result<Vec<f64>, FamilyError> {
        self.composite.eval_grid(xs, c, tol)
    }

    fn partials_grid(
        &self,
        xs: &[f64],
        c: &[f64],
        tol: &ToleranceConfig,
    ) -> Result<Vec<Vec<f64>>, FamilyError> {
        self.composite.partials_grid(xs, c, tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StepRule {
    ConstantShift,
    ExponentialRescale,
    ExponentialContraction,
    TerminalSingle,
    TerminalPair,
}

impl fmt::Display for StepRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            StepRule::ConstantShift => "ConstantShift",
            StepRule::ExponentialRescale => "ExponentialRescale",
            StepRule::ExponentialContraction => "ExponentialContraction",
            StepRule::TerminalSingle => "TerminalSingle",
            StepRule::TerminalPair => "TerminalPair",
        };
        f.write_str(name)
    }
}

/// One reduction step with the data needed to audit it.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub rule: StepRule,
    pub quadratures_before: usize,
    pub quadratures_after: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_expr: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_expr: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift_expr: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub absorbed_expr: Option<String>,
    pub structure_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub redundancy_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub absorption_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub independence_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equivalence_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equivalence_ok: Option<bool>,
}

fn base_record(
    rule: StepRule,
    before: usize,
    after: usize,
    structure_residual: f64,
) -> StepRecord {
    StepRecord {
        rule,
        quadratures_before: before,
        quadratures_after: after,
        alpha: None,
        alpha_expr: None,
        beta_expr: None,
        shift_expr: None,
        absorbed_expr: None,
        structure_residual,
        redundancy_residual: None,
        absorption_residual: None,
        independence_sigma: None,
        equivalence_gap: None,
        equivalence_ok: None,
    }
}

/// B(u_1..u_n): the ratio's constant part integrated along the last slot.
/// With `rescale = Some(alpha)` the exponential-rescale variant is built
/// instead: e^{-u_n} int_0^{u_n/alpha} beta e^{alpha t} dt.
fn build_shift_primitive(
    beta: &ExprRef,
    n: usize,
    rescale: Option<f64>,
) -> Result<ExprRef, ReductionError> {
    let mut avoid: BTreeSet<Symbol> = beta.all_symbols();
    for j in 1..=n {
        avoid.insert(u_sym(j));
    }
    let t = fresh_symbol("t", &avoid);
    let mut map = BTreeMap::new();
    for j in 1..n {
        map.insert(v_sym(j), Expr::var(u_sym(j)));
    }
    map.insert(v_sym(n), Expr::var(t.clone()));
    let body = substitute(beta, &map)?;
    match rescale {
        None => Ok(Expr::integral(
            t,
            Expr::number(0.0),
            Expr::var(u_sym(n)),
            body,
        )),
        Some(alpha) => {
            let weighted = Expr::mul(
                body,
                Expr::exp(Expr::mul(Expr::number(alpha), Expr::var(t.clone()))),
            );
            let upper = Expr::div(Expr::var(u_sym(n)), Expr::number(alpha));
            Ok(Expr::mul(
                Expr::exp(Expr::neg(Expr::var(u_sym(n)))),
                Expr::integral(t, Expr::number(0.0), upper, weighted),
            ))
        }
    }
}

/// e^{-u_{n+1}} int_0^{u_n} beta e^{int_0^t alpha} dt, the source term the
/// contraction step pushes into the scaled quadrature.
fn build_contraction_source(
    alpha: &ExprRef,
    beta: &ExprRef,
    n: usize,
) -> Result<ExprRef, ReductionError> {
    let mut avoid: BTreeSet<Symbol> = alpha.all_symbols();
    avoid.extend(beta.all_symbols());
    for j in 1..=n + 1 {
        avoid.insert(u_sym(j));
    }
    let t = fresh_symbol("t", &avoid);
    avoid.insert(t.clone());
    let r = fresh_symbol("r", &avoid);
    let mut map_t = BTreeMap::new();
    let mut map_r = BTreeMap::new();
    for j in 1..n {
        map_t.insert(v_sym(j), Expr::var(u_sym(j)));
        map_r.insert(v_sym(j), Expr::var(u_sym(j)));
    }
    map_t.insert(v_sym(n), Expr::var(t.clone()));
    map_r.insert(v_sym(n), Expr::var(r.clone()));
    let weight = Expr::integral(
        r,
        Expr::number(0.0),
        Expr::var(t.clone()),
        substitute(alpha, &map_r)?,
    );
    let body = Expr::mul(substitute(beta, &map_t)?, Expr::exp(weight));
    let inner = Expr::integral(t, Expr::number(0.0), Expr::var(u_sym(n)), body);
    Ok(Expr::mul(
        Expr::exp(Expr::neg(Expr::var(u_sym(n + 1)))),
        inner,
    ))
}

fn redundancy_residual(
    phi: &ExprRef,
    var: &Symbol,
    interval: (f64, f64),
    working_box: &WorkingBox,
    u_count: usize,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<f64, ReductionError> {
    let d = diff_expr(phi, var)?;
    let mut axes: Vec<(Symbol, (f64, f64))> = vec![(Symbol::new("x"), interval)];
    for j in 1..=u_count {
        axes.push((u_sym(j), working_box.ranges()[j - 1]));
    }
    let draws = (tol.sample_count / 4).max(16);
    sampled_max_abs(&d, &axes, tol, seed, draws)
}

/// Constant-shift step: the last constant is pushed into the preceding slot
/// through B = int beta, the last quadrature is absorbed, and the spent slot
/// is dropped. Applies when the ratio coefficient is zero.
pub fn constant_shift_step(
    fam: &QuadratureIntegral,
    data: &PlainShiftData,
    working_box: &WorkingBox,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<(QuadratureIntegral, StepRecord), ReductionError> {
    let n_args = fam.param_dim();
    let n = n_args - 1;
    let sys = fam.system();
    let shift = build_shift_primitive(&data.beta, n, None)?;
    let (sys_b, absorption_residual) = absorb_into_integrand(sys, n, &shift, tol, seed)?;
    let absorbed = sys_b.integrand(n).clone();
    let redundancy = redundancy_residual(
        &absorbed,
        &u_sym(n),
        sys.interval(),
        working_box,
        n,
        tol,
        seed ^ 5,
    )?;
    if redundancy > tol.constancy_tol {
        return Err(ReductionError::RedundancyCheckFailed {
            stage: "constant shift",
            residual: redundancy,
            limit: tol.constancy_tol,
        });
    }
    let collapsed = substitute_one(&absorbed, u_sym(n), Expr::number(0.0))?;
    let mut integrands: Vec<ExprRef> = sys.integrands()[..n - 1].to_vec();
    integrands.push(collapsed);
    let next_sys = QuadratureSystem::new(sys.x0(), sys.interval(), integrands)?
        .with_breakpoints(sys.breakpoints().to_vec());
    let mut map = BTreeMap::new();
    map.insert(v_sym(n), Expr::number(0.0));
    map.insert(v_sym(n_args), Expr::var(v_sym(n)));
    let next_outer = substitute(fam.outer(), &map)?;
    let next = QuadratureIntegral::new(next_sys, next_outer, fam.theta().clone())?;

    let mut record = base_record(StepRule::ConstantShift, n_args, n_args - 1, data.residual);
    record.alpha = Some(data.alpha);
    record.beta_expr = Some(data.beta.to_string());
    record.shift_expr = Some(shift.to_string());
    record.redundancy_residual = Some(redundancy);
    record.absorption_residual = Some(absorption_residual);
    Ok((next, record))
}

/// Exponential-rescale step: a nonzero constant ratio coefficient turns the
/// next-to-last quadrature into an exponential prefactor. The quadrature
/// count is unchanged; the shape becomes exponential.
pub fn exponential_rescale_step(
    fam: &QuadratureIntegral,
    data: &PlainShiftData,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<(ExponentialShapeIntegral, StepRecord), ReductionError> {
    let n_args = fam.param_dim();
    let n = n_args - 1;
    let alpha = data.alpha;
    let sys = fam.system();
    let mut integrands = sys.integrands().to_vec();
    integrands[n - 1] = Expr::mul(Expr::number(alpha), integrands[n - 1].clone());
    integrands[n] = substitute_one(
        &integrands[n],
        u_sym(n),
        Expr::div(Expr::var(u_sym(n)), Expr::number(alpha)),
    )?;
    let sys_a = QuadratureSystem::new(sys.x0(), sys.interval(), integrands)?
        .with_breakpoints(sys.breakpoints().to_vec());
    let shift = build_shift_primitive(&data.beta, n, Some(alpha))?;
    let (sys_b, absorption_residual) = absorb_into_integrand(&sys_a, n, &shift, tol, seed)?;
    let mut map = BTreeMap::new();
    map.insert(v_sym(n), Expr::number(0.0));
    map.insert(v_sym(n_args), Expr::var(v_sym(n)));
    let next_outer = substitute(fam.outer(), &map)?;
    let next = ExponentialShapeIntegral::new(sys_b, next_outer, fam.theta().clone())?;

    let mut record = base_record(StepRule::ExponentialRescale, n_args, n_args, data.residual);
    record.alpha = Some(alpha);
    record.beta_expr = Some(data.beta.to_string());
    record.shift_expr = Some(shift.to_string());
    record.absorption_residual = Some(absorption_residual);
    Ok((next, record))
}

/// Exponential-contraction step: inside an exponential-shape family the last
/// plain quadrature is folded into both the exponent (through A = int alpha)
/// and the scaled quadrature (through the weighted source term), then
/// dropped.
pub fn exponential_contraction_step(
    fam: &ExponentialShapeIntegral,
    working_box: &WorkingBox,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<(ExponentialShapeIntegral, StepRecord), ReductionError> {
    let n = fam.plain_count();
    if n < 1 {
        return Err(ReductionError::WrongArity {
            expected: "at least one plain quadrature",
            got: n,
        });
    }
    let n_quads = n + 2;
    let data = extract_exponential_structure(fam, working_box, tol, seed)?;
    let sys = fam.system();

    let a_shift = build_shift_primitive(&data.alpha, n, None)?;
    let (sys_a, residual_a) = absorb_into_integrand(sys, n, &a_shift, tol, seed ^ 11)?;
    // The exponent quadrature changed, so its reader compensates.
    let compensated = substitute_one(
        sys_a.integrand(n + 1),
        u_sym(n + 1),
        Expr::sub(Expr::var(u_sym(n + 1)), a_shift.clone()),
    )?;
    let mut integrands = sys_a.integrands().to_vec();
    integrands[n + 1] = compensated;
    let sys_b = QuadratureSystem::new(sys.x0(), sys.interval(), integrands)?
        .with_breakpoints(sys.breakpoints().to_vec());

    let b_shift = build_contraction_source(&data.alpha, &data.beta, n)?;
    let (sys_c, residual_b) = absorb_into_integrand(&sys_b, n + 1, &b_shift, tol, seed ^ 13)?;

    let exponent_integrand = sys_c.integrand(n).clone();
    let scaled_integrand = sys_c.integrand(n + 1).clone();
    let red_a = redundancy_residual(
        &exponent_integrand,
        &u_sym(n),
        sys.interval(),
        working_box,
        n,
        tol,
        seed ^ 17,
    )?;
    let red_b = redundancy_residual(
        &scaled_integrand,
        &u_sym(n),
        sys.interval(),
        working_box,
        n + 1,
        tol,
        seed ^ 19,
    )?;
    let redundancy = red_a.max(red_b);
    if redundancy > tol.constancy_tol {
        return Err(ReductionError::RedundancyCheckFailed {
            stage: "exponential contraction",
            residual: redundancy,
            limit: tol.constancy_tol,
        });
    }

    let exponent_collapsed = substitute_one(&exponent_integrand, u_sym(n), Expr::number(0.0))?;
    let mut map = BTreeMap::new();
    map.insert(u_sym(n), Expr::number(0.0));
    map.insert(u_sym(n + 1), Expr::var(u_sym(n)));
    let scaled_collapsed = substitute(&scaled_integrand, &map)?;
    let mut next_integrands = sys.integrands()[..n - 1].to_vec();
    next_integrands.push(exponent_collapsed);
    next_integrands.push(scaled_collapsed);
    let next_sys = QuadratureSystem::new(sys.x0(), sys.interval(), next_integrands)?
        .with_breakpoints(sys.breakpoints().to_vec());
    let mut omap = BTreeMap::new();
    omap.insert(v_sym(n), Expr::number(0.0));
    omap.insert(v_sym(n + 1), Expr::var(v_sym(n)));
    let next_outer = substitute(fam.outer(), &omap)?;
    let next = ExponentialShapeIntegral::new(next_sys, next_outer, fam.theta().clone())?;

    let mut record = base_record(
        StepRule::ExponentialContraction,
        n_quads,
        n_quads - 1,
        data.residual,
    );
    record.alpha_expr = Some(data.alpha.to_string());
    record.beta_expr = Some(data.beta.to_string());
    record.shift_expr = Some(a_shift.to_string());
    record.absorbed_expr = Some(b_shift.to_string());
    record.redundancy_residual = Some(redundancy);
    record.absorption_residual = Some(residual_a.max(residual_b));
    Ok((next, record))
}

/// theta composed with the full collapse of the combining map: every leading
/// argument pinned to zero, the surviving slot renamed to the readout's.
pub fn collapsed_readout(
    theta: &ExprRef,
    outer: &ExprRef,
    args: usize,
) -> Result<ExprRef, CalculusError> {
    let mut map = BTreeMap::new();
    for j in 1..args {
        map.insert(v_sym(j), Expr::number(0.0));
    }
    map.insert(v_sym(args), Expr::var(w_sym()));
    let collapsed = substitute(outer, &map)?;
    Ok(simplify(&substitute_one(theta, w_sym(), collapsed)?))
}

/// A single plain quadrature is already in normal form: p = 0, q the
/// integrand.
pub fn terminal_single(
    fam: &QuadratureIntegral,
    readout: &ExprRef,
) -> Result<(NormalForm, StepRecord), ReductionError> {
    if fam.param_dim() != 1 {
        return Err(ReductionError::WrongArity {
            expected: "exactly one quadrature",
            got: fam.param_dim(),
        });
    }
    let q = simplify(fam.system().integrand(0));
    let nf = NormalForm::new(
        Expr::number(0.0),
        q,
        readout.clone(),
        fam.base_point(),
        fam.interval(),
    )?;
    let record = base_record(StepRule::TerminalSingle, 1, 0, 0.0);
    Ok((nf, record))
}

/// An exponential pair terminates when the scaled integrand factors as
/// q(x) e^{-u_1}; then p is the negated exponent integrand and the leftover
/// constant folds into the normal form's constant.
pub fn terminal_pair(
    fam: &ExponentialShapeIntegral,
    readout: &ExprRef,
    working_box: &WorkingBox,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<(NormalForm, StepRecord), ReductionError> {
    if fam.plain_count() != 0 {
        return Err(ReductionError::WrongArity {
            expected: "an exponent/scaled pair with no plain quadratures",
            got: fam.plain_count(),
        });
    }
    working_box.check_dim(2)?;
    let sys = fam.system();
    let exponent_integrand = sys.integrand(0);
    let scaled_integrand = sys.integrand(1);
    let d_scaled = diff_expr(scaled_integrand, &u_sym(1))?;
    let factor_gap = Expr::add(scaled_integrand.clone(), d_scaled);
    let axes = [
        (Symbol::new("x"), sys.interval()),
        (u_sym(1), working_box.ranges()[0]),
    ];
    let draws = (tol.sample_count / 4).max(16);
    let residual = sampled_max_abs(&factor_gap, &axes, tol, seed, draws)?;
    if residual > tol.constancy_tol {
        return Err(ReductionError::StructureAbsent {
            stage: "terminal exponential factorization",
            residual,
            limit: tol.constancy_tol,
        });
    }
    let p = simplify(&Expr::neg(exponent_integrand.clone()));
    let q = simplify(&substitute_one(
        scaled_integrand,
        u_sym(1),
        Expr::number(0.0),
    )?);
    let nf = NormalForm::new(p, q, readout.clone(), sys.x0(), sys.interval())?;
    let record = base_record(StepRule::TerminalPair, 2, 0, residual);
    Ok((nf, record))
}

/// First-order linear profile plus readout: solutions are
/// y(x) = theta_hat(x, e^{-P(x)} (int_x0^x q e^{P} + cc)) with P = int_x0 p.
#[derive(Debug, Clone)]
pub struct NormalForm {
    p: ExprRef,
    q: ExprRef,
    theta_hat: ExprRef,
    x0: f64,
    interval: (f64, f64),
}

/// Printable view of a normal form.
#[derive(Debug, Clone, Serialize)]
pub struct NormalFormReport {
    pub p: String,
    pub q: String,
    pub theta_hat: String,
}

impl NormalForm {
    pub fn new(
        p: ExprRef,
        q: ExprRef,
        theta_hat: ExprRef,
        x0: f64,
        interval: (f64, f64),
    ) -> Result<Self, ReductionError> {
        let x = Symbol::new("x");
        for (role, e) in [("profile coefficient", &p), ("profile source", &q)] {
            for fv in e.free_vars() {
                if fv != x {
                    return Err(ReductionError::ForeignVariable {
                        role: match role {
                            "profile coefficient" => "profile coefficient",
                            _ => "profile source",
                        },
                        var: fv,
                    });
                }
            }
        }
        let w = w_sym();
        for fv in theta_hat.free_vars() {
            if fv != x && fv != w {
                return Err(ReductionError::ForeignVariable {
                    role: "collapsed readout",
                    var: fv,
                });
            }
        }
        Ok(NormalForm {
            p,
            q,
            theta_hat,
            x0,
            interval,
        })
    }

    pub fn p(&self) -> &ExprRef {
        &self.p
    }

    pub fn q(&self) -> &ExprRef {
        &self.q
    }

    pub fn theta_hat(&self) -> &ExprRef {
        &self.theta_hat
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn interval(&self) -> (f64, f64) {
        self.interval
    }

    pub fn constant_name() -> Symbol {
        Symbol::new("cc")
    }

    /// The solution family as one expression over x and cc.
    pub fn solution_expr(&self) -> Result<ExprRef, ReductionError> {
        let x = Symbol::new("x");
        let mut avoid: BTreeSet<Symbol> = self.p.all_symbols();
        avoid.extend(self.q.all_symbols());
        avoid.extend(self.theta_hat.all_symbols());
        avoid.insert(x.clone());
        avoid.insert(Self::constant_name());
        avoid.insert(w_sym());
        let t = fresh_symbol("t", &avoid);
        avoid.insert(t.clone());
        let r = fresh_symbol("r", &avoid);

        let x0 = Expr::number(self.x0);
        let accumulated = Expr::integral(
            t.clone(),
            x0.clone(),
            Expr::var(x.clone()),
            substitute_one(&self.p, x.clone(), Expr::var(t.clone()))?,
        );
        let inner_weight = Expr::integral(
            r.clone(),
            x0.clone(),
            Expr::var(t.clone()),
            substitute_one(&self.p, x.clone(), Expr::var(r))?,
        );
        let driven = Expr::integral(
            t.clone(),
            x0,
            Expr::var(x.clone()),
            Expr::mul(
                substitute_one(&self.q, x, Expr::var(t))?,
                Expr::exp(inner_weight),
            ),
        );
        let carrier = Expr::mul(
            Expr::exp(Expr::neg(accumulated)),
            Expr::add(driven, Expr::var(Self::constant_name())),
        );
        Ok(substitute_one(&self.theta_hat, w_sym(), carrier)?)
    }

    /// The normal form as an evaluable one-parameter family.
    pub fn family(&self) -> Result<ExprFamily, ReductionError> {
        Ok(ExprFamily::new(
            self.solution_expr()?,
            vec![Self::constant_name()],
            self.x0,
            self.interval,
        )?)
    }

    pub fn report(&self) -> NormalFormReport {
        NormalFormReport {
            p: self.p.to_string(),
            q: self.q.to_string(),
            theta_hat: self.theta_hat.to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReductionOptions {
    pub working_box: WorkingBox,
    pub seed: u64,
    /// Run the trajectory-level equivalence comparison after every step.
    pub check_steps: bool,
    /// Compare the input family against the final normal form.
    pub check_final: bool,
    /// Latin-hypercube draws for independence witness searches.
    pub witness_budget: usize,
}

impl ReductionOptions {
    pub fn new(working_box: WorkingBox) -> Self {
        ReductionOptions {
            working_box,
            seed: DEFAULT_SEED,
            check_steps: true,
            check_final: true,
            witness_budget: 48,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReductionTrace {
    pub initial_quadratures: usize,
    pub steps: Vec<StepRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_equivalence: Option<EquivalenceReport>,
}

impl ReductionTrace {
    pub fn rules(&self) -> Vec<StepRule> {
        self.steps.iter().map(|s| s.rule).collect()
    }

    /// True when every recorded equivalence comparison passed.
    pub fn all_checks_passed(&self) -> bool {
        self.steps
            .iter()
            .all(|s| s.equivalence_ok.unwrap_or(true))
            && self
                .final_equivalence
                .as_ref()
                .map(|r| r.equivalent)
                .unwrap_or(true)
    }
}

#[derive(Debug, Clone)]
pub struct ReductionOutcome {
    pub normal_form: NormalForm,
    pub trace: ReductionTrace,
}

enum Working {
    Plain(QuadratureIntegral),
    Exponential(ExponentialShapeIntegral),
}

impl Working {
    fn family(&self) -> &dyn Family {
        match self {
            Working::Plain(f) => f,
            Working::Exponential(e) => e,
        }
    }

    fn system(&self) -> &QuadratureSystem {
        match self {
            Working::Plain(f) => f.system(),
            Working::Exponential(e) => e.system(),
        }
    }
}

enum StepOutcome {
    Done(NormalForm, StepRecord),
    Continue(Working, WorkingBox, StepRecord),
}

/// A reduction abort, carrying the steps completed before the failure so a
/// caller can still show how far the chain got.
#[derive(Debug)]
pub struct ReductionFailure {
    pub partial: ReductionTrace,
    pub error: ReductionError,
}

impl fmt::Display for ReductionFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (after {} completed steps)",
            self.error,
            self.partial.steps.len()
        )
    }
}

impl std::error::Error for ReductionFailure {}

/// Runs the reduction chain to a normal form, recording one step per rule
/// application. Structure failures abort with the partial trace attached;
/// equivalence gaps are recorded in the trace and left to the caller to
/// judge.
pub fn reduce_to_normal_form(
    fam: &QuadratureIntegral,
    options: &ReductionOptions,
    tol: &ToleranceConfig,
) -> Result<ReductionOutcome, ReductionFailure> {
    let mut trace = ReductionTrace {
        initial_quadratures: fam.param_dim(),
        steps: Vec::new(),
        final_equivalence: None,
    };
    match reduce_steps(fam, options, tol, &mut trace) {
        Ok(normal_form) => Ok(ReductionOutcome { normal_form, trace }),
        Err(error) => Err(ReductionFailure {
            partial: trace,
            error,
        }),
    }
}

fn reduce_steps(
    fam: &QuadratureIntegral,
    options: &ReductionOptions,
    tol: &ToleranceConfig,
    trace: &mut ReductionTrace,
) -> Result<NormalForm, ReductionError> {
    let n0 = fam.param_dim();
    options.working_box.check_dim(n0)?;
    let readout = collapsed_readout(fam.theta(), fam.outer(), n0)?;

    let entry_adm = check_admissible(fam, &options.working_box, tol, options.seed)?;
    if !entry_adm.admissible {
        return Err(ReductionError::NotAdmissible {
            min_last_slope: entry_adm.min_last_slope,
            min_readout_slope: entry_adm.min_readout_slope,
            floor: entry_adm.floor,
        });
    }
    let entry_indep =
        check_independence(fam.system(), tol, options.seed, options.witness_budget)?;
    if !entry_indep.independent {
        return Err(ReductionError::NotIndependent {
            sigma: entry_indep.smallest_singular_value,
            threshold: entry_indep.threshold,
        });
    }

    let mut current = Working::Plain(fam.clone());
    let mut cur_box = options.working_box.clone();
    let mut step_seed = options.seed;

    let normal_form = loop {
        if trace.steps.len() > 2 * n0 + 2 {
            return Err(ReductionError::LoopGuard);
        }
        step_seed = step_seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let outcome = match &current {
            Working::Plain(f) if f.param_dim() == 1 => {
                let (nf, record) = terminal_single(f, &readout)?;
                StepOutcome::Done(nf, record)
            }
            Working::Exponential(e) if e.plain_count() == 0 => {
                let (nf, record) = terminal_pair(e, &readout, &cur_box, tol, step_seed)?;
                StepOutcome::Done(nf, record)
            }
            Working::Plain(f) => {
                let adm = check_admissible(f, &cur_box, tol, step_seed)?;
                if !adm.admissible {
                    return Err(ReductionError::NotAdmissible {
                        min_last_slope: adm.min_last_slope,
                        min_readout_slope: adm.min_readout_slope,
                        floor: adm.floor,
                    });
                }
                let data = extract_shift_structure(f, &cur_box, tol, step_seed)?;
                let n = f.param_dim() - 1;
                if data.alpha.abs() <= tol.constancy_tol {
                    let (next, record) =
                        constant_shift_step(f, &data, &cur_box, tol, step_seed)?;
                    StepOutcome::Continue(
                        Working::Plain(next),
                        cur_box.without_axis(n - 1),
                        record,
                    )
                } else {
                    let (next, record) = exponential_rescale_step(f, &data, tol, step_seed)?;
                    StepOutcome::Continue(Working::Exponential(next), cur_box.clone(), record)
                }
            }
            Working::Exponential(e) => {
                let adm = check_admissible(e.composite(), &cur_box, tol, step_seed)?;
                if !adm.admissible {
                    return Err(ReductionError::NotAdmissible {
                        min_last_slope: adm.min_last_slope,
                        min_readout_slope: adm.min_readout_slope,
                        floor: adm.floor,
                    });
                }
                let n = e.plain_count();
                let (next, record) =
                    exponential_contraction_step(e, &cur_box, tol, step_seed)?;
                StepOutcome::Continue(
                    Working::Exponential(next),
                    cur_box.without_axis(n - 1),
                    record,
                )
            }
        };
        match outcome {
            StepOutcome::Done(nf, record) => {
                trace.steps.push(record);
                break nf;
            }
            StepOutcome::Continue(next, next_box, mut record) => {
                let indep =
                    check_independence(next.system(), tol, step_seed, options.witness_budget)?;
                record.independence_sigma = Some(indep.smallest_singular_value);
                if !indep.independent {
                    return Err(ReductionError::NotIndependent {
                        sigma: indep.smallest_singular_value,
                        threshold: indep.threshold,
                    });
                }
                if options.check_steps {
                    let boxes = EquivalenceBoxes::matched(
                        current.family(),
                        cur_box.clone(),
                        next.family(),
                        next_box.clone(),
                        tol,
                        step_seed,
                    )?;
                    let report =
                        check_equivalence(current.family(), next.family(), &boxes, tol, step_seed)?;
                    record.equivalence_gap = Some(report.forward_gap.max(report.backward_gap));
                    record.equivalence_ok = Some(report.equivalent);
                }
                trace.steps.push(record);
                current = next;
                cur_box = next_box;
            }
        }
    };

    if options.check_final {
        let nf_family = normal_form.family()?;
        let template = WorkingBox::new(vec![options.working_box.last_range()])?;
        let boxes = EquivalenceBoxes::matched(
            fam,
            options.working_box.clone(),
            &nf_family,
            template,
            tol,
            options.seed,
        )?;
        let report = check_equivalence(fam, &nf_family, &boxes, tol, options.seed)?;
        trace.final_equivalence = Some(report);
    }

    Ok(normal_form)
}
