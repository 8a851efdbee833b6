//! Differential-equation laboratory built around the normal forms: closed
//! form solving of the scalar linear profile, first-order classes obtained
//! by transforming the unknown pointwise, and an angular phase portrait for
//! second-order oscillators together with a constancy witness and a
//! two-point obstruction probe.
//!
//! Derivatives here are symbolic and accumulated quantities ride on integral
//! nodes, so every reported residual audits the algebra itself rather than a
//! difference scheme layered on top of it.

use crate::expr::{
    diff_expr, fresh_symbol, CalculusError, Env, EvalError, Evaluator, Expr, ExprRef, Rational,
    Symbol,
};
use crate::family::{w_sym, ADMISSIBILITY_FLOOR};
use crate::numeric::ode::{solve_to_targets, OdeError, OdeOptions};
use crate::reduction::{NormalForm, ReductionError};
use crate::sampling::{latin_hypercube, linspace, rng_from_seed};
use crate::system::x_sym;
use crate::tolerance::ToleranceConfig;
use serde::Serialize;
use std::collections::BTreeSet;
use std::fmt;

/// The transformed unknown in two-variable expressions.
pub fn y_sym() -> Symbol {
    Symbol::new("y")
}

/// Errors from the differential-equation laboratory.
#[derive(Debug, Clone, PartialEq)]
pub enum OdeLabError {
    Calculus(CalculusError),
    Eval(EvalError),
    Solver(String),
    Structure(String),
    ForeignVariable { role: &'static str, var: Symbol },
    GridOutsideDomain { x: f64, lo: f64, hi: f64 },
    TrivialInitialData,
    DegenerateTransform { min_slope: f64, floor: f64 },
    InverseCheckFailed { residual: f64, limit: f64 },
}

impl fmt::Display for OdeLabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OdeLabError::Calculus(e) => write!(f, "calculus failure: {e}"),
            OdeLabError::Eval(e) => write!(f, "evaluation failure: {e}"),
            OdeLabError::Solver(msg) => write!(f, "solver failure: {msg}"),
            OdeLabError::Structure(msg) => write!(f, "{msg}"),
            OdeLabError::ForeignVariable { role, var } => {
                write!(f, "the {role} mentions `{var}`, which it may not depend on")
            }
            OdeLabError::GridOutsideDomain { x, lo, hi } => {
                write!(f, "point {x} lies outside the working interval ({lo}, {hi})")
            }
            OdeLabError::TrivialInitialData => {
                write!(f, "initial data (0, 0) stays at the origin and carries no phase")
            }
            OdeLabError::DegenerateTransform { min_slope, floor } => write!(
                f,
                "transform slope in the unknown dips to {min_slope:.3e}, below the floor {floor:.1e}"
            ),
            OdeLabError::InverseCheckFailed { residual, limit } => write!(
                f,
                "readout and transform are not mutually inverse: residual {residual:.3e} exceeds {limit:.1e}"
            ),
        }
    }
}

impl std::error::Error for OdeLabError {}

impl From<CalculusError> for OdeLabError {
    fn from(e: CalculusError) -> Self {
        OdeLabError::Calculus(e)
    }
}

impl From<EvalError> for OdeLabError {
    fn from(e: EvalError) -> Self {
        OdeLabError::Eval(e)
    }
}

impl From<ReductionError> for OdeLabError {
    fn from(e: ReductionError) -> Self {
        OdeLabError::Structure(e.to_string())
    }
}

fn from_ode(e: OdeError<EvalError>) -> OdeLabError {
    match e {
        OdeError::Rhs(inner) => OdeLabError::Eval(inner),
        other => OdeLabError::Solver(other.to_string()),
    }
}

fn check_interval(interval: (f64, f64)) -> Result<(), OdeLabError> {
    let (lo, hi) = interval;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(OdeLabError::Structure(format!(
            "interval ({lo}, {hi}) is empty or unbounded"
        )));
    }
    Ok(())
}

fn check_over_x(role: &'static str, e: &ExprRef) -> Result<(), OdeLabError> {
    let x = x_sym();
    for var in e.free_vars() {
        if var != x {
            return Err(OdeLabError::ForeignVariable { role, var });
        }
    }
    Ok(())
}

/// The scalar linear problem z' + p(x) z = q(x) on an interval, with a base
/// point where initial data is attached.
#[derive(Debug, Clone)]
pub struct LinearFirstOrder {
    p: ExprRef,
    q: ExprRef,
    x0: f64,
    interval: (f64, f64),
}

impl LinearFirstOrder {
    pub fn new(
        p: ExprRef,
        q: ExprRef,
        x0: f64,
        interval: (f64, f64),
    ) -> Result<Self, OdeLabError> {
        check_interval(interval)?;
        let (lo, hi) = interval;
        if !(lo <= x0 && x0 <= hi) {
            return Err(OdeLabError::GridOutsideDomain { x: x0, lo, hi });
        }
        check_over_x("damping coefficient", &p)?;
        check_over_x("source term", &q)?;
        Ok(LinearFirstOrder { p, q, x0, interval })
    }

    pub fn p(&self) -> &ExprRef {
        &self.p
    }

    pub fn q(&self) -> &ExprRef {
        &self.q
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn interval(&self) -> (f64, f64) {
        self.interval
    }

    /// All solutions as one expression over x and the constant slot `cc`,
    /// which is exactly the value at the base point. Built from the same
    /// integrating-factor carrier the reduction engine emits, so both sides
    /// of the library agree on what "solved by quadratures" means.
    pub fn solution_expr(&self) -> Result<ExprRef, OdeLabError> {
        let nf = NormalForm::new(
            self.p.clone(),
            self.q.clone(),
            Expr::var(w_sym()),
            self.x0,
            self.interval,
        )?;
        Ok(nf.solution_expr()?)
    }
}

/// Closed-form evaluation of a linear problem along a grid. The derivative
/// column comes from differentiating the same expression symbolically, so
/// `max_residual` audits the quadrature engine and the calculus together,
/// never a finite-difference stand-in.
#[derive(Debug, Clone, Serialize)]
pub struct LinearTrajectory {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub derivatives: Vec<f64>,
    pub max_residual: f64,
}

pub fn solve_linear_first_order(
    eq: &LinearFirstOrder,
    z0: f64,
    grid: &[f64],
    tol: &ToleranceConfig,
) -> Result<LinearTrajectory, OdeLabError> {
    let (lo, hi) = eq.interval;
    for &x in grid {
        if !(lo <= x && x <= hi) {
            return Err(OdeLabError::GridOutsideDomain { x, lo, hi });
        }
    }
    let solution = eq.solution_expr()?;
    let derivative = diff_expr(&solution, &x_sym())?;
    let evaluator = Evaluator::new(tol);
    let mut env = Env::new();
    env.set(NormalForm::constant_name(), z0);
    let mut values = Vec::with_capacity(grid.len());
    let mut derivatives = Vec::with_capacity(grid.len());
    let mut max_residual = 0.0f64;
    for &x in grid {
        env.set("x", x);
        let v = evaluator.eval(&solution, &env)?;
        let d = evaluator.eval(&derivative, &env)?;
        let pv = evaluator.eval(&eq.p, &env)?;
        let qv = evaluator.eval(&eq.q, &env)?;
        max_residual = max_residual.max((d + pv * v - qv).abs());
        values.push(v);
        derivatives.push(d);
    }
    Ok(LinearTrajectory {
        grid: grid.to_vec(),
        values,
        derivatives,
        max_residual,
    })
}

/// First-order class produced by transporting the linear profile through a
/// pointwise change of the unknown z = Phi(x, y): solutions y satisfy the
/// implicit equation d1Phi + d2Phi y' + p Phi = q.
#[derive(Debug, Clone)]
pub struct TransformedOde {
    phi: ExprRef,
    p: ExprRef,
    q: ExprRef,
    d_x: ExprRef,
    d_y: ExprRef,
    interval: (f64, f64),
    y_range: (f64, f64),
}

#[allow(clippy::too_many_arguments)]
pub fn make_transformed_ode(
    phi: ExprRef,
    p: ExprRef,
    q: ExprRef,
    interval: (f64, f64),
    y_range: (f64, f64),
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<TransformedOde, OdeLabError> {
    check_interval(interval)?;
    check_interval(y_range)?;
    let x = x_sym();
    let y = y_sym();
    for var in phi.free_vars() {
        if var != x && var != y {
            return Err(OdeLabError::ForeignVariable {
                role: "transform",
                var,
            });
        }
    }
    check_over_x("damping coefficient", &p)?;
    check_over_x("source term", &q)?;
    let d_x = diff_expr(&phi, &x)?;
    let d_y = diff_expr(&phi, &y)?;

    // The slope in the unknown must stay away from zero on the whole box,
    // or the explicit form divides by dust somewhere inside it.
    let evaluator = Evaluator::new(tol);
    let mut rng = rng_from_seed(seed ^ 0x0de1_ab);
    let draws = tol.sample_count.max(32);
    let mut points = latin_hypercube(&mut rng, &[interval, y_range], draws);
    for xe in [interval.0, interval.1] {
        for ye in [y_range.0, y_range.1] {
            points.push(vec![xe, ye]);
        }
    }
    let mut env = Env::new();
    let mut min_slope = f64::INFINITY;
    for pt in &points {
        env.set(x.clone(), pt[0]);
        env.set(y.clone(), pt[1]);
        min_slope = min_slope.min(evaluator.eval(&d_y, &env)?.abs());
    }
    if min_slope < ADMISSIBILITY_FLOOR {
        return Err(OdeLabError::DegenerateTransform {
            min_slope,
            floor: ADMISSIBILITY_FLOOR,
        });
    }
    Ok(TransformedOde {
        phi,
        p,
        q,
        d_x,
        d_y,
        interval,
        y_range,
    })
}

impl TransformedOde {
    pub fn phi(&self) -> &ExprRef {
        &self.phi
    }

    pub fn p(&self) -> &ExprRef {
        &self.p
    }

    pub fn q(&self) -> &ExprRef {
        &self.q
    }

    pub fn interval(&self) -> (f64, f64) {
        self.interval
    }

    pub fn y_range(&self) -> (f64, f64) {
        self.y_range
    }

    /// The explicit form y' = (q - p Phi - d1Phi) / d2Phi as one expression
    /// over x and y.
    pub fn rhs_expr(&self) -> ExprRef {
        Expr::div(
            Expr::sub(
                self.q.clone(),
                Expr::add(
                    Expr::mul(self.p.clone(), self.phi.clone()),
                    self.d_x.clone(),
                ),
            ),
            self.d_y.clone(),
        )
    }

    /// Explicit slope at one state.
    pub fn rhs(&self, x: f64, y: f64, tol: &ToleranceConfig) -> Result<f64, OdeLabError> {
        let evaluator = Evaluator::new(tol);
        let env = Env::new().with(x_sym(), x).with(y_sym(), y);
        Ok(evaluator.eval(&self.rhs_expr(), &env)?)
    }

    /// Implicit-form residual |d1Phi + d2Phi yp + p Phi - q| at one state.
    pub fn residual(
        &self,
        x: f64,
        y: f64,
        yp: f64,
        tol: &ToleranceConfig,
    ) -> Result<f64, OdeLabError> {
        let evaluator = Evaluator::new(tol);
        let env = Env::new().with(x_sym(), x).with(y_sym(), y);
        let total = evaluator.eval(&self.d_x, &env)?
            + evaluator.eval(&self.d_y, &env)? * yp
            + evaluator.eval(&self.p, &env)? * evaluator.eval(&self.phi, &env)?
            - evaluator.eval(&self.q, &env)?;
        Ok(total.abs())
    }
}

/// Outcome of checking a normal form against a transformed class.
#[derive(Debug, Clone, Serialize)]
pub struct NormalFormOdeReport {
    pub inverse_residual: f64,
    pub max_ode_residual: f64,
    pub ok: bool,
}

/// Confirms that the family y(x) generated by a normal form moves along the
/// transformed class. The readout and the transform must first undo each
/// other in the second slot; that is a precondition, and a sampled gap is a
/// hard error rather than a large residual. Afterwards the implicit-form
/// residual is tracked along the realized trajectories, one per constant.
pub fn verify_normal_form_solves(
    nf: &NormalForm,
    ode: &TransformedOde,
    grid: &[f64],
    c_samples: &[f64],
    tol: &ToleranceConfig,
) -> Result<NormalFormOdeReport, OdeLabError> {
    if grid.is_empty() || c_samples.is_empty() {
        return Err(OdeLabError::Structure(
            "empty grid or constant sample set".into(),
        ));
    }
    let x = x_sym();
    let y = y_sym();
    let solution = nf.solution_expr()?;
    let derivative = diff_expr(&solution, &x)?;
    // The carrier is the linear profile's own closed form; the readout
    // applied to it is exactly `solution`, so both directions of the inverse
    // check see the same states the residual sweep will visit.
    let carrier = LinearFirstOrder::new(nf.p().clone(), nf.q().clone(), nf.x0(), nf.interval())?
        .solution_expr()?;
    let evaluator = Evaluator::new(tol);

    let mut inverse_residual = 0.0f64;
    let mut env = Env::new();
    let mut state_env = Env::new();
    for &cval in c_samples {
        env.set(NormalForm::constant_name(), cval);
        for &xv in grid {
            env.set(x.clone(), xv);
            let z = evaluator.eval(&carrier, &env)?;
            let yv = evaluator.eval(&solution, &env)?;
            state_env.set(x.clone(), xv);
            state_env.set(y.clone(), yv);
            let z_back = evaluator.eval(&ode.phi, &state_env)?;
            inverse_residual = inverse_residual.max((z_back - z).abs());
        }
    }
    let (ylo, yhi) = ode.y_range;
    for &xv in grid {
        for yv in linspace(ylo, yhi, 9) {
            state_env.set(x.clone(), xv);
            state_env.set(y.clone(), yv);
            let z = evaluator.eval(&ode.phi, &state_env)?;
            let mut readout_env = Env::new();
            readout_env.set(x.clone(), xv);
            readout_env.set(w_sym(), z);
            let y_back = evaluator.eval(nf.theta_hat(), &readout_env)?;
            inverse_residual = inverse_residual.max((y_back - yv).abs());
        }
    }
    if inverse_residual > tol.constancy_tol {
        return Err(OdeLabError::InverseCheckFailed {
            residual: inverse_residual,
            limit: tol.constancy_tol,
        });
    }

    let mut max_ode_residual = 0.0f64;
    for &cval in c_samples {
        env.set(NormalForm::constant_name(), cval);
        for &xv in grid {
            env.set(x.clone(), xv);
            let yv = evaluator.eval(&solution, &env)?;
            let dyv = evaluator.eval(&derivative, &env)?;
            max_ode_residual = max_ode_residual.max(ode.residual(xv, yv, dyv, tol)?);
        }
    }
    Ok(NormalFormOdeReport {
        inverse_residual,
        max_ode_residual,
        ok: max_ode_residual <= tol.constancy_tol,
    })
}

/// The oscillator u'' + Q(x) u = 0 on an interval with a base point.
#[derive(Debug, Clone)]
pub struct SecondOrderEq {
    coefficient: ExprRef,
    x0: f64,
    interval: (f64, f64),
    breakpoints: Vec<f64>,
}

impl SecondOrderEq {
    pub fn new(
        coefficient: ExprRef,
        x0: f64,
        interval: (f64, f64),
    ) -> Result<Self, OdeLabError> {
        check_interval(interval)?;
        let (lo, hi) = interval;
        if !(lo <= x0 && x0 <= hi) {
            return Err(OdeLabError::GridOutsideDomain { x: x0, lo, hi });
        }
        check_over_x("restoring coefficient", &coefficient)?;
        Ok(SecondOrderEq {
            coefficient,
            x0,
            interval,
            breakpoints: Vec::new(),
        })
    }

    /// Declares jump points of the coefficient. The phase solver restarts
    /// its step at each, so adaptive error control never brackets a jump.
    pub fn with_breakpoints(mut self, mut points: Vec<f64>) -> Self {
        let (lo, hi) = self.interval;
        points.retain(|p| lo < *p && *p < hi);
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.dedup();
        self.breakpoints = points;
        self
    }

    pub fn coefficient(&self) -> &ExprRef {
        &self.coefficient
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn interval(&self) -> (f64, f64) {
        self.interval
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Coefficient value at one point.
    pub fn coefficient_at(&self, x: f64, tol: &ToleranceConfig) -> Result<f64, OdeLabError> {
        let evaluator = Evaluator::new(tol);
        let env = Env::new().with(x_sym(), x);
        Ok(evaluator.eval(&self.coefficient, &env)?)
    }
}

/// Phase portrait of one oscillator solution. The state is carried as
/// (u, u') = rho (sin theta, cos theta), which turns the second-order
/// equation into the first-order pair
///
///   theta'     = cos^2 theta + Q sin^2 theta,
///   (log rho)' = (1 - Q) sin theta cos theta.
///
/// The amplitude law is forced, not chosen: differentiate u = rho sin theta
/// and insist on u' = rho cos theta, and the angle equation leaves exactly
/// (1 - Q) sin cos for rho'/rho. The angle itself is integrated continuously
/// with no branch reduction, so it can wind monotonically.
#[derive(Debug, Clone, Serialize)]
pub struct PruferTrajectory {
    pub x0: f64,
    pub theta0: f64,
    pub grid: Vec<f64>,
    pub theta: Vec<f64>,
    pub logrho: Vec<f64>,
    pub u: Vec<f64>,
    pub du: Vec<f64>,
}

pub fn prufer_forward(
    eq: &SecondOrderEq,
    u0: f64,
    du0: f64,
    grid: &[f64],
    tol: &ToleranceConfig,
) -> Result<PruferTrajectory, OdeLabError> {
    if u0 == 0.0 && du0 == 0.0 {
        return Err(OdeLabError::TrivialInitialData);
    }
    let (lo, hi) = eq.interval;
    for &xv in grid {
        if !(lo <= xv && xv <= hi) {
            return Err(OdeLabError::GridOutsideDomain { x: xv, lo, hi });
        }
    }
    let theta0 = u0.atan2(du0);
    let logrho0 = 0.5 * (u0 * u0 + du0 * du0).ln();

    let evaluator = Evaluator::new(tol);
    let mut env = Env::new();
    let coefficient = eq.coefficient.clone();
    let mut rhs = |t: f64, s: &[f64], ds: &mut [f64]| -> Result<(), EvalError> {
        env.set("x", t);
        let qv = evaluator.eval(&coefficient, &env)?;
        let (sin_t, cos_t) = s[0].sin_cos();
        ds[0] = cos_t * cos_t + qv * sin_t * sin_t;
        ds[1] = (1.0 - qv) * sin_t * cos_t;
        Ok(())
    };
    let mut targets = grid.to_vec();
    targets.extend(eq.breakpoints.iter().copied());
    let opts = OdeOptions {
        rtol: tol.ode_tol,
        atol: tol.ode_tol * 1e-2,
        max_steps: 2_000_000,
    };
    let rows = solve_to_targets(&mut rhs, eq.x0, &[theta0, logrho0], &targets, opts)
        .map_err(from_ode)?;

    let mut theta = Vec::with_capacity(grid.len());
    let mut logrho = Vec::with_capacity(grid.len());
    let mut u = Vec::with_capacity(grid.len());
    let mut du = Vec::with_capacity(grid.len());
    for row in rows.into_iter().take(grid.len()) {
        let rho = row[1].exp();
        theta.push(row[0]);
        logrho.push(row[1]);
        u.push(rho * row[0].sin());
        du.push(rho * row[0].cos());
    }
    Ok(PruferTrajectory {
        x0: eq.x0,
        theta0,
        grid: grid.to_vec(),
        theta,
        logrho,
        u,
        du,
    })
}

/// Constancy audit of the angular flow against its one-quadrature first
/// integral.
#[derive(Debug, Clone, Serialize)]
pub struct WitnessReport {
    pub frozen_coefficient: f64,
    pub singular: bool,
    pub min_denominator: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_deviation: Option<f64>,
    pub valid: bool,
}

/// Floor under cos^2 + Q sin^2 before the first integral is declared
/// singular on the swept angle range.
const DENOMINATOR_FLOOR: f64 = 1e-8;

/// For a frozen constant coefficient the angle equation is autonomous, so
/// its travel-time integral over dpsi / (cos^2 psi + Q sin^2 psi) from the
/// starting angle must advance exactly like x - x0 along true trajectories.
/// The integral is taken along the swept angle range, never through a
/// branch reduction; if the denominator vanishes somewhere on that range
/// the witness is reported singular instead of being forced across.
pub fn restricted_integrability_witness(
    frozen_coefficient: f64,
    trajectories: &[PruferTrajectory],
    tol: &ToleranceConfig,
) -> Result<WitnessReport, OdeLabError> {
    if trajectories.is_empty() {
        return Err(OdeLabError::Structure("no trajectories supplied".into()));
    }
    let mut min_denominator = f64::INFINITY;
    for traj in trajectories {
        let mut lo = traj.theta0;
        let mut hi = traj.theta0;
        for &th in &traj.theta {
            lo = lo.min(th);
            hi = hi.max(th);
        }
        for psi in linspace(lo, hi, 401) {
            let (s, c) = psi.sin_cos();
            min_denominator = min_denominator.min(c * c + frozen_coefficient * s * s);
        }
    }
    if min_denominator < DENOMINATOR_FLOOR {
        return Ok(WitnessReport {
            frozen_coefficient,
            singular: true,
            min_denominator,
            max_deviation: None,
            valid: false,
        });
    }

    let angle = Symbol::new("a");
    let avoid = BTreeSet::from([angle.clone(), x_sym()]);
    let psi = fresh_symbol("t", &avoid);
    let denominator = Expr::add(
        Expr::pow(Expr::cos(Expr::var(psi.clone())), Rational::new(2, 1)),
        Expr::mul(
            Expr::number(frozen_coefficient),
            Expr::pow(Expr::sin(Expr::var(psi.clone())), Rational::new(2, 1)),
        ),
    );
    let evaluator = Evaluator::new(tol);
    let mut max_deviation = 0.0f64;
    let mut env = Env::new();
    for traj in trajectories {
        let first_integral = Expr::integral(
            psi.clone(),
            Expr::number(traj.theta0),
            Expr::var(angle.clone()),
            Expr::div(Expr::number(1.0), denominator.clone()),
        );
        for (xv, th) in traj.grid.iter().zip(&traj.theta) {
            env.set(angle.clone(), *th);
            let advanced = evaluator.eval(&first_integral, &env)?;
            max_deviation = max_deviation.max((advanced - (xv - traj.x0)).abs());
        }
    }
    let valid = max_deviation <= tol.constancy_tol;
    Ok(WitnessReport {
        frozen_coefficient,
        singular: false,
        min_denominator,
        max_deviation: Some(max_deviation),
        valid,
    })
}

/// Two-point probe for x-dependence of the restoring coefficient.
#[derive(Debug, Clone, Serialize)]
pub struct ObstructionReport {
    pub coefficient_gap: f64,
    pub derivable: bool,
    pub max_determinant: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness_angles: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identity_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduced_residual: Option<f64>,
}

/// If an angle-only change of variables conjugated the phase flow at two
/// points where the coefficient differs, its curvature ratio g = phi''/phi'
/// would have to satisfy
///
///   g'(y) (cos^2 y + Q sin^2 y) + g(y) (Q - 1) sin 2y + 2 (Q - 1) cos 2y = 0
///
/// at both points, hence also the two-point difference with the coefficient
/// gap divided out,
///
///   g'(y) sin^2 y + g(y) sin 2y + 2 cos 2y = 0.
///
/// Part (a) certifies that sin 2y and 2 cos 2y, the first and second
/// derivative profiles of sin^2, are linearly independent at the sampled
/// angles by recording the pair determinant; no single g can cancel an
/// independent pair. Part (b), when a candidate map is supplied, evaluates
/// both identities with every derivative symbolic; a working candidate
/// would need both residuals near zero.
pub fn nonconstancy_obstruction(
    eq: &SecondOrderEq,
    x1: f64,
    x2: f64,
    y_samples: &[f64],
    candidate: Option<&ExprRef>,
    tol: &ToleranceConfig,
) -> Result<ObstructionReport, OdeLabError> {
    if y_samples.len() < 2 {
        return Err(OdeLabError::Structure(
            "need at least two angle samples".into(),
        ));
    }
    let q1 = eq.coefficient_at(x1, tol)?;
    let q2 = eq.coefficient_at(x2, tol)?;
    let coefficient_gap = (q1 - q2).abs();
    let derivable = coefficient_gap > tol.constancy_tol;

    let mut max_determinant = 0.0f64;
    let mut witness_angles = None;
    for (i, &yi) in y_samples.iter().enumerate() {
        for &yj in &y_samples[i + 1..] {
            let det = (2.0 * yi).sin() * 2.0 * (2.0 * yj).cos()
                - 2.0 * (2.0 * yi).cos() * (2.0 * yj).sin();
            if det.abs() > max_determinant {
                max_determinant = det.abs();
                witness_angles = Some((yi, yj));
            }
        }
    }

    let (identity_residual, reduced_residual) = match candidate {
        None => (None, None),
        Some(phi) => {
            let y = y_sym();
            for var in phi.free_vars() {
                if var != y {
                    return Err(OdeLabError::ForeignVariable {
                        role: "candidate map",
                        var,
                    });
                }
            }
            let d1 = diff_expr(phi, &y)?;
            let d2 = diff_expr(&d1, &y)?;
            let ratio = Expr::div(d2, d1);
            let ratio_prime = diff_expr(&ratio, &y)?;

            let two_y = Expr::mul(Expr::number(2.0), Expr::var(y.clone()));
            let sin2 = Expr::sin(two_y.clone());
            let cos2 = Expr::cos(two_y);
            let sin_sq = Expr::pow(Expr::sin(Expr::var(y.clone())), Rational::new(2, 1));
            let cos_sq = Expr::pow(Expr::cos(Expr::var(y.clone())), Rational::new(2, 1));
            let q_expr = eq.coefficient.clone();
            let q_minus_one = Expr::sub(q_expr.clone(), Expr::number(1.0));

            let full = Expr::add(
                Expr::mul(
                    ratio_prime.clone(),
                    Expr::add(cos_sq, Expr::mul(q_expr, sin_sq.clone())),
                ),
                Expr::add(
                    Expr::mul(ratio.clone(), Expr::mul(q_minus_one.clone(), sin2.clone())),
                    Expr::mul(Expr::number(2.0), Expr::mul(q_minus_one, cos2.clone())),
                ),
            );
            let reduced = Expr::add(
                Expr::mul(ratio_prime, sin_sq),
                Expr::add(Expr::mul(ratio, sin2), Expr::mul(Expr::number(2.0), cos2)),
            );

            let evaluator = Evaluator::new(tol);
            let mut env = Env::new();
            let mut full_max = 0.0f64;
            let mut reduced_max = 0.0f64;
            for &yv in y_samples {
                env.set(y.clone(), yv);
                for xv in [x1, x2] {
                    env.set(x_sym(), xv);
                    full_max = full_max.max(evaluator.eval(&full, &env)?.abs());
                }
                reduced_max = reduced_max.max(evaluator.eval(&reduced, &env)?.abs());
            }
            (Some(full_max), Some(reduced_max))
        }
    };

    Ok(ObstructionReport {
        coefficient_gap,
        derivable,
        max_determinant,
        witness_angles,
        identity_residual,
        reduced_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use std::f64::consts::{FRAC_PI_3, FRAC_PI_4};

    fn tol() -> ToleranceConfig {
        ToleranceConfig::default()
    }

    fn expr(src: &str) -> ExprRef {
        parse_expr(src).expect("test expression parses")
    }

    #[test]
    fn closed_form_solution_matches_antiderivative() {
        let eq = LinearFirstOrder::new(expr("1"), expr("x"), 0.0, (0.0, 2.0)).unwrap();
        let xs = linspace(0.0, 2.0, 9);
        let out = solve_linear_first_order(&eq, 0.0, &xs, &tol()).unwrap();
        for (x, v) in xs.iter().zip(&out.values) {
            let want = x - 1.0 + (-x).exp();
            assert!((v - want).abs() < 1e-8, "x={x}: {v} vs {want}");
        }
        // Value at x = 1 pinned to the antiderivative in closed form.
        assert!((out.values[4] - 0.367_879_441_171_442_33).abs() < 1e-9);
        assert!(
            out.max_residual < 10.0 * tol().ode_tol,
            "residual {}",
            out.max_residual
        );
    }

    #[test]
    fn zero_coefficients_hold_constant() {
        let eq = LinearFirstOrder::new(expr("0"), expr("0"), 0.5, (0.0, 1.0)).unwrap();
        let out = solve_linear_first_order(&eq, 3.0, &linspace(0.0, 1.0, 5), &tol()).unwrap();
        for v in &out.values {
            assert!((v - 3.0).abs() < 1e-12);
        }
        assert!(out.max_residual < 1e-12);
    }

    #[test]
    fn identity_transform_recovers_the_linear_class() {
        let ode = make_transformed_ode(
            expr("y"),
            expr("1"),
            expr("x"),
            (0.0, 2.0),
            (-2.0, 2.0),
            &tol(),
            7,
        )
        .unwrap();
        let slope = ode.rhs(0.5, 2.0, &tol()).unwrap();
        assert!((slope - (0.5 - 2.0)).abs() < 1e-12);
        assert!(ode.residual(0.5, 2.0, slope, &tol()).unwrap() < 1e-12);
    }

    #[test]
    fn cubic_transform_exposes_the_explicit_slope() {
        let ode = make_transformed_ode(
            expr("y^3 + y"),
            expr("0"),
            expr("1"),
            (0.0, 2.0),
            (-2.0, 2.0),
            &tol(),
            7,
        )
        .unwrap();
        // Implicit solutions satisfy y^3 + y = x + k; walk the k = 0 branch
        // by Newton inversion and check the explicit slope along it.
        for &x in &linspace(0.0, 2.0, 9) {
            let mut y = 0.5f64;
            for _ in 0..60 {
                y -= (y * y * y + y - x) / (3.0 * y * y + 1.0);
            }
            let slope = 1.0 / (3.0 * y * y + 1.0);
            assert!((ode.rhs(x, y, &tol()).unwrap() - slope).abs() < 1e-10);
            assert!(ode.residual(x, y, slope, &tol()).unwrap() < 1e-10);
        }
    }

    #[test]
    fn flat_transform_is_rejected() {
        let err = make_transformed_ode(
            expr("x"),
            expr("0"),
            expr("1"),
            (0.0, 1.0),
            (-1.0, 1.0),
            &tol(),
            7,
        )
        .unwrap_err();
        assert!(matches!(err, OdeLabError::DegenerateTransform { .. }));
    }

    #[test]
    fn normal_form_is_verified_against_its_class() {
        let nf = NormalForm::new(expr("1"), expr("x"), Expr::var(w_sym()), 0.0, (0.0, 2.0))
            .unwrap();
        let ode = make_transformed_ode(
            expr("y"),
            expr("1"),
            expr("x"),
            (0.0, 2.0),
            (-3.0, 3.0),
            &tol(),
            7,
        )
        .unwrap();
        let report = verify_normal_form_solves(
            &nf,
            &ode,
            &linspace(0.0, 2.0, 9),
            &[-1.0, 0.5, 2.0],
            &tol(),
        )
        .unwrap();
        assert!(report.ok, "residual {}", report.max_ode_residual);
        assert!(report.inverse_residual < 1e-9);
        assert!(report.max_ode_residual < 1e-6);
    }

    #[test]
    fn cube_root_readout_inverts_the_cubic_transform() {
        let nf = NormalForm::new(expr("0"), expr("1"), expr("w^(1/3)"), 0.0, (0.0, 2.0))
            .unwrap();
        let ode = make_transformed_ode(
            expr("y^3"),
            expr("0"),
            expr("1"),
            (0.0, 2.0),
            (1.0, 1.8),
            &tol(),
            7,
        )
        .unwrap();
        let report =
            verify_normal_form_solves(&nf, &ode, &linspace(0.0, 2.0, 9), &[1.5, 3.0], &tol())
                .unwrap();
        assert!(report.ok, "residual {}", report.max_ode_residual);
        assert!(report.inverse_residual < 1e-9);
    }

    #[test]
    fn mismatched_source_is_reported_not_masked() {
        let nf = NormalForm::new(expr("1"), expr("x"), Expr::var(w_sym()), 0.0, (0.0, 2.0))
            .unwrap();
        let ode = make_transformed_ode(
            expr("y"),
            expr("1"),
            expr("x + 1"),
            (0.0, 2.0),
            (-3.0, 3.0),
            &tol(),
            7,
        )
        .unwrap();
        let report =
            verify_normal_form_solves(&nf, &ode, &linspace(0.0, 2.0, 9), &[0.5], &tol()).unwrap();
        assert!(!report.ok);
        assert!(report.max_ode_residual > 0.1);
    }

    #[test]
    fn non_inverse_pair_is_a_hard_error() {
        let nf =
            NormalForm::new(expr("0"), expr("1"), Expr::var(w_sym()), 0.0, (0.0, 2.0)).unwrap();
        let ode = make_transformed_ode(
            expr("y^3 + y"),
            expr("0"),
            expr("1"),
            (0.0, 2.0),
            (1.0, 2.0),
            &tol(),
            7,
        )
        .unwrap();
        let err = verify_normal_form_solves(&nf, &ode, &linspace(0.0, 2.0, 5), &[1.5], &tol())
            .unwrap_err();
        assert!(matches!(err, OdeLabError::InverseCheckFailed { .. }));
    }

    #[test]
    fn unit_coefficient_rotates_at_unit_speed() {
        let eq = SecondOrderEq::new(expr("1"), 0.0, (0.0, 4.0)).unwrap();
        let xs = linspace(0.0, 4.0, 17);
        let out = prufer_forward(&eq, 0.0, 1.0, &xs, &tol()).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            assert!((out.theta[i] - x).abs() < 1e-8, "theta at {x}");
            assert!(out.logrho[i].abs() < 1e-8, "logrho at {x}");
            assert!((out.u[i] - x.sin()).abs() < 1e-8);
            assert!((out.du[i] - x.cos()).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_coefficient_reconstructs_a_straight_line() {
        let eq = SecondOrderEq::new(expr("0"), 0.0, (0.0, 2.0)).unwrap();
        let xs = linspace(0.0, 2.0, 21);
        let out = prufer_forward(&eq, 0.0, 1.0, &xs, &tol()).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            assert!((out.u[i] - x).abs() < 1e-7, "u({x}) = {}", out.u[i]);
            assert!((out.du[i] - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn phase_solver_rejects_the_origin() {
        let eq = SecondOrderEq::new(expr("1"), 0.0, (0.0, 1.0)).unwrap();
        let err = prufer_forward(&eq, 0.0, 0.0, &[0.5], &tol()).unwrap_err();
        assert!(matches!(err, OdeLabError::TrivialInitialData));
    }

    #[test]
    fn airy_type_reconstruction_satisfies_the_oscillator() {
        // Residual |u'' + x u| probed with a fourth-order stencil on a fine
        // grid; the stencil only audits, the solve itself is adaptive.
        let eq = SecondOrderEq::new(expr("x"), 0.0, (0.0, 2.0)).unwrap();
        let h = 0.005;
        let n = (2.0 / h) as usize + 1;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
        let out = prufer_forward(&eq, 0.0, 1.0, &xs, &tol()).unwrap();
        let mut worst = 0.0f64;
        for i in 2..n - 2 {
            let dd = (-out.u[i - 2] + 16.0 * out.u[i - 1] - 30.0 * out.u[i]
                + 16.0 * out.u[i + 1]
                - out.u[i + 2])
                / (12.0 * h * h);
            worst = worst.max((dd + xs[i] * out.u[i]).abs());
        }
        assert!(worst < 1e-5, "oscillator residual {worst}");
    }

    #[test]
    fn constant_coefficient_witness_tracks_travel_time() {
        let eq = SecondOrderEq::new(expr("4"), 0.0, (0.0, 2.0)).unwrap();
        let xs = linspace(0.0, 2.0, 17);
        let fast = prufer_forward(&eq, 0.0, 1.0, &xs, &tol()).unwrap();
        let tilted = prufer_forward(&eq, 1.0, 1.0, &xs, &tol()).unwrap();
        let report = restricted_integrability_witness(4.0, &[fast, tilted], &tol()).unwrap();
        assert!(!report.singular);
        assert!(report.valid, "deviation {:?}", report.max_deviation);
        assert!(report.max_deviation.unwrap() < 1e-6);
    }

    #[test]
    fn witness_passes_on_a_branch_avoiding_range() {
        let eq = SecondOrderEq::new(expr("0"), 0.0, (0.0, 2.0)).unwrap();
        let line = prufer_forward(&eq, 0.0, 1.0, &linspace(0.0, 2.0, 9), &tol()).unwrap();
        let report = restricted_integrability_witness(0.0, &[line], &tol()).unwrap();
        assert!(!report.singular);
        assert!(report.valid, "deviation {:?}", report.max_deviation);
    }

    #[test]
    fn witness_reports_a_singular_denominator() {
        // u = 1 solves u'' = 0; its angle sits at the denominator zero.
        let eq = SecondOrderEq::new(expr("0"), 0.0, (0.0, 1.0)).unwrap();
        let flat = prufer_forward(&eq, 1.0, 0.0, &linspace(0.0, 1.0, 5), &tol()).unwrap();
        let report = restricted_integrability_witness(0.0, &[flat], &tol()).unwrap();
        assert!(report.singular);
        assert!(!report.valid);
        assert!(report.max_deviation.is_none());
    }

    #[test]
    fn sampled_profiles_are_independent_at_the_canonical_pair() {
        let eq = SecondOrderEq::new(expr("x"), 0.0, (0.0, 2.0)).unwrap();
        let report =
            nonconstancy_obstruction(&eq, 0.0, 1.0, &[FRAC_PI_4, FRAC_PI_3], None, &tol())
                .unwrap();
        assert!(report.derivable);
        assert!((report.max_determinant - 1.0).abs() < 1e-12);
        assert_eq!(report.witness_angles, Some((FRAC_PI_4, FRAC_PI_3)));
        assert!(report.identity_residual.is_none());
    }

    #[test]
    fn identity_candidate_fails_the_conjugacy_identity() {
        let eq = SecondOrderEq::new(expr("x"), 0.0, (0.0, 2.0)).unwrap();
        let phi = expr("y");
        let report =
            nonconstancy_obstruction(&eq, 0.0, 1.0, &[FRAC_PI_4, FRAC_PI_3], Some(&phi), &tol())
                .unwrap();
        assert!(report.derivable);
        let full = report.identity_residual.unwrap();
        let reduced = report.reduced_residual.unwrap();
        assert!(full > 0.5, "identity residual {full}");
        assert!((full - 1.0).abs() < 1e-12);
        assert!((reduced - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_coefficient_yields_no_obstruction_pair() {
        let eq = SecondOrderEq::new(expr("2"), 0.0, (0.0, 2.0)).unwrap();
        let report =
            nonconstancy_obstruction(&eq, 0.3, 1.7, &[FRAC_PI_4, FRAC_PI_3], None, &tol())
                .unwrap();
        assert!(!report.derivable);
        assert!(report.coefficient_gap < tol().constancy_tol);
    }

    #[test]
    fn foreign_symbols_and_stray_grids_are_refused() {
        let err = LinearFirstOrder::new(expr("u1"), expr("0"), 0.0, (0.0, 1.0)).unwrap_err();
        assert!(matches!(err, OdeLabError::ForeignVariable { .. }));
        let eq = SecondOrderEq::new(expr("1"), 0.0, (0.0, 1.0)).unwrap();
        let err = prufer_forward(&eq, 1.0, 0.0, &[2.0], &tol()).unwrap_err();
        assert!(matches!(err, OdeLabError::GridOutsideDomain { .. }));
    }
}
