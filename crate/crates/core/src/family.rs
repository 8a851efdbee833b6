//! Parameterized solution families built over quadrature systems.
//!
//! A family pairs a hierarchical system with an outer combining map F over
//! the shifted running values and a readout theta(x, w):
//!
//!   y(x, c1..cn) = theta(x, F(s_1(x,c)+c_1, ..., s_n(x,c)+c_n))
//!
//! The module also hosts the checks the reduction engine leans on: whether a
//! family's parameters collapse to a single effective constant (the
//! fundamental equality), whether two families trace out the same solutions
//! over a working box, and whether the combining map is admissible.

use crate::expr::{diff_expr, CalculusError, Env, EvalError, Evaluator, ExprRef, Symbol};
use crate::sampling::{chebyshev_points, latin_hypercube, linspace, rng_from_seed};
use crate::system::{QuadratureSystem, SystemError};
use crate::tolerance::ToleranceConfig;
use serde::Serialize;
use std::collections::BTreeSet;
use std::fmt;

/// Name of the j-th combining-map argument (1-based).
pub fn v_sym(j: usize) -> Symbol {
    Symbol::new(&format!("v{j}"))
}

/// The readout's second argument.
pub fn w_sym() -> Symbol {
    Symbol::new("w")
}

/// Smallest slope magnitude treated as bounded away from zero.
pub const ADMISSIBILITY_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum FamilyError {
    ForeignVariable { role: &'static str, var: Symbol },
    Structure(String),
    ParamCount { needed: usize, got: usize },
    BoxDim { expected: usize, got: usize },
    EmptyRange { lo: f64, hi: f64 },
    System(SystemError),
    Eval(EvalError),
    Calculus(CalculusError),
}

impl fmt::Display for FamilyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FamilyError::ForeignVariable { role, var } => {
                write!(f, "{role} uses unexpected variable `{var}`")
            }
            FamilyError::Structure(msg) => write!(f, "{msg}"),
            FamilyError::ParamCount { needed, got } => {
                write!(f, "family takes {needed} parameters, got {got}")
            }
            FamilyError::BoxDim { expected, got } => {
                write!(f, "working box has {got} ranges, family needs {expected}")
            }
            FamilyError::EmptyRange { lo, hi } => write!(f, "range [{lo}, {hi}] is empty"),
            FamilyError::System(e) => write!(f, "{e}"),
            FamilyError::Eval(e) => write!(f, "{e}"),
            FamilyError::Calculus(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for FamilyError {}

impl From<SystemError> for FamilyError {
    fn from(e: SystemError) -> Self {
        FamilyError::System(e)
    }
}

impl From<EvalError> for FamilyError {
    fn from(e: EvalError) -> Self {
        FamilyError::Eval(e)
    }
}

impl From<CalculusError> for FamilyError {
    fn from(e: CalculusError) -> Self {
        FamilyError::Calculus(e)
    }
}

/// Axis-aligned parameter box the numeric checks sample from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkingBox {
    ranges: Vec<(f64, f64)>,
}

impl WorkingBox {
    pub fn new(ranges: Vec<(f64, f64)>) -> Result<Self, FamilyError> {
        for &(lo, hi) in &ranges {
            if !(lo < hi) {
                return Err(FamilyError::EmptyRange { lo, hi });
            }
        }
        Ok(WorkingBox { ranges })
    }

    /// `[-half, half]` in every coordinate.
    pub fn symmetric(dim: usize, half: f64) -> Self {
        WorkingBox {
            ranges: vec![(-half, half); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn last_range(&self) -> (f64, f64) {
        *self.ranges.last().expect("non-empty box")
    }

    pub fn with_last_range(&self, lo: f64, hi: f64) -> Result<Self, FamilyError> {
        let mut ranges = self.ranges.clone();
        *ranges.last_mut().expect("non-empty box") = (lo, hi);
        WorkingBox::new(ranges)
    }

    /// The box with one axis removed; used when a reduction step deletes a
    /// parameter.
    pub fn without_axis(&self, idx: usize) -> Self {
        let mut ranges = self.ranges.clone();
        ranges.remove(idx);
        WorkingBox { ranges }
    }

    /// Same center, widths scaled by `factor`. Used to sample strictly inside
    /// the box so matches near the boundary stay bracketable.
    pub fn interior(&self, factor: f64) -> Self {
        WorkingBox {
            ranges: self
                .ranges
                .iter()
                .map(|&(lo, hi)| {
                    let mid = 0.5 * (lo + hi);
                    let half = 0.5 * (hi - lo) * factor;
                    (mid - half, mid + half)
                })
                .collect(),
        }
    }

    /// Zero where the box allows it, otherwise the range midpoint.
    pub fn resting_point(&self) -> Vec<f64> {
        self.ranges
            .iter()
            .map(|&(lo, hi)| if lo <= 0.0 && 0.0 <= hi { 0.0 } else { 0.5 * (lo + hi) })
            .collect()
    }

    pub fn check_dim(&self, expected: usize) -> Result<(), FamilyError> {
        if self.dim() != expected {
            return Err(FamilyError::BoxDim {
                expected,
                got: self.dim(),
            });
        }
        Ok(())
    }
}

/// A parameterized family of scalar functions of x.
pub trait Family {
    fn param_dim(&self) -> usize;
    fn base_point(&self) -> f64;
    fn interval(&self) -> (f64, f64);

    fn eval(&self, x: f64, c: &[f64], tol: &ToleranceConfig) -> Result<f64, FamilyError>;

    /// Partial derivatives with respect to each parameter, one row per grid
    /// point.
    fn partials_grid(
        &self,
        xs: &[f64],
        c: &[f64],
        tol: &ToleranceConfig,
    ) -> Result<Vec<Vec<f64>>, FamilyError>;

    fn eval_grid(
        &self,
        xs: &[f64],
        c: &[f64],
        tol: &ToleranceConfig,
    ) -> Result<Vec<f64>, FamilyError> {
        xs.iter().map(|&x| self.eval(x, c, tol)).collect()
    }

    fn partials_at(
        &self,
        x: f64,
        c: &[f64],
        tol: &ToleranceConfig,
    ) -> Result<Vec<f64>, FamilyError> {
        Ok(self
            .partials_grid(&[x], c, tol)?
            .pop()
            .expect("one row"))
    }
}

/// A family given directly by an expression over x and named parameters.
/// Parameter order fixes the meaning of the constant vector.
#[derive(Debug, Clone)]
pub struct ExprFamily {
    expr: ExprRef,
    params: Vec<Symbol>,
    partials: Vec<ExprRef>,
    x0: f64,
    interval: (f64, f64),
}

impl ExprFamily {
    pub fn new(
        expr: ExprRef,
        params: Vec<Symbol>,
        x0: f64,
        interval: (f64, f64),
    ) -> Result<Self, FamilyError> {
        expr.check_structure()
            .map_err(|e| FamilyError::Structure(e.to_string()))?;
        let mut allowed: BTreeSet<Symbol> = params.iter().cloned().collect();
        allowed.insert(Symbol::new("x"));
        for fv in expr.free_vars() {
            if !allowed.contains(&fv) {
                return Err(FamilyError::ForeignVariable {
                    role: "family expression",
                    var: fv,
                });
            }
        }
        let partials = params
            .iter()
            .map(|p| diff_expr(&expr, p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ExprFamily {
            expr,
            params,
            partials,
            x0,
            interval,
        })
    }

    pub fn expr(&self) -> &ExprRef {
        &self.expr
    }

    fn env(&self, x: f64, c: &[f64]) -> Result<Env, FamilyError> {
        if c.len() < self.params.len() {
            return Err(FamilyError::ParamCount {
                needed: self.params.len(),
                got: c.len(),
            });
        }
        let mut env = Env::new();
        env.set("x", x);
        for (p, &value) in self.params.iter().zip(c) {
            env.set(p.clone(), value);
        }
        Ok(env)
    }
}

impl Family for ExprFamily {
    fn param_dim(&self) -> usize {
        self.params.len()
    }

    fn base_point(&self) -> f64 {
        self.x0
    }

    fn interval(&self) -> (f64, f64) {
        self.interval
    }

    fn eval(&self, x: f64, c: &[f64], tol: &ToleranceConfig) -> Result<f64, FamilyError> {
        let env = self.env(x, c)?;
        Ok(Evaluator::new(tol).eval(&self.expr, &env)?)
    }

    fn partials_grid(
        &self,
        xs: &[f64],
        c: &[f64],
        tol: &ToleranceConfig,
    ) -> Result<Vec<Vec<f64>>, FamilyError> {
        let evaluator = Evaluator::new(tol);
        xs.iter()
            .map(|&x| {
                let env = self.env(x, c)?;
                self.partials
                    .iter()
                    .map(|d| evaluator.eval(d, &env).map_err(FamilyError::from))
                    .collect()
            })
            .collect()
    }
}

/// A family of the nested-quadrature form: running values from `sys`, shifted
/// by the constants, combined by `outer` (over v1..vn) and read out through
/// `theta` (over x, w).
#[derive(Debug, Clone)]
pub struct QuadratureIntegral {
    sys: QuadratureSystem,
    outer: ExprRef,
    theta: ExprRef,
    d_outer: Vec<ExprRef>,
    d_theta: ExprRef,
}

impl QuadratureIntegral {
    pub fn new(
        sys: QuadratureSystem,
        outer: ExprRef,
        theta: ExprRef,
    ) -> Result<Self, FamilyError> {
        let n = sys.len();
        outer
            .check_structure()
            .map_err(|e| FamilyError::Structure(e.to_string()))?;
        theta
            .check_structure()
            .map_err(|e| FamilyError::Structure(e.to_string()))?;
        let allowed: BTreeSet<Symbol> = (1..=n).map(v_sym).collect();
        for fv in outer.free_vars() {
            if !allowed.contains(&fv) {
                return Err(FamilyError::ForeignVariable {
                    role: "combining map",
                    var: fv,
                });
            }
        }
        let theta_allowed: BTreeSet<Symbol> = [Symbol::new("x"), w_sym()].into_iter().collect();
        for fv in theta.free_vars() {
            if !theta_allowed.contains(&fv) {
                return Err(FamilyError::ForeignVariable {
                    role: "readout",
                    var: fv,
                });
            }
        }
        let d_outer = (1..=n)
            .map(|j| diff_expr(&outer, &v_sym(j)))
            .collect::<Result<Vec<_>, _>>()?;
        let d_theta = diff_expr(&theta, &w_sym())?;
        Ok(QuadratureIntegral {
            sys,
            outer,
            theta,
            d_outer,
            d_theta,
        })
    }

    pub fn system(&self) -> &QuadratureSystem {
        &self.sys
    }

    pub fn outer(&self) -> &ExprRef {
        &self.outer
    }

    pub fn theta(&self) -> &ExprRef {
        &self.theta
    }

    fn check_params(&self, c: &[f64]) -> Result<(), FamilyError> {
        if c.len() < self.sys.len() {
            return Err(FamilyError::ParamCount {
                needed: self.sys.len(),
                got: c.len(),
            });
        }
        Ok(())
    }

    fn outer_env(c_shifted: &[f64]) -> Env {
        let mut env = Env::new();
        for (j, &value) in c_shifted.iter().enumerate() {
            env.set(v_sym(j + 1), value);
        }
        env
    }

    fn readout(
        &self,
        evaluator: &Evaluator,
        x: f64,
        shifted: &[f64],
    ) -> Result<f64, FamilyError> {
        let inner = evaluator.eval(&self.outer, &Self::outer_env(shifted))?;
        let mut env = Env::new();
        env.set("x", x);
        env.set(w_sym(), inner);
        Ok(evaluator.eval(&self.theta, &env)?)
    }
}

impl Family for QuadratureIntegral {
    fn param_dim(&self) -> usize {
        self.sys.len()
    }

    fn base_point(&self) -> f64 {
        self.sys.x0()
    }

    fn interval(&self) -> (f64, f64) {
        self.sys.interval()
    }

    fn eval(&self, x: f64, c: &[f64], tol: &ToleranceConfig) -> Result<f64, FamilyError> {
        self.check_params(c)?;
        let n = self.sys.len();
        let evaluator = Evaluator::new(tol);
        // All running values vanish at the base point, so no solve is needed.
        if x == self.sys.x0() {
            return self.readout(&evaluator, x, &c[..n]);
        }
        let s = self.sys.eval(x, &c[..n - 1], tol)?;
        let shifted: Vec<f64> = s.iter().zip(c).map(|(a, b)| a + b).collect();
        self.readout(&evaluator, x, &shifted)
    }

    fn eval_grid(
        &self,
        xs: &[f64],
        c: &[f64],
        tol: &ToleranceConfig,
    ) -> Result<Vec<f64>, FamilyError> {
        self.check_params(c)?;
        let n = self.sys.len();
        let evaluator = Evaluator::new(tol);
        let rows = self.sys.eval_grid(xs, &c[..n - 1], tol)?;
        xs.iter()
            .zip(rows)
            .map(|(&x, s)| {
                let shifted: Vec<f64> = s.iter().zip(c).map(|(a, b)| a + b).collect();
                self.readout(&evaluator, x, &shifted)
            })
            .collect()
    }

    fn partials_grid(
        &self,
        xs: &[f64],
        c: &[f64],
        tol: &ToleranceConfig,
    ) -> Result<Vec<Vec<f64>>, FamilyError> {
        self.check_params(c)?;
        let n = self.sys.len();
        let evaluator = Evaluator::new(tol);
        let (values, partials) = self.sys.eval_with_partials_grid(xs, &c[..n - 1], tol)?;
        let mut out = Vec::with_capacity(xs.len());
        for ((&x, s), w) in xs.iter().zip(&values).zip(&partials) {
            let shifted: Vec<f64> = s.iter().zip(c).map(|(a, b)| a + b).collect();
            let outer_env = Self::outer_env(&shifted);
            let inner = evaluator.eval(&self.outer, &outer_env)?;
            let slopes: Vec<f64> = self
                .d_outer
                .iter()
                .map(|d| evaluator.eval(d, &outer_env))
                .collect::<Result<_, _>>()?;
            let mut theta_env = Env::new();
            theta_env.set("x", x);
            theta_env.set(w_sym(), inner);
            let outer_slope = evaluator.eval(&self.d_theta, &theta_env)?;
            let mut row = Vec::with_capacity(n);
            for k in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    let sensitivity = if k < n - 1 { w[j][k] } else { 0.0 };
                    let delta = if j == k { 1.0 } else { 0.0 };
                    acc += slopes[j] * (sensitivity + delta);
                }
                row.push(outer_slope * acc);
            }
            out.push(row);
        }
        Ok(out)
    }
}

/// Sampled lower bounds for the two slopes the reduction steps divide by.
#[derive(Debug, Clone, Serialize)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    /// min |d outer / d v_n| over the samples.
    pub min_last_slope: f64,
    /// min |d theta / d w| over the samples.
    pub min_readout_slope: f64,
    pub floor: f64,
}

/// Samples the two admissibility slopes over the interval and box.
pub fn check_admissible(
    fam: &QuadratureIntegral,
    working_box: &WorkingBox,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<AdmissibilityReport, FamilyError> {
    let n = fam.param_dim();
    working_box.check_dim(n)?;
    let (lo, hi) = fam.interval();
    let evaluator = Evaluator::new(tol);
    let mut rng = rng_from_seed(seed);
    let draws = (tol.sample_count / 4).max(8);
    let c_samples = latin_hypercube(&mut rng, working_box.ranges(), draws);
    let xs = chebyshev_points(lo, hi, 7);

    let mut min_last = f64::INFINITY;
    let mut min_readout = f64::INFINITY;
    for c in &c_samples {
        let rows = fam.sys.eval_grid(&xs, &c[..n - 1], tol)?;
        for (&x, s) in xs.iter().zip(rows) {
            let shifted: Vec<f64> = s.iter().zip(c).map(|(a, b)| a + b).collect();
            let outer_env = QuadratureIntegral::outer_env(&shifted);
            let inner = evaluator.eval(&fam.outer, &outer_env)?;
            let last = evaluator.eval(&fam.d_outer[n - 1], &outer_env)?;
            let mut theta_env = Env::new();
            theta_env.set("x", x);
            theta_env.set(w_sym(), inner);
            let readout = evaluator.eval(&fam.d_theta, &theta_env)?;
            min_last = min_last.min(last.abs());
            min_readout = min_readout.min(readout.abs());
        }
    }
    Ok(AdmissibilityReport {
        admissible: min_last >= ADMISSIBILITY_FLOOR && min_readout >= ADMISSIBILITY_FLOOR,
        min_last_slope: min_last,
        min_readout_slope: min_readout,
        floor: ADMISSIBILITY_FLOOR,
    })
}

/// Worst normalized violation of the single-effective-parameter identity.
#[derive(Debug, Clone, Serialize)]
pub struct FundamentalEqualityReport {
    pub max_residual: f64,
    pub worst_pair: (usize, usize),
    pub worst_x: f64,
    pub worst_constants: Vec<f64>,
}

/// Checks that the parameter gradient at any x stays parallel to the gradient
/// at the base point: for all pairs (i, j),
///
///   d_i y(x, c) * d_j y(x0, c)  =  d_j y(x, c) * d_i y(x0, c).
///
/// Families whose constants enter only through a single effective scalar
/// satisfy this identity; residuals are normalized by the gradient norms.
pub fn fundamental_equality_residual(
    fam: &dyn Family,
    working_box: &WorkingBox,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<FundamentalEqualityReport, FamilyError> {
    let n = fam.param_dim();
    working_box.check_dim(n)?;
    let (lo, hi) = fam.interval();
    let x0 = fam.base_point();
    let mut xs = vec![x0];
    xs.extend(chebyshev_points(lo, hi, 7));
    let mut rng = rng_from_seed(seed);
    let draws = (tol.sample_count / 4).max(8);
    let c_samples = latin_hypercube(&mut rng, working_box.ranges(), draws);

    let mut report = FundamentalEqualityReport {
        max_residual: 0.0,
        worst_pair: (0, 0),
        worst_x: x0,
        worst_constants: Vec::new(),
    };
    for c in &c_samples {
        let grads = fam.partials_grid(&xs, c, tol)?;
        let base = &grads[0];
        let base_norm = norm(base);
        for (&x, grad) in xs.iter().zip(&grads).skip(1) {
            let scale = (norm(grad) * base_norm).max(ADMISSIBILITY_FLOOR);
            for i in 0..n {
                for j in (i + 1)..n {
                    let residual = (grad[i] * base[j] - grad[j] * base[i]).abs() / scale;
                    if residual > report.max_residual {
                        report.max_residual = residual;
                        report.worst_pair = (i + 1, j + 1);
                        report.worst_x = x;
                        report.worst_constants = c.clone();
                    }
                }
            }
        }
    }
    Ok(report)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Fundamental equality plus a direct reconstruction probe: constants agreeing
/// at the base point must agree along the whole interval.
#[derive(Debug, Clone, Serialize)]
pub struct EffectiveParameterReport {
    pub fundamental: FundamentalEqualityReport,
    pub max_reconstruction_gap: f64,
    pub reconstructions: usize,
    pub skipped: usize,
}

pub fn effective_parameter_test(
    fam: &dyn Family,
    working_box: &WorkingBox,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<EffectiveParameterReport, FamilyError> {
    let n = fam.param_dim();
    working_box.check_dim(n)?;
    let fundamental = fundamental_equality_residual(fam, working_box, tol, seed)?;

    let (lo, hi) = fam.interval();
    let x0 = fam.base_point();
    let grid = linspace(lo, hi, 17);
    let mut rng = rng_from_seed(seed ^ 0x9e37_79b9);
    let draws = (tol.sample_count / 8).max(4);
    let sample_box = working_box.interior(0.9);
    let sources = latin_hypercube(&mut rng, sample_box.ranges(), draws);
    let partners = latin_hypercube(&mut rng, sample_box.ranges(), draws);

    let mut max_gap: f64 = 0.0;
    let mut done = 0usize;
    let mut skipped = 0usize;
    for (c, partner) in sources.iter().zip(&partners) {
        let target = fam.eval(x0, c, tol)?;
        let mut d = partner.clone();
        match match_last_param(fam, &mut d, target, working_box, tol)? {
            true => {}
            false => {
                skipped += 1;
                continue;
            }
        }
        let ys = fam.eval_grid(&grid, c, tol)?;
        let zs = fam.eval_grid(&grid, &d, tol)?;
        for (a, b) in ys.iter().zip(&zs) {
            max_gap = max_gap.max((a - b).abs());
        }
        done += 1;
    }
    Ok(EffectiveParameterReport {
        fundamental,
        max_reconstruction_gap: max_gap,
        reconstructions: done,
        skipped,
    })
}

/// Bisects the last entry of `d` inside the box's last range until the family
/// value at the base point matches `target`. Returns false when the range
/// does not bracket the target.
fn match_last_param(
    fam: &dyn Family,
    d: &mut [f64],
    target: f64,
    working_box: &WorkingBox,
    tol: &ToleranceConfig,
) -> Result<bool, FamilyError> {
    let x0 = fam.base_point();
    let (mut lo, mut hi) = working_box.last_range();
    let last = d.len() - 1;
    d[last] = lo;
    let mut f_lo = fam.eval(x0, d, tol)? - target;
    d[last] = hi;
    let f_hi = fam.eval(x0, d, tol)? - target;
    if f_lo == 0.0 {
        d[last] = lo;
        return Ok(true);
    }
    if f_hi == 0.0 {
        d[last] = hi;
        return Ok(true);
    }
    if f_lo.signum() == f_hi.signum() {
        return Ok(false);
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        d[last] = mid;
        let f_mid = fam.eval(x0, d, tol)? - target;
        if f_mid == 0.0 {
            return Ok(true);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    d[last] = 0.5 * (lo + hi);
    Ok(true)
}

/// Two-sided sampled comparison of the solution sets of two families.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub equivalent: bool,
    /// max over sampled source constants of the best target-trajectory gap.
    pub forward_gap: f64,
    /// Same with the roles swapped.
    pub backward_gap: f64,
    pub samples_per_direction: usize,
    /// Human-readable notes for samples that could not be matched.
    pub failures: Vec<String>,
}

/// Boxes steering the equivalence check. Each family samples its own
/// trajectories from `sample` and is matched against the other family inside
/// that family's `bracket`; brackets are usually wider, because base-point
/// values over a sample box can exceed the box itself.
#[derive(Debug, Clone)]
pub struct EquivalenceBoxes {
    pub a_sample: WorkingBox,
    pub a_bracket: WorkingBox,
    pub b_sample: WorkingBox,
    pub b_bracket: WorkingBox,
}

impl EquivalenceBoxes {
    /// Computes matched bracket boxes from the two sample boxes: each bracket
    /// is the family's sample box with its last range widened until it covers
    /// the other family's sampled base-point values.
    pub fn matched(
        a: &dyn Family,
        a_sample: WorkingBox,
        b: &dyn Family,
        b_sample: WorkingBox,
        tol: &ToleranceConfig,
        seed: u64,
    ) -> Result<Self, FamilyError> {
        let b_bracket = bracket_for_targets(a, &a_sample, b, &b_sample, tol, seed)?;
        let a_bracket = bracket_for_targets(b, &b_sample, a, &a_sample, tol, seed ^ 0x7e1d)?;
        Ok(EquivalenceBoxes {
            a_sample,
            a_bracket,
            b_sample,
            b_bracket,
        })
    }
}

/// Checks that every sampled trajectory of one family is realized by the
/// other, in both directions. Matching fixes all but the last constant of the
/// probed family at its bracket box's resting point and bisects the last
/// constant so base-point values agree; bisection never leaves the bracket
/// box, and unmatched samples are reported as failures rather than
/// extrapolated.
pub fn check_equivalence(
    a: &dyn Family,
    b: &dyn Family,
    boxes: &EquivalenceBoxes,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<EquivalenceReport, FamilyError> {
    boxes.a_sample.check_dim(a.param_dim())?;
    boxes.a_bracket.check_dim(a.param_dim())?;
    boxes.b_sample.check_dim(b.param_dim())?;
    boxes.b_bracket.check_dim(b.param_dim())?;
    let draws = (tol.sample_count / 8).max(4);
    let (forward_gap, mut failures) =
        one_direction(a, &boxes.a_sample, b, &boxes.b_bracket, tol, seed, draws, "forward")?;
    let (backward_gap, back_failures) = one_direction(
        b,
        &boxes.b_sample,
        a,
        &boxes.a_bracket,
        tol,
        seed ^ 0x51ab,
        draws,
        "backward",
    )?;
    failures.extend(back_failures);
    let equivalent = failures.is_empty()
        && forward_gap <= tol.equiv_tol
        && backward_gap <= tol.equiv_tol;
    Ok(EquivalenceReport {
        equivalent,
        forward_gap,
        backward_gap,
        samples_per_direction: draws,
        failures,
    })
}

/// Equivalence with both sample boxes given and brackets derived
/// automatically.
pub fn check_equivalence_matched(
    a: &dyn Family,
    a_box: &WorkingBox,
    b: &dyn Family,
    b_box: &WorkingBox,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<EquivalenceReport, FamilyError> {
    let boxes = EquivalenceBoxes::matched(a, a_box.clone(), b, b_box.clone(), tol, seed)?;
    check_equivalence(a, b, &boxes, tol, seed)
}

#[allow(clippy::too_many_arguments)]
fn one_direction(
    source: &dyn Family,
    source_box: &WorkingBox,
    target: &dyn Family,
    target_box: &WorkingBox,
    tol: &ToleranceConfig,
    seed: u64,
    draws: usize,
    label: &str,
) -> Result<(f64, Vec<String>), FamilyError> {
    let (s_lo, s_hi) = source.interval();
    let (t_lo, t_hi) = target.interval();
    let lo = s_lo.max(t_lo);
    let hi = s_hi.min(t_hi);
    let grid = linspace(lo, hi, 33);
    let x0 = source.base_point();

    let mut rng = rng_from_seed(seed);
    let samples = latin_hypercube(&mut rng, source_box.interior(0.9).ranges(), draws);
    let mut max_gap: f64 = 0.0;
    let mut failures = Vec::new();
    for c in &samples {
        let value = source.eval(x0, c, tol)?;
        let mut d = target_box.resting_point();
        if !match_last_param(target, &mut d, value, target_box, tol)? {
            failures.push(format!(
                "{label}: base-point value {value:.6e} not bracketed by the \
                 target box's last range {:?}",
                target_box.last_range()
            ));
            continue;
        }
        let ys = source.eval_grid(&grid, c, tol)?;
        let zs = target.eval_grid(&grid, &d, tol)?;
        for (a, b) in ys.iter().zip(&zs) {
            max_gap = max_gap.max((a - b).abs());
        }
    }
    Ok((max_gap, failures))
}

/// Builds a box for `target` whose last range covers, with margin, every
/// base-point value `source` attains over its own box. Other ranges are taken
/// from `template`. Expansion doubles outward from the template's last range
/// and gives up at a width of 1e6 (returning the capped box, which the
/// equivalence check will then report honestly).
pub fn bracket_for_targets(
    source: &dyn Family,
    source_box: &WorkingBox,
    target: &dyn Family,
    template: &WorkingBox,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<WorkingBox, FamilyError> {
    source_box.check_dim(source.param_dim())?;
    template.check_dim(target.param_dim())?;
    let x0 = source.base_point();
    let mut rng = rng_from_seed(seed);
    let draws = (tol.sample_count / 4).max(8);
    let samples = latin_hypercube(&mut rng, source_box.ranges(), draws);
    let mut value_lo = f64::INFINITY;
    let mut value_hi = f64::NEG_INFINITY;
    for c in &samples {
        let v = source.eval(x0, c, tol)?;
        value_lo = value_lo.min(v);
        value_hi = value_hi.max(v);
    }
    let margin = 0.1 * (value_hi - value_lo).abs().max(1.0);
    let value_lo = value_lo - margin;
    let value_hi = value_hi + margin;

    let covered = |bx: &WorkingBox| -> Result<bool, FamilyError> {
        let (lo, hi) = bx.last_range();
        let mut d = bx.resting_point();
        let last = d.len() - 1;
        d[last] = lo;
        let at_lo = target.eval(target.base_point(), &d, tol)?;
        d[last] = hi;
        let at_hi = target.eval(target.base_point(), &d, tol)?;
        let (min, max) = if at_lo <= at_hi { (at_lo, at_hi) } else { (at_hi, at_lo) };
        Ok(min <= value_lo && value_hi <= max)
    };

    let mut bx = template.clone();
    for _ in 0..40 {
        if covered(&bx)? {
            return Ok(bx);
        }
        let (lo, hi) = bx.last_range();
        let mid = 0.5 * (lo + hi);
        let half = (hi - lo).max(1e-3);
        if half > 1e6 {
            break;
        }
        bx = bx.with_last_range(mid - half, mid + half)?;
    }
    Ok(bx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn tol() -> ToleranceConfig {
        ToleranceConfig::default()
    }

    fn example_family() -> QuadratureIntegral {
        let sys = QuadratureSystem::new(
            0.0,
            (0.0, 2.0),
            vec![
                parse_expr("1").unwrap(),
                parse_expr("x * exp(u1)").unwrap(),
            ],
        )
        .unwrap();
        QuadratureIntegral::new(
            sys,
            parse_expr("exp(-v1) * v2").unwrap(),
            parse_expr("w").unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn example_family_matches_closed_form() {
        // y(x, c) = e^{-(x+c1)} (s2 + c2), s2 = e^{c1}((x-1)e^x + 1),
        // so y = e^{-x} ((x-1)e^x + 1) + e^{-x-c1} c2.
        let fam = example_family();
        let t = tol();
        for (x, c1, c2) in [(1.0, 0.0, 0.0), (1.5, 0.4, -0.7), (0.5, -0.3, 1.2)] {
            let y = fam.eval(x, &[c1, c2], &t).unwrap();
            let expect =
                (-x as f64).exp() * ((x - 1.0) * x.exp() + 1.0) + (-x - c1).exp() * c2;
            assert!((y - expect).abs() < 1e-8, "x={x}: {y} vs {expect}");
        }
    }

    #[test]
    fn base_point_eval_is_direct() {
        let fam = example_family();
        let t = tol();
        let y = fam.eval(0.0, &[0.3, 0.8], &t).unwrap();
        // F(c) = e^{-0.3} * 0.8.
        assert!((y - (-0.3f64).exp() * 0.8).abs() < 1e-12);
    }

    #[test]
    fn partials_match_finite_differences() {
        let fam = example_family();
        let t = tol();
        let c = [0.2, -0.4];
        let grads = fam.partials_grid(&[1.2], &c, &t).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut up = c;
            up[k] += h;
            let mut dn = c;
            dn[k] -= h;
            let fd = (fam.eval(1.2, &up, &t).unwrap() - fam.eval(1.2, &dn, &t).unwrap())
                / (2.0 * h);
            assert!(
                (grads[0][k] - fd).abs() < 1e-6,
                "k={k}: {} vs {fd}",
                grads[0][k]
            );
        }
    }

    #[test]
    fn foreign_variables_rejected() {
        let sys = QuadratureSystem::new(0.0, (0.0, 1.0), vec![parse_expr("1").unwrap()]).unwrap();
        let err = QuadratureIntegral::new(
            sys.clone(),
            parse_expr("v1 + v2").unwrap(),
            parse_expr("w").unwrap(),
        );
        assert!(matches!(err, Err(FamilyError::ForeignVariable { .. })));
        let err = QuadratureIntegral::new(
            sys,
            parse_expr("v1").unwrap(),
            parse_expr("w + u1").unwrap(),
        );
        assert!(matches!(err, Err(FamilyError::ForeignVariable { .. })));
    }

    #[test]
    fn admissibility_flags_flat_readout() {
        let sys =
            QuadratureSystem::new(0.0, (0.0, 1.0), vec![parse_expr("x").unwrap()]).unwrap();
        let good = QuadratureIntegral::new(
            sys.clone(),
            parse_expr("v1").unwrap(),
            parse_expr("w").unwrap(),
        )
        .unwrap();
        let bx = WorkingBox::symmetric(1, 2.0);
        let t = tol();
        assert!(check_admissible(&good, &bx, &t, 3).unwrap().admissible);

        let flat = QuadratureIntegral::new(
            sys,
            parse_expr("v1").unwrap(),
            parse_expr("3").unwrap(),
        )
        .unwrap();
        let report = check_admissible(&flat, &bx, &t, 3).unwrap();
        assert!(!report.admissible);
        assert!(report.min_readout_slope < report.floor);
    }

    #[test]
    fn fundamental_equality_holds_for_the_example() {
        let fam = example_family();
        let bx = WorkingBox::symmetric(2, 2.0);
        let report = fundamental_equality_residual(&fam, &bx, &tol(), 5).unwrap();
        assert!(report.max_residual < 1e-6, "residual {}", report.max_residual);
    }

    #[test]
    fn fundamental_equality_fails_for_two_genuine_parameters() {
        let fam = ExprFamily::new(
            parse_expr("c1 * sin(x) + c2 * cos(x)").unwrap(),
            vec![Symbol::new("c1"), Symbol::new("c2")],
            0.0,
            (0.0, 2.0),
        )
        .unwrap();
        let bx = WorkingBox::symmetric(2, 2.0);
        let report = fundamental_equality_residual(&fam, &bx, &tol(), 5).unwrap();
        assert!(report.max_residual > 0.1, "residual {}", report.max_residual);
    }

    #[test]
    fn effective_parameter_reconstruction() {
        let fam = example_family();
        let bx = WorkingBox::new(vec![(-2.0, 2.0), (-20.0, 20.0)]).unwrap();
        let report = effective_parameter_test(&fam, &bx, &tol(), 7).unwrap();
        assert!(report.reconstructions > 0);
        assert!(
            report.max_reconstruction_gap < 1e-6,
            "gap {}",
            report.max_reconstruction_gap
        );
    }

    #[test]
    fn equivalence_of_a_family_with_itself() {
        let fam = example_family();
        let bx = WorkingBox::symmetric(2, 2.0);
        let report = check_equivalence_matched(&fam, &bx, &fam, &bx, &tol(), 9).unwrap();
        assert!(report.equivalent, "report: {report:?}");
    }

    #[test]
    fn equivalence_rejects_different_families() {
        let a = ExprFamily::new(
            parse_expr("exp(-x) * c1").unwrap(),
            vec![Symbol::new("c1")],
            0.0,
            (0.0, 2.0),
        )
        .unwrap();
        let b = ExprFamily::new(
            parse_expr("sin(x) + c1").unwrap(),
            vec![Symbol::new("c1")],
            0.0,
            (0.0, 2.0),
        )
        .unwrap();
        let bx = WorkingBox::symmetric(1, 8.0);
        let report = check_equivalence_matched(&a, &bx, &b, &bx, &tol(), 9).unwrap();
        assert!(!report.equivalent);
        assert!(report.forward_gap > 1e-2 || report.backward_gap > 1e-2);
    }

    #[test]
    fn bracket_expands_to_cover_targets() {
        // Source base-point values reach e^2 * 2 ~ 14.8, outside [-2, 2].
        let fam = example_family();
        let src_box = WorkingBox::symmetric(2, 2.0);
        let template = WorkingBox::symmetric(2, 2.0);
        let bx =
            bracket_for_targets(&fam, &src_box, &fam, &template, &tol(), 11).unwrap();
        let (lo, hi) = bx.last_range();
        assert!(lo < -14.0 && hi > 14.0, "got [{lo}, {hi}]");
    }
}
