//! Hierarchical systems of quadratures.
//!
//! A system of size n over base point x0 is a list of integrands
//! `phi_1(x), phi_2(x, u1), ..., phi_n(x, u1, ..., u(n-1))` defining the
//! running values
//!
//!   s_1(x)              = int_{x0}^{x} phi_1(t) dt
//!   s_{j+1}(x, c_1..c_j) = int_{x0}^{x} phi_{j+1}(t, s_1(t)+c_1, ..., s_j(t,..)+c_j) dt
//!
//! Evaluation integrates all components as one joint initial value problem;
//! sensitivities with respect to the shift constants ride along as a
//! variational system using symbolic integrand derivatives.

use crate::expr::{diff_expr, CalculusError, Env, EvalError, Evaluator, ExprRef, Symbol};
use crate::numeric::ode::{solve_to_targets, OdeError, OdeOptions};
use crate::sampling::{chebyshev_points, latin_hypercube, rng_from_seed};
use crate::tolerance::ToleranceConfig;
use nalgebra::DMatrix;
use serde::Serialize;
use std::collections::BTreeSet;
use std::fmt;

/// Name of the j-th running value inside integrand DSL strings (1-based).
pub fn u_sym(j: usize) -> Symbol {
    Symbol::new(&format!("u{j}"))
}

/// The independent variable of every integrand.
pub fn x_sym() -> Symbol {
    Symbol::new("x")
}

/// Largest supported system size; the DSL names running values u1..u9.
pub const MAX_QUADRATURES: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub enum SystemError {
    NoIntegrands,
    TooManyQuadratures(usize),
    EmptyInterval { lo: f64, hi: f64 },
    BasePointOutsideInterval { x0: f64, lo: f64, hi: f64 },
    /// Integrand at `index` (1-based) uses a variable outside {x, u1..u(index-1)}.
    ForeignVariable { index: usize, var: Symbol },
    Structure(String),
    NotEnoughConstants { needed: usize, got: usize },
    Eval(EvalError),
    Solver(String),
    Calculus(CalculusError),
}

impl fmt::Display for SystemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SystemError::NoIntegrands => write!(f, "a system needs at least one integrand"),
            SystemError::TooManyQuadratures(n) => {
                write!(f, "{n} quadratures exceeds the supported maximum of {MAX_QUADRATURES}")
            }
            SystemError::EmptyInterval { lo, hi } => {
                write!(f, "interval [{lo}, {hi}] is empty")
            }
            SystemError::BasePointOutsideInterval { x0, lo, hi } => {
                write!(f, "base point {x0} lies outside [{lo}, {hi}]")
            }
            SystemError::ForeignVariable { index, var } => write!(
                f,
                "integrand {index} uses `{var}`, which is not x or an earlier running value"
            ),
            SystemError::Structure(msg) => write!(f, "{msg}"),
            SystemError::NotEnoughConstants { needed, got } => {
                write!(f, "system needs {needed} shift constants, got {got}")
            }
            SystemError::Eval(e) => write!(f, "integrand evaluation failed: {e}"),
            SystemError::Solver(msg) => write!(f, "initial value solve failed: {msg}"),
            SystemError::Calculus(e) => write!(f, "integrand differentiation failed: {e}"),
        }
    }
}

impl std::error::Error for SystemError {}

impl From<EvalError> for SystemError {
    fn from(e: EvalError) -> Self {
        SystemError::Eval(e)
    }
}

impl From<CalculusError> for SystemError {
    fn from(e: CalculusError) -> Self {
        SystemError::Calculus(e)
    }
}

fn from_ode(e: OdeError<EvalError>) -> SystemError {
    match e {
        OdeError::Rhs(inner) => SystemError::Eval(inner),
        other => SystemError::Solver(other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSystem {
    x0: f64,
    interval: (f64, f64),
    integrands: Vec<ExprRef>,
    /// Declared discontinuity points of the integrands; the solver restarts
    /// its step at each so adaptive error control never brackets a jump.
    breakpoints: Vec<f64>,
}

impl QuadratureSystem {
    pub fn new(
        x0: f64,
        interval: (f64, f64),
        integrands: Vec<ExprRef>,
    ) -> Result<Self, SystemError> {
        let (lo, hi) = interval;
        if integrands.is_empty() {
            return Err(SystemError::NoIntegrands);
        }
        if integrands.len() > MAX_QUADRATURES {
            return Err(SystemError::TooManyQuadratures(integrands.len()));
        }
        if !(lo < hi) {
            return Err(SystemError::EmptyInterval { lo, hi });
        }
        if !(lo <= x0 && x0 <= hi) {
            return Err(SystemError::BasePointOutsideInterval { x0, lo, hi });
        }
        for (idx, phi) in integrands.iter().enumerate() {
            phi.check_structure()
                .map_err(|e| SystemError::Structure(e.to_string()))?;
            let mut allowed: BTreeSet<Symbol> = BTreeSet::new();
            allowed.insert(x_sym());
            for j in 1..=idx {
                allowed.insert(u_sym(j));
            }
            for fv in phi.free_vars() {
                if !allowed.contains(&fv) {
                    return Err(SystemError::ForeignVariable {
                        index: idx + 1,
                        var: fv,
                    });
                }
            }
        }
        Ok(QuadratureSystem {
            x0,
            interval,
            integrands,
            breakpoints: Vec::new(),
        })
    }

    pub fn with_breakpoints(mut self, mut points: Vec<f64>) -> Self {
        let (lo, hi) = self.interval;
        points.retain(|p| lo < *p && *p < hi);
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.dedup();
        self.breakpoints = points;
        self
    }

    pub fn len(&self) -> usize {
        self.integrands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.integrands.is_empty()
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn interval(&self) -> (f64, f64) {
        self.interval
    }

    pub fn integrands(&self) -> &[ExprRef] {
        &self.integrands
    }

    pub fn integrand(&self, j: usize) -> &ExprRef {
        &self.integrands[j]
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Replaces the last integrand (used by constant absorption). The caller
    /// is responsible for the replacement's variable discipline, so this
    /// revalidates.
    pub fn with_last_integrand(&self, phi: ExprRef) -> Result<Self, SystemError> {
        let mut integrands = self.integrands.clone();
        *integrands.last_mut().expect("non-empty") = phi;
        let mut sys = QuadratureSystem::new(self.x0, self.interval, integrands)?;
        sys.breakpoints = self.breakpoints.clone();
        Ok(sys)
    }

    fn ode_options(tol: &ToleranceConfig) -> OdeOptions {
        OdeOptions {
            rtol: tol.ode_tol,
            atol: tol.ode_tol * 1e-2,
            max_steps: 2_000_000,
        }
    }

    fn check_constants(&self, c: &[f64]) -> Result<(), SystemError> {
        let needed = self.len().saturating_sub(1);
        if c.len() < needed {
            return Err(SystemError::NotEnoughConstants {
                needed,
                got: c.len(),
            });
        }
        Ok(())
    }

    /// Merges declared breakpoints lying strictly between x0 and the farthest
    /// target into the target list so the solver steps exactly onto them.
    fn augment_targets(&self, xs: &[f64]) -> Vec<f64> {
        let mut out = xs.to_vec();
        out.extend(self.breakpoints.iter().copied());
        out
    }

    /// Running values s(x) for the given shift constants.
    pub fn eval(&self, x: f64, c: &[f64], tol: &ToleranceConfig) -> Result<Vec<f64>, SystemError> {
        Ok(self.eval_grid(&[x], c, tol)?.pop().expect("one row"))
    }

    /// Running values at every point of `xs` from one joint solve.
    pub fn eval_grid(
        &self,
        xs: &[f64],
        c: &[f64],
        tol: &ToleranceConfig,
    ) -> Result<Vec<Vec<f64>>, SystemError> {
        self.check_constants(c)?;
        let n = self.len();
        let evaluator = Evaluator::new(tol);
        let mut env = Env::new();
        let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<(), EvalError> {
            env.set("x", t);
            for m in 0..n.saturating_sub(1) {
                env.set(u_sym(m + 1), y[m] + c[m]);
            }
            for (j, phi) in self.integrands.iter().enumerate() {
                dy[j] = evaluator.eval(phi, &env)?;
            }
            Ok(())
        };
        let targets = self.augment_targets(xs);
        let y0 = vec![0.0; n];
        let rows = solve_to_targets(&mut rhs, self.x0, &y0, &targets, Self::ode_options(tol))
            .map_err(from_ode)?;
        Ok(rows.into_iter().take(xs.len()).collect())
    }

    /// Running values plus the sensitivities d s_j / d c_k (k = 1..n-1) at
    /// every point of `xs`, from one joint variational solve. Returned as
    /// `(values, partials)` with `partials[row][j][k]`.
    #[allow(clippy::type_complexity)]
    pub fn eval_with_partials_grid(
        &self,
        xs: &[f64],
        c: &[f64],
        tol: &ToleranceConfig,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>), SystemError> {
        self.check_constants(c)?;
        let n = self.len();
        let n_shift = n.saturating_sub(1);

        // d phi_j / d u_m, computed once.
        let mut dphi: Vec<Vec<ExprRef>> = Vec::with_capacity(n);
        for (j, phi) in self.integrands.iter().enumerate() {
            let mut row = Vec::with_capacity(j);
            for m in 1..=j {
                row.push(diff_expr(phi, &u_sym(m))?);
            }
            dphi.push(row);
        }

        let evaluator = Evaluator::new(tol);
        let mut env = Env::new();
        let state = |j: usize, k: usize| n + j * n_shift + k;
        let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<(), EvalError> {
            env.set("x", t);
            for m in 0..n_shift {
                env.set(u_sym(m + 1), y[m] + c[m]);
            }
            let mut deriv_vals: Vec<Vec<f64>> = Vec::with_capacity(n);
            for (j, phi) in self.integrands.iter().enumerate() {
                dy[j] = evaluator.eval(phi, &env)?;
                let mut row = Vec::with_capacity(j);
                for d in &dphi[j] {
                    row.push(evaluator.eval(d, &env)?);
                }
                deriv_vals.push(row);
            }
            for j in 0..n {
                for k in 0..n_shift {
                    let mut acc = 0.0;
                    for m in 0..j.min(n_shift) {
                        let shift = if m == k { 1.0 } else { 0.0 };
                        acc += deriv_vals[j][m] * (y[state(m, k)] + shift);
                    }
                    dy[state(j, k)] = acc;
                }
            }
            Ok(())
        };

        let targets = self.augment_targets(xs);
        let y0 = vec![0.0; n + n * n_shift];
        let rows = solve_to_targets(&mut rhs, self.x0, &y0, &targets, Self::ode_options(tol))
            .map_err(from_ode)?;

        let mut values = Vec::with_capacity(xs.len());
        let mut partials = Vec::with_capacity(xs.len());
        for row in rows.into_iter().take(xs.len()) {
            values.push(row[..n].to_vec());
            let mut per_j = Vec::with_capacity(n);
            for j in 0..n {
                per_j.push(row[state(j, 0)..state(j, 0) + n_shift].to_vec());
            }
            partials.push(per_j);
        }
        Ok((values, partials))
    }
}

/// Witnessed linear-independence decision for a system's integrand family.
#[derive(Debug, Clone, Serialize)]
pub struct IndependenceReport {
    pub independent: bool,
    /// Shift constants at which the witness matrix was built (length n-1).
    pub witness_constants: Vec<f64>,
    /// Points realizing full rank, one per function.
    pub pivot_points: Vec<f64>,
    pub smallest_singular_value: f64,
    pub matrix_norm: f64,
    /// Absolute threshold the smallest singular value was compared against.
    pub threshold: f64,
}

/// Decides whether the running values x -> s_j(x; c) can be made linearly
/// independent by a choice of shift constants. Constants are searched by
/// Latin hypercube over [-2, 2]^(n-1); candidate points come from a Chebyshev
/// grid over the system interval; pivots are chosen greedily to maximize the
/// smallest singular value of the growing minor.
pub fn check_independence(
    sys: &QuadratureSystem,
    tol: &ToleranceConfig,
    seed: u64,
    search_budget: usize,
) -> Result<IndependenceReport, SystemError> {
    let n = sys.len();
    let (lo, hi) = sys.interval();
    let grid = chebyshev_points(lo, hi, 33.max(2 * n + 1));

    let mut candidates: Vec<Vec<f64>> = vec![vec![0.0; n.saturating_sub(1)]];
    if n > 1 {
        let mut rng = rng_from_seed(seed);
        let ranges = vec![(-2.0, 2.0); n - 1];
        candidates.extend(latin_hypercube(&mut rng, &ranges, search_budget));
    }

    let mut best: Option<IndependenceReport> = None;
    for constants in candidates {
        // Rows: grid points; columns: running values from one joint solve.
        // Candidates where the solve blows up are skipped.
        let values = match sys.eval_grid(&grid, &constants, tol) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let rows: Vec<(f64, Vec<f64>)> = grid.iter().copied().zip(values).collect();
        if rows.len() < n {
            continue;
        }

        // Greedy pivot growth: at stage k pick the point maximizing the
        // smallest singular value of the k x k leading minor.
        let mut chosen: Vec<usize> = Vec::new();
        for k in 1..=n {
            let mut best_idx = None;
            let mut best_sigma = -1.0;
            for (idx, (_, row)) in rows.iter().enumerate() {
                if chosen.contains(&idx) {
                    continue;
                }
                let mut m = DMatrix::zeros(k, k);
                for (r, &ci) in chosen.iter().enumerate() {
                    for col in 0..k {
                        m[(r, col)] = rows[ci].1[col];
                    }
                }
                for col in 0..k {
                    m[(k - 1, col)] = row[col];
                }
                let sigma = smallest_singular_value(&m);
                if sigma > best_sigma {
                    best_sigma = sigma;
                    best_idx = Some(idx);
                }
            }
            match best_idx {
                Some(i) => chosen.push(i),
                None => break,
            }
        }
        if chosen.len() < n {
            continue;
        }

        let mut m = DMatrix::zeros(n, n);
        for (r, &ci) in chosen.iter().enumerate() {
            for col in 0..n {
                m[(r, col)] = rows[ci].1[col];
            }
        }
        let svd = m.svd(false, false);
        let sigma_min = svd
            .singular_values
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        let norm = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
        let threshold = tol.rank_threshold * norm;
        let report = IndependenceReport {
            independent: sigma_min > 0.0 && sigma_min >= threshold,
            witness_constants: constants.clone(),
            pivot_points: chosen.iter().map(|&i| rows[i].0).collect(),
            smallest_singular_value: sigma_min,
            matrix_norm: norm,
            threshold,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                let score = |r: &IndependenceReport| {
                    if r.matrix_norm > 0.0 {
                        r.smallest_singular_value / r.matrix_norm
                    } else {
                        0.0
                    }
                };
                score(&report) > score(b)
            }
        };
        if better {
            best = Some(report);
        }
        if best.as_ref().map(|b| b.independent).unwrap_or(false) {
            break;
        }
    }

    best.ok_or_else(|| {
        SystemError::Solver("no usable sample points for the independence check".into())
    })
}

/// Deviation report for the shift-invariance identity g(s + c) = g(c).
#[derive(Debug, Clone, Serialize)]
pub struct InvarianceProbe {
    /// max |g(s(x)+c) - g(c)| over sampled (x, c).
    pub max_shift_deviation: f64,
    /// max |g(c) - g(c')| over sampled constant pairs; small for constant g.
    pub max_cross_deviation: f64,
}

/// Samples the invariance identity for `g` (an expression over c1..cn) along
/// the system's trajectories. On an independent system only constant g can
/// keep both deviations small.
pub fn invariance_probe(
    g: &ExprRef,
    sys: &QuadratureSystem,
    tol: &ToleranceConfig,
    seed: u64,
) -> Result<InvarianceProbe, SystemError> {
    let n = sys.len();
    let (lo, hi) = sys.interval();
    let mut rng = rng_from_seed(seed);
    let mut ranges = vec![(lo, hi)];
    ranges.extend(vec![(-2.0, 2.0); n]);
    let samples = latin_hypercube(&mut rng, &ranges, tol.sample_count.max(2));

    let evaluator = Evaluator::new(tol);
    let c_name = |i: usize| Symbol::new(&format!("c{}", i + 1));

    let mut g_at_c = Vec::with_capacity(samples.len());
    let mut max_shift: f64 = 0.0;
    for sample in &samples {
        let x = sample[0];
        let c = &sample[1..];
        let s = sys.eval(x, &c[..n.saturating_sub(1)], tol)?;
        let mut env_shifted = Env::new();
        let mut env_plain = Env::new();
        for i in 0..n {
            env_shifted.set(c_name(i), s[i] + c[i]);
            env_plain.set(c_name(i), c[i]);
        }
        let shifted = evaluator.eval(g, &env_shifted)?;
        let plain = evaluator.eval(g, &env_plain)?;
        max_shift = max_shift.max((shifted - plain).abs());
        g_at_c.push(plain);
    }

    let mut max_cross: f64 = 0.0;
    for i in 0..g_at_c.len() {
        for j in (i + 1)..g_at_c.len() {
            max_cross = max_cross.max((g_at_c[i] - g_at_c[j]).abs());
        }
    }
    Ok(InvarianceProbe {
        max_shift_deviation: max_shift,
        max_cross_deviation: max_cross,
    })
}

fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn sys(x0: f64, interval: (f64, f64), integrands: &[&str]) -> QuadratureSystem {
        QuadratureSystem::new(
            x0,
            interval,
            integrands.iter().map(|s| parse_expr(s).unwrap()).collect(),
        )
        .unwrap()
    }

    fn tol() -> ToleranceConfig {
        ToleranceConfig::default()
    }

    #[test]
    fn single_quadrature_is_the_plain_integral() {
        let s = sys(0.0, (0.0, 2.0), &["x"]);
        let v = s.eval(2.0, &[], &tol()).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn running_values_feed_later_integrands() {
        // phi1 = 1, phi2 = x * exp(u1); with c1 = 0:
        // s1(x) = x, s2(x) = int_0^x t e^t dt = (x-1)e^x + 1.
        let s = sys(0.0, (0.0, 2.0), &["1", "x * exp(u1)"]);
        let v = s.eval(1.0, &[0.0], &tol()).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-10);
        assert!((v[1] - 1.0).abs() < 1e-8, "got {}", v[1]);
        // Shift constant scales the second component by e^{c1}.
        let v = s.eval(1.0, &[0.5], &tol()).unwrap();
        assert!((v[1] - 0.5f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn base_point_values_vanish() {
        let s = sys(0.5, (0.0, 2.0), &["exp(x)", "u1 * x"]);
        let v = s.eval(0.5, &[0.7], &tol()).unwrap();
        assert!(v.iter().all(|&c| c.abs() < 1e-12));
    }

    #[test]
    fn foreign_variables_are_rejected() {
        let e = QuadratureSystem::new(
            0.0,
            (0.0, 1.0),
            vec![parse_expr("u1").unwrap()],
        );
        assert!(matches!(e, Err(SystemError::ForeignVariable { index: 1, .. })));
        let e = QuadratureSystem::new(
            0.0,
            (0.0, 1.0),
            vec![parse_expr("x").unwrap(), parse_expr("c1").unwrap()],
        );
        assert!(matches!(e, Err(SystemError::ForeignVariable { index: 2, .. })));
    }

    #[test]
    fn interval_validation() {
        assert!(matches!(
            QuadratureSystem::new(0.0, (1.0, 1.0), vec![parse_expr("x").unwrap()]),
            Err(SystemError::EmptyInterval { .. })
        ));
        assert!(matches!(
            QuadratureSystem::new(5.0, (0.0, 1.0), vec![parse_expr("x").unwrap()]),
            Err(SystemError::BasePointOutsideInterval { .. })
        ));
    }

    #[test]
    fn variational_partials_match_finite_differences() {
        let s = sys(0.0, (0.0, 2.0), &["1", "x * exp(u1)"]);
        let c = [0.3];
        let t = tol();
        let (_, partials) = s.eval_with_partials_grid(&[1.5], &c, &t).unwrap();
        let h = 1e-6;
        let plus = s.eval(1.5, &[c[0] + h], &t).unwrap();
        let minus = s.eval(1.5, &[c[0] - h], &t).unwrap();
        for j in 0..2 {
            let fd = (plus[j] - minus[j]) / (2.0 * h);
            assert!(
                (partials[0][j][0] - fd).abs() < 1e-6,
                "component {j}: variational {} vs fd {fd}",
                partials[0][j][0]
            );
        }
        // s1 does not depend on c1.
        assert!(partials[0][0][0].abs() < 1e-12);
    }

    #[test]
    fn independence_of_powers() {
        let s = sys(0.0, (0.0, 2.0), &["1", "x", "x^2"]);
        let r = check_independence(&s, &tol(), 1, 16).unwrap();
        assert!(r.independent, "report: {r:?}");
        assert_eq!(r.pivot_points.len(), 3);
    }

    #[test]
    fn dependent_integrands_are_caught() {
        let s = sys(0.0, (0.0, 2.0), &["1", "1 + 1 - 1"]);
        let r = check_independence(&s, &tol(), 1, 16).unwrap();
        assert!(!r.independent, "report: {r:?}");
    }

    #[test]
    fn constant_dependence_can_create_independence() {
        // phi2 integrates to x + c1 x^2 / 2: a duplicate of s1 = x at c1 = 0,
        // independent for any nonzero witness constant. The search must move
        // off the origin to see it.
        let s = sys(0.0, (0.0, 2.0), &["1", "1 + (u1 - x) * x"]);
        let r = check_independence(&s, &tol(), 1, 32).unwrap();
        assert!(r.independent, "report: {r:?}");
        assert!(r.witness_constants[0].abs() > 1e-9);
    }

    #[test]
    fn zero_integrand_is_never_independent() {
        let s = sys(0.0, (0.0, 2.0), &["0"]);
        let r = check_independence(&s, &tol(), 1, 4).unwrap();
        assert!(!r.independent);
    }

    #[test]
    fn invariance_probe_separates_constant_from_varying() {
        let s = sys(0.0, (0.0, 2.0), &["1", "x * exp(u1)"]);
        let t = tol();
        let constant = parse_expr("3").unwrap();
        let probe = invariance_probe(&constant, &s, &t, 11).unwrap();
        assert!(probe.max_shift_deviation < t.constancy_tol);
        assert!(probe.max_cross_deviation < t.constancy_tol);

        let varying = parse_expr("c1 + c2^2").unwrap();
        let probe = invariance_probe(&varying, &s, &t, 11).unwrap();
        assert!(probe.max_shift_deviation > 10.0 * t.constancy_tol);
    }

    #[test]
    fn breakpoints_allow_piecewise_integrands() {
        // phi = x^2 has a kink-free profile, but use a steep rational piece to
        // confirm the waypoint plumbing at least keeps results consistent.
        let smooth = sys(0.0, (0.0, 2.0), &["x^2"]);
        let with_bp = smooth.clone().with_breakpoints(vec![1.0, 1.5]);
        let t = tol();
        let a = smooth.eval(2.0, &[], &t).unwrap();
        let b = with_bp.eval(2.0, &[], &t).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-9);
        assert!((a[0] - 8.0 / 3.0).abs() < 1e-9);
    }
}
