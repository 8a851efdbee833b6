//! Shared tolerance bundle. Every numeric check in the crate reads its
//! thresholds from here so that one configuration governs a whole run.

use serde::Serialize;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToleranceConfig {
    /// Relative tolerance for quadrature and initial-value solves (the
    /// absolute tolerance is derived two orders tighter).
    pub ode_tol: f64,
    /// Scale factor for finite-difference step sizes.
    pub diff_step_scale: f64,
    /// Threshold for "is this sampled quantity constant".
    pub constancy_tol: f64,
    /// Relative singular-value floor for independence rank decisions.
    pub rank_threshold: f64,
    /// Maximum trajectory gap for two families to count as equivalent.
    pub equiv_tol: f64,
    /// Default number of samples in randomized checks.
    pub sample_count: usize,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        ToleranceConfig {
            ode_tol: 1e-9,
            diff_step_scale: 1e-4,
            constancy_tol: 1e-6,
            rank_threshold: 1e-6,
            equiv_tol: 1e-6,
            sample_count: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToleranceError(pub String);

impl fmt::Display for ToleranceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid tolerance configuration: {}", self.0)
    }
}

impl std::error::Error for ToleranceError {}

impl ToleranceConfig {
    /// All fields positive, and sampled-constancy decisions must sit well
    /// above integration error: `constancy_tol >= 10 * ode_tol`.
    pub fn validate(&self) -> Result<(), ToleranceError> {
        let fields = [
            ("ode_tol", self.ode_tol),
            ("diff_step_scale", self.diff_step_scale),
            ("constancy_tol", self.constancy_tol),
            ("rank_threshold", self.rank_threshold),
            ("equiv_tol", self.equiv_tol),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ToleranceError(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sample_count == 0 {
            return Err(ToleranceError("sample_count must be positive".into()));
        }
        if self.constancy_tol < 10.0 * self.ode_tol {
            return Err(ToleranceError(format!(
                "constancy_tol {} must be at least 10 * ode_tol {}",
                self.constancy_tol, self.ode_tol
            )));
        }
        Ok(())
    }

    pub fn with_ode_tol(mut self, v: f64) -> Self {
        self.ode_tol = v;
        self
    }

    pub fn with_constancy_tol(mut self, v: f64) -> Self {
        self.constancy_tol = v;
        self
    }
}
