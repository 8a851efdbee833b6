//! Low-level numeric kernels: adaptive quadrature and an adaptive embedded
//! Runge-Kutta initial-value solver. Both are generic over the integrand's
//! error type so callers can thread evaluation failures through unchanged.

pub mod ode;
pub mod quadrature;
