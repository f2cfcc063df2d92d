//! Singular logarithmic free energy density, its convex split, and the
//! barrier safeguards that keep Newton iterates strictly inside (-1, 1).
//!
//! The homogeneous free energy is
//! `F(s) = (θ/2)[(1+s)ln(1+s) + (1-s)ln(1-s)] + (θc/2)(1-s²)`,
//! continuously extended to ±1 with `0·ln 0 = 0`. With
//! `F₀(s) = F(s) + (κ/2)s²` and `κ ≥ θc - θ`, the split part `F₀` is convex
//! on (-1, 1); treating `F₀'` implicitly and the concave remainder by the
//! secant average is what gives the steppers their unconditional per-step
//! energy dissipation.

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("potential parameters need 0 < theta < theta_c, got theta={theta}, theta_c={theta_c}")]
    InvalidParams { theta: f64, theta_c: f64 },
    #[error("barrier distance must lie in (0, 1), got {eps}")]
    InvalidBarrier { eps: f64 },
    #[error("argument {s} outside [-1, 1]")]
    OutOfDomain { s: f64 },
    #[error("argument {s} violates the (-1, 1) barrier (eps = {eps})")]
    BarrierViolation { s: f64, eps: f64 },
}

/// Parameters of the logarithmic potential plus the Newton barrier distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialParams<F: Scalar> {
    pub theta: F,
    pub theta_c: F,
    /// Newton safeguard: iterates are kept inside `[-1+eps, 1-eps]`.
    pub eps_barrier: F,
}

impl<F: Scalar> PotentialParams<F> {
    pub fn new(theta: F, theta_c: F, eps_barrier: F) -> Result<Self, PotentialError> {
        if !(theta > F::zero() && theta < theta_c) {
            return Err(PotentialError::InvalidParams {
                theta: theta.to_f64().unwrap_or(f64::NAN),
                theta_c: theta_c.to_f64().unwrap_or(f64::NAN),
            });
        }
        if !(eps_barrier > F::zero() && eps_barrier < F::one()) {
            return Err(PotentialError::InvalidBarrier {
                eps: eps_barrier.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self {
            theta,
            theta_c,
            eps_barrier,
        })
    }

    /// Default barrier distance 1e-9.
    pub fn with_default_barrier(theta: F, theta_c: F) -> Result<Self, PotentialError> {
        Self::new(theta, theta_c, F::of(1e-9))
    }
}

/// Convex-split constant: `F₀(s) = F(s) + (kappa/2) s²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexSplit<F: Scalar> {
    pub kappa: F,
}

/// Smallest admissible split constant, `max(θc - θ, 0)`: the curvature
/// `F''(s) = θ/(1-s²) - θc` attains its minimum `θ - θc` at `s = 0`.
pub fn kappa_min<F: Scalar>(p: &PotentialParams<F>) -> ConvexSplit<F> {
    ConvexSplit {
        kappa: (p.theta_c - p.theta).max(F::zero()),
    }
}

fn xlnx<F: Scalar>(x: F) -> F {
    if x <= F::zero() {
        F::zero()
    } else {
        x * x.ln()
    }
}

/// The logarithmic free energy density `F(s)` on `[-1, 1]`
/// (continuous extension at the endpoints).
pub fn f_log<F: Scalar>(s: F, p: &PotentialParams<F>) -> Result<F, PotentialError> {
    if s.abs() > F::one() {
        return Err(PotentialError::OutOfDomain {
            s: s.to_f64().unwrap_or(f64::NAN),
        });
    }
    let entropy = xlnx(F::one() + s) + xlnx(F::one() - s);
    Ok(p.theta * F::half() * entropy + p.theta_c * F::half() * (F::one() - s * s))
}

/// Convex part `F₀(s) = F(s) + (κ/2)s²` on `[-1, 1]`.
pub fn f0<F: Scalar>(
    s: F,
    p: &PotentialParams<F>,
    k: &ConvexSplit<F>,
) -> Result<F, PotentialError> {
    Ok(f_log(s, p)? + k.kappa * F::half() * s * s)
}

fn check_barrier<F: Scalar>(s: F, p: &PotentialParams<F>) -> Result<(), PotentialError> {
    if s.abs() >= F::one() - p.eps_barrier * F::half() {
        return Err(PotentialError::BarrierViolation {
            s: s.to_f64().unwrap_or(f64::NAN),
            eps: p.eps_barrier.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// `F₀'(s) = (θ/2) ln((1+s)/(1-s)) + (κ - θc) s`; monotone increasing for
/// `κ ≥ κ_min` and divergent at ±1.
pub fn f0_prime<F: Scalar>(
    s: F,
    p: &PotentialParams<F>,
    k: &ConvexSplit<F>,
) -> Result<F, PotentialError> {
    check_barrier(s, p)?;
    Ok(p.theta * F::half() * ((F::one() + s) / (F::one() - s)).ln() + (k.kappa - p.theta_c) * s)
}

/// `F₀''(s) = θ/(1-s²) + κ - θc`; nonnegative for `κ ≥ κ_min`.
pub fn f0_second<F: Scalar>(
    s: F,
    p: &PotentialParams<F>,
    k: &ConvexSplit<F>,
) -> Result<F, PotentialError> {
    check_barrier(s, p)?;
    Ok(p.theta / (F::one() - s * s) + k.kappa - p.theta_c)
}

/// Clamps `s` into `[-1+eps, 1-eps]`.
pub fn clamp_barrier<F: Scalar>(s: F, eps: F) -> F {
    debug_assert!(eps > F::zero() && eps < F::one());
    s.max(-F::one() + eps).min(F::one() - eps)
}
