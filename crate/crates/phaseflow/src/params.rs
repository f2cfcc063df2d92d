//! Physical parameters shared by both models: specific densities and their
//! derived constants, coefficient functions with pointwise bounds, and the
//! potential/split configuration.

use crate::grid::{Field, Grid};
use crate::potential::{kappa_min, ConvexSplit, PotentialParams};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("specific densities must be positive, got rho_plus={rho_plus}, rho_minus={rho_minus}")]
    NonpositiveDensity { rho_plus: f64, rho_minus: f64 },
    #[error("matched densities (rho_plus == rho_minus) need the explicit matched-density flag")]
    MatchedDensities,
    #[error("coefficient {name} violates its positivity bounds on [-1, 1]: min {min}")]
    CoefficientBound { name: &'static str, min: f64 },
    #[error("friction gamma must be positive, got {gamma}")]
    NonpositiveGamma { gamma: f64 },
}

/// Scalar coefficient function of the phase field, with computable bounds
/// on `[-1, 1]`. `Constant(0)` is allowed only for the transition mobility
/// (the divergence-free reduction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coefficient<F: Scalar> {
    Constant {
        value: F,
    },
    /// `c0 + c2 s²`.
    Quadratic {
        c0: F,
        c2: F,
    },
}

impl<F: Scalar> Coefficient<F> {
    pub fn eval(&self, s: F) -> F {
        match *self {
            Self::Constant { value } => value,
            Self::Quadratic { c0, c2 } => c0 + c2 * s * s,
        }
    }

    /// Minimum over `[-1, 1]`.
    pub fn lower_bound(&self) -> F {
        match *self {
            Self::Constant { value } => value,
            Self::Quadratic { c0, c2 } => {
                if c2 >= F::zero() {
                    c0
                } else {
                    c0 + c2
                }
            }
        }
    }

    /// Maximum over `[-1, 1]`.
    pub fn upper_bound(&self) -> F {
        match *self {
            Self::Constant { value } => value,
            Self::Quadratic { c0, c2 } => {
                if c2 >= F::zero() {
                    c0 + c2
                } else {
                    c0
                }
            }
        }
    }

    pub fn is_identically_zero(&self) -> bool {
        self.lower_bound() == F::zero() && self.upper_bound() == F::zero()
    }

    /// Cellwise evaluation on a phase field.
    pub fn on_field(&self, phi: &Field<F>) -> Field<F> {
        phi.map(|s| self.eval(s))
    }
}

/// Densities, mobilities, viscosities, friction, potential and convex split.
/// The derived constants (`b±`, `c±`, `alpha`, `beta`) are recomputed from
/// the specific densities on every call rather than stored.
#[derive(Debug, Clone, Copy)]
pub struct ModelParams<F: Scalar> {
    pub rho_plus: F,
    pub rho_minus: F,
    pub matched_densities: bool,
    pub mobility: Coefficient<F>,
    pub mobility_r: Coefficient<F>,
    pub viscosity_nu: Coefficient<F>,
    pub viscosity_eta: Coefficient<F>,
    /// Navier-slip friction (model II only).
    pub gamma: F,
    pub potential: PotentialParams<F>,
    pub split: ConvexSplit<F>,
}

impl<F: Scalar> ModelParams<F> {
    /// Validates densities and coefficient bounds. `kappa` defaults to the
    /// minimal admissible split constant when `None`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rho_plus: F,
        rho_minus: F,
        matched_densities: bool,
        mobility: Coefficient<F>,
        mobility_r: Coefficient<F>,
        viscosity_nu: Coefficient<F>,
        viscosity_eta: Coefficient<F>,
        gamma: F,
        potential: PotentialParams<F>,
        kappa: Option<F>,
    ) -> Result<Self, ParamsError> {
        if rho_plus <= F::zero() || rho_minus <= F::zero() {
            return Err(ParamsError::NonpositiveDensity {
                rho_plus: rho_plus.to_f64().unwrap_or(f64::NAN),
                rho_minus: rho_minus.to_f64().unwrap_or(f64::NAN),
            });
        }
        if rho_plus == rho_minus && !matched_densities {
            return Err(ParamsError::MatchedDensities);
        }
        for (name, coef, zero_ok) in [
            ("mobility", &mobility, false),
            ("mobility_r", &mobility_r, true),
            ("viscosity_nu", &viscosity_nu, false),
            ("viscosity_eta", &viscosity_eta, false),
        ] {
            let lo = coef.lower_bound();
            let ok = if zero_ok {
                lo >= F::zero()
            } else {
                lo > F::zero()
            };
            if !ok {
                return Err(ParamsError::CoefficientBound {
                    name,
                    min: lo.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        let split = kappa
            .map(|kappa| ConvexSplit { kappa })
            .unwrap_or_else(|| kappa_min(&potential));
        Ok(Self {
            rho_plus,
            rho_minus,
            matched_densities,
            mobility,
            mobility_r,
            viscosity_nu,
            viscosity_eta,
            gamma,
            potential,
            split,
        })
    }

    /// Plain two-fluid setup with constant unit coefficients.
    pub fn basic(
        rho_plus: F,
        rho_minus: F,
        potential: PotentialParams<F>,
    ) -> Result<Self, ParamsError> {
        let one = Coefficient::Constant { value: F::one() };
        Self::new(
            rho_plus,
            rho_minus,
            rho_plus == rho_minus,
            one,
            one,
            one,
            one,
            F::one(),
            potential,
            None,
        )
    }

    pub fn b_plus(&self) -> F {
        (self.rho_plus + self.rho_minus) * F::half()
    }

    pub fn b_minus(&self) -> F {
        if self.matched_densities {
            F::zero()
        } else {
            (self.rho_plus - self.rho_minus) * F::half()
        }
    }

    pub fn c_plus(&self) -> F {
        F::one() / self.rho_plus + F::one() / self.rho_minus
    }

    pub fn c_minus(&self) -> F {
        if self.matched_densities {
            F::zero()
        } else {
            F::one() / self.rho_plus - F::one() / self.rho_minus
        }
    }

    /// `alpha = c_- / c_+`; zero in the matched-density limit.
    pub fn alpha(&self) -> F {
        self.c_minus() / self.c_plus()
    }

    /// `beta = 2 / (rho_plus + rho_minus)`.
    pub fn beta(&self) -> F {
        F::two() / (self.rho_plus + self.rho_minus)
    }

    /// `rho(phi) = b_+ + b_- phi`, cellwise.
    pub fn density(&self, phi: &Field<F>) -> Field<F> {
        let (bp, bm) = (self.b_plus(), self.b_minus());
        phi.map(|s| bp + bm * s)
    }

    /// True when the transition mobility vanishes identically (the
    /// divergence-free reduction of model I).
    pub fn mr_is_zero(&self) -> bool {
        self.mobility_r.is_identically_zero()
    }

    pub fn check_gamma(&self) -> Result<(), ParamsError> {
        if self.gamma <= F::zero() {
            return Err(ParamsError::NonpositiveGamma {
                gamma: self.gamma.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(())
    }

    /// Grid sanity helper: coefficient fields for the viscous assembly.
    pub fn viscosity_fields(&self, phi_k: &Field<F>, _grid: &Grid<F>) -> (Field<F>, Field<F>) {
        (
            self.viscosity_nu.on_field(phi_k),
            self.viscosity_eta.on_field(phi_k),
        )
    }
}
