//! Energies, dissipation functionals, and the per-step structural checks.
//!
//! The quadratures here mirror the discrete forms used inside the steppers
//! exactly (midpoint rule on cells, full weights on interior faces, trapezoid
//! on the wall-adjacent friction samples), so the monitored energy inequality
//! is exact up to solver residual rather than quadrature mismatch.

use crate::grid::{face_inner, grad_cc_to_face, interp_cc_to_faces, FaceField, Field};
use crate::model_agg::StateAgg;
use crate::model_qstokes::StateQs;
use crate::params::ModelParams;
use crate::potential::{f_log, PotentialError};
use crate::scalar::Scalar;

/// Per-step diagnostics; one CSV row in the driver output.
#[derive(Debug, Clone, Copy)]
pub struct DiagRecord<F: Scalar> {
    pub step: usize,
    pub time: F,
    pub e_free: F,
    pub e_kin: F,
    pub e_tot: F,
    /// Dissipation rate `D ≥ 0` (all model-specific contributions).
    pub dissipation: F,
    pub mean_phi: F,
    pub min_phi: F,
    pub max_phi: F,
    /// `E(prev) - E(new) - increments - h·D`; nonnegative up to solver residual.
    pub energy_slack: F,
    pub newton_iters: usize,
    pub linear_iters: usize,
}

/// Ginzburg-Landau free energy `∫ F(φ) + |∇φ|²/2`.
pub fn energy_free<F: Scalar>(phi: &Field<F>, p: &ModelParams<F>) -> Result<F, PotentialError> {
    let mut bulk = F::zero();
    for &s in phi.values() {
        bulk += f_log(s, &p.potential)?;
    }
    bulk *= phi.grid().cell_area();
    let g = grad_cc_to_face(phi);
    Ok(bulk + face_inner(&g, &g) * F::half())
}

/// Kinetic energy `∫ ρ |v|²/2` with the density interpolated to faces and
/// trapezoid weights over faces.
pub fn energy_kinetic<F: Scalar>(v: &FaceField<F>, rho: &Field<F>) -> F {
    let rho_f = interp_cc_to_faces(rho);
    let mut rv = v.clone();
    for (a, b) in rv.x.iter_mut().zip(&rho_f.x) {
        *a *= *b;
    }
    for (a, b) in rv.y.iter_mut().zip(&rho_f.y) {
        *a *= *b;
    }
    face_inner(&rv, v) * F::half()
}

/// Wall treatment of the stress-dissipation quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WallShear {
    /// No-slip: one-sided shear against the mirrored ghost value, half weight.
    Mirror,
    /// Navier-slip: no wall-node shear (natural boundary condition).
    None,
}

/// Direct quadrature of `∫ S(φ, Dv):Dv = ∫ 2ν|Dv|² + η(∇·v)²`; the
/// independent counterpart of contracting the assembled viscous form.
pub fn stress_dissipation<F: Scalar>(
    v: &FaceField<F>,
    nu: &Field<F>,
    eta: &Field<F>,
    wall: WallShear,
) -> F {
    let g = *v.grid();
    let area = g.cell_area();
    let (hx, hy) = (g.hx(), g.hy());
    let mut acc = F::zero();

    for j in 0..g.ny() {
        for i in 0..g.nx() {
            let dxu = (v.ux(i + 1, j) - v.ux(i, j)) / hx;
            let dyv = (v.uy(i, j + 1) - v.uy(i, j)) / hy;
            let div = dxu + dyv;
            acc += area
                * (F::two() * nu.at(i, j) * (dxu * dxu + dyv * dyv) + eta.at(i, j) * div * div);
        }
    }

    let nu_at_node = |i: usize, j: usize| -> F {
        let mut s = F::zero();
        let mut count = 0usize;
        for (ci, cj) in [
            (i.wrapping_sub(1), j.wrapping_sub(1)),
            (i, j.wrapping_sub(1)),
            (i.wrapping_sub(1), j),
            (i, j),
        ] {
            if ci < g.nx() && cj < g.ny() {
                s += nu.at(ci, cj);
                count += 1;
            }
        }
        s / F::of_usize(count)
    };

    for j in 1..g.ny() {
        for i in 1..g.nx() {
            let shear = (v.ux(i, j) - v.ux(i, j - 1)) / hy + (v.uy(i, j) - v.uy(i - 1, j)) / hx;
            acc += area * nu_at_node(i, j) * shear * shear;
        }
    }

    if wall == WallShear::Mirror {
        let half = area * F::half();
        for i in 1..g.nx() {
            let sb = F::two() * v.ux(i, 0) / hy + (v.uy(i, 0) - v.uy(i - 1, 0)) / hx;
            acc += half * nu_at_node(i, 0) * sb * sb;
            let st =
                F::two() * v.ux(i, g.ny() - 1) / hy + (v.uy(i, g.ny()) - v.uy(i - 1, g.ny())) / hx;
            acc += half * nu_at_node(i, g.ny()) * st * st;
        }
        for j in 1..g.ny() {
            let sl = F::two() * v.uy(0, j) / hx + (v.ux(0, j) - v.ux(0, j - 1)) / hy;
            acc += half * nu_at_node(0, j) * sl * sl;
            let sr =
                F::two() * v.uy(g.nx() - 1, j) / hx + (v.ux(g.nx(), j) - v.ux(g.nx(), j - 1)) / hy;
            acc += half * nu_at_node(g.nx(), j) * sr * sr;
        }
    }

    acc
}

/// Boundary friction `∮ γ |u_τ|²` by the trapezoid rule over the tangential
/// faces nearest each wall.
pub fn friction_dissipation<F: Scalar>(v: &FaceField<F>, gamma: F) -> F {
    let g = *v.grid();
    let mut acc = F::zero();
    for i in 1..g.nx() {
        acc += g.hx() * (v.ux(i, 0) * v.ux(i, 0) + v.ux(i, g.ny() - 1) * v.ux(i, g.ny() - 1));
    }
    for j in 1..g.ny() {
        acc += g.hy() * (v.uy(0, j) * v.uy(0, j) + v.uy(g.nx() - 1, j) * v.uy(g.nx() - 1, j));
    }
    gamma * acc
}

/// `Σ_faces c_f |grad f|² · area` (interior faces; boundary gradients vanish).
pub fn weighted_grad_square<F: Scalar>(coef_face: &FaceField<F>, grad: &FaceField<F>) -> F {
    let mut cg = grad.clone();
    for (a, b) in cg.x.iter_mut().zip(&coef_face.x) {
        *a *= *b;
    }
    for (a, b) in cg.y.iter_mut().zip(&coef_face.y) {
        *a *= *b;
    }
    face_inner(&cg, grad)
}

/// Model I dissipation rate at the new state with coefficients frozen at φₖ:
/// `∫ S(φₖ,Dv):Dv + m(φₖ)|∇μ|² + m_r(φₖ)(μ+αλ)²`.
pub fn dissipation_agg<F: Scalar>(state: &StateAgg<F>, phi_k: &Field<F>, p: &ModelParams<F>) -> F {
    let nu = p.viscosity_nu.on_field(phi_k);
    let eta = p.viscosity_eta.on_field(phi_k);
    let viscous = stress_dissipation(&state.v, &nu, &eta, WallShear::Mirror);

    let m_face = interp_cc_to_faces(&p.mobility.on_field(phi_k));
    let gmu = grad_cc_to_face(&state.mu);
    let mobility = weighted_grad_square(&m_face, &gmu);

    let alpha = p.alpha();
    let area = phi_k.grid().cell_area();
    let mut transition = F::zero();
    for ((&mr_s, &mu), &lam) in phi_k
        .values()
        .iter()
        .zip(state.mu.values())
        .zip(state.lambda.values())
    {
        let mr = p.mobility_r.eval(mr_s);
        let q = mu + alpha * lam;
        transition += mr * q * q;
    }
    viscous + mobility + transition * area
}

/// Model II dissipation, with the damping and friction parts reported
/// separately.
#[derive(Debug, Clone, Copy)]
pub struct DissipationQs<F: Scalar> {
    pub viscous: F,
    pub grad_omega: F,
    pub omega: F,
    /// `h β ∫ λ₀²`: the damping contribution (already h-scaled once; the
    /// energy inequality multiplies the whole rate by another factor h).
    pub damping: F,
    pub friction: F,
}

impl<F: Scalar> DissipationQs<F> {
    pub fn total(&self) -> F {
        self.viscous + self.grad_omega + self.omega + self.damping + self.friction
    }
}

/// Model II dissipation rate `∫ S(φₖ,Du):Du + m c₊²|∇ω|² + m_r c₊² ω²
/// + hβλ₀²` plus the boundary friction `∮ γ|u_τ|²`.
pub fn dissipation_qstokes<F: Scalar>(
    state: &StateQs<F>,
    phi_k: &Field<F>,
    p: &ModelParams<F>,
    h: F,
) -> DissipationQs<F> {
    let nu = p.viscosity_nu.on_field(phi_k);
    let eta = p.viscosity_eta.on_field(phi_k);
    let viscous = stress_dissipation(&state.u, &nu, &eta, WallShear::None);

    let cp2 = p.c_plus() * p.c_plus();
    let m_face = interp_cc_to_faces(&p.mobility.on_field(phi_k));
    let gom = grad_cc_to_face(&state.omega);
    let grad_omega = weighted_grad_square(&m_face, &gom) * cp2;

    let area = phi_k.grid().cell_area();
    let mut omega_sq = F::zero();
    for (&s, &om) in phi_k.values().iter().zip(state.omega.values()) {
        omega_sq += p.mobility_r.eval(s) * om * om;
    }
    let omega = omega_sq * area * cp2;

    let mut lam_sq = F::zero();
    for &l in state.lambda0.values() {
        lam_sq += l * l;
    }
    let damping = h * p.beta() * lam_sq * area;

    let friction = friction_dissipation(&state.u, p.gamma);

    DissipationQs {
        viscous,
        grad_omega,
        omega,
        damping,
        friction,
    }
}

/// Outcome of the per-step energy-inequality check.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport<F: Scalar> {
    pub pass: bool,
    /// `prev_E - new_E - increments - h·D`; the inequality demands
    /// `slack ≥ -tol`.
    pub slack: F,
}

/// The discrete energy inequality as a predicate:
/// passes iff `new_E + increments + h·D ≤ prev_E + tol`.
pub fn check_step<F: Scalar>(
    prev_e: F,
    new_e: F,
    increments: F,
    d: F,
    h: F,
    tol: F,
) -> CheckReport<F> {
    let slack = prev_e - new_e - increments - h * d;
    CheckReport {
        pass: slack >= -tol,
        slack,
    }
}
