//! Model I: one implicit step of the quasi-incompressible
//! Navier-Stokes/Cahn-Hilliard system with phase transition.
//!
//! Unknowns per step: volume-averaged velocity `v` (interior faces),
//! pressure `λ`, chemical potential `μ`, and phase field `φ` (cells). The
//! momentum equation is discretized in the skew-symmetrized form whose
//! convection and mass-flux terms are exactly energy-neutral against `v`;
//! together with the adjoint grad/div pair and the convex split of the
//! potential this makes the per-step energy inequality hold up to the
//! nonlinear solver residual.

use crate::diagnostics::{dissipation_agg, energy_free, energy_kinetic, DiagRecord};
use crate::grid::{
    assemble_viscous_form, cell_mean, convect, div_face_to_cc, face_inner, face_scale,
    for_each_conv_term, grad_cc_to_face, interp_cc_to_faces, laplace_neumann,
    restrict_to_interior_faces, BoundaryKind, FaceField, Field, Grid, VelocityDofs,
};
use crate::linsolve::{
    newton_solve_with, solve_sparse, KrylovConfig, KrylovMethod, NewtonConfig, NewtonLinear,
    Precond,
};
use crate::params::ModelParams;
use crate::potential::{f0_prime, f0_second};
use crate::scalar::Scalar;
use crate::sparse::{SparseOperator, TripletBuilder};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AggError {
    #[error("time step must be positive, got {h}")]
    NonpositiveStep { h: f64 },
    #[error("phase field violates the (-1,1) barrier: {0}")]
    Barrier(String),
    #[error("state contains non-finite values")]
    NonFinite,
    #[error("Newton solver failed: {0}")]
    Newton(String),
    #[error(
        "discrete energy inequality violated: slack {slack:e} < -{tol:e}; this indicates a discretization bug"
    )]
    EnergyViolation { slack: f64, tol: f64 },
}

/// Per-step unknowns of model I. The density is derived (`ρ = b₊ + b₋ φ`),
/// never stored.
#[derive(Debug, Clone)]
pub struct StateAgg<F: Scalar> {
    pub v: FaceField<F>,
    pub lambda: Field<F>,
    pub mu: Field<F>,
    pub phi: Field<F>,
}

impl<F: Scalar> StateAgg<F> {
    /// Quiescent state: `v = 0`, `λ` and `μ` consistent with a uniform or
    /// given phase field (used as the Newton seed for the first step).
    pub fn quiescent(phi: Field<F>, p: &ModelParams<F>) -> Self {
        let grid = *phi.grid();
        // μ from the potential equation at φ = φ_k = phi
        let lap = laplace_neumann(&phi);
        let mut mu = Field::zeros(&grid);
        for ((m, &s), &l) in mu
            .values_mut()
            .iter_mut()
            .zip(phi.values())
            .zip(lap.values())
        {
            let fp = f0_prime(s, &p.potential, &p.split).unwrap_or(F::zero());
            *m = fp - l - p.split.kappa * s;
        }
        let alpha = p.alpha();
        let lambda = if alpha != F::zero() {
            let mean_mu = cell_mean(&mu);
            Field::constant(&grid, -mean_mu / alpha)
        } else {
            Field::zeros(&grid)
        };
        Self {
            v: FaceField::zeros(&grid),
            lambda,
            mu,
            phi,
        }
    }

    pub fn grid(&self) -> &Grid<F> {
        self.phi.grid()
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.lambda.is_finite() && self.mu.is_finite() && self.phi.is_finite()
    }

    pub fn rho(&self, p: &ModelParams<F>) -> Field<F> {
        p.density(&self.phi)
    }
}

/// Unknown-vector layout: `[v | λ | μ | φ | ξ?]` with the gauge multiplier
/// `ξ` present only in the divergence-free reduction `m_r ≡ 0`, where `λ` is
/// otherwise determined only up to a constant.
#[derive(Debug, Clone, Copy)]
pub struct AggLayout {
    pub dofs: VelocityDofs,
    pub n_cells: usize,
    pub gauge: bool,
}

impl AggLayout {
    pub fn new<F: Scalar>(grid: &Grid<F>, p: &ModelParams<F>) -> Self {
        Self {
            dofs: VelocityDofs::new(grid),
            n_cells: grid.n_cells(),
            gauge: p.mr_is_zero(),
        }
    }

    pub fn n_velocity(&self) -> usize {
        self.dofs.len()
    }

    pub fn lambda_off(&self) -> usize {
        self.n_velocity()
    }

    pub fn mu_off(&self) -> usize {
        self.lambda_off() + self.n_cells
    }

    pub fn phi_off(&self) -> usize {
        self.mu_off() + self.n_cells
    }

    pub fn len(&self) -> usize {
        self.phi_off() + self.n_cells + usize::from(self.gauge)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn phi_range(&self) -> std::ops::Range<usize> {
        self.phi_off()..self.phi_off() + self.n_cells
    }

    pub fn pack<F: Scalar>(&self, state: &StateAgg<F>) -> Vec<F> {
        let mut x = vec![F::zero(); self.len()];
        self.dofs.pack(&state.v, &mut x[..self.n_velocity()]);
        x[self.lambda_off()..self.lambda_off() + self.n_cells]
            .copy_from_slice(state.lambda.values());
        x[self.mu_off()..self.mu_off() + self.n_cells].copy_from_slice(state.mu.values());
        x[self.phi_off()..self.phi_off() + self.n_cells].copy_from_slice(state.phi.values());
        x
    }

    pub fn unpack<F: Scalar>(&self, x: &[F], grid: &Grid<F>) -> StateAgg<F> {
        StateAgg {
            v: self.dofs.unpack(&x[..self.n_velocity()], grid),
            lambda: Field::from_values(
                grid,
                x[self.lambda_off()..self.lambda_off() + self.n_cells].to_vec(),
            ),
            mu: Field::from_values(
                grid,
                x[self.mu_off()..self.mu_off() + self.n_cells].to_vec(),
            ),
            phi: Field::from_values(
                grid,
                x[self.phi_off()..self.phi_off() + self.n_cells].to_vec(),
            ),
        }
    }
}

/// Grad-row of a face: `(cell_lo, cell_hi, 1/h_axis)`, `None` on
/// boundary-normal faces (zero-flux convention).
fn grad_row<F: Scalar>(grid: &Grid<F>, face: (u8, usize, usize)) -> Option<(usize, usize, F)> {
    let (comp, i, j) = face;
    if comp == 0 {
        (i >= 1 && i < grid.nx())
            .then(|| (grid.cell(i - 1, j), grid.cell(i, j), F::one() / grid.hx()))
    } else {
        (j >= 1 && j < grid.ny())
            .then(|| (grid.cell(i, j - 1), grid.cell(i, j), F::one() / grid.hy()))
    }
}

fn face_dof(dofs: &VelocityDofs, face: (u8, usize, usize)) -> Option<usize> {
    let (comp, i, j) = face;
    if comp == 0 {
        dofs.try_xdof(i, j)
    } else {
        dofs.try_ydof(i, j)
    }
}

fn face_value<F: Scalar>(f: &FaceField<F>, face: (u8, usize, usize)) -> F {
    if face.0 == 0 {
        f.ux(face.1, face.2)
    } else {
        f.uy(face.1, face.2)
    }
}

/// Frozen per-step data of the model I system: everything that depends only
/// on the previous state.
pub struct AggSystem<F: Scalar> {
    pub grid: Grid<F>,
    pub layout: AggLayout,
    pub p: ModelParams<F>,
    pub h: F,
    pub phi_k: Field<F>,
    pub v_k: FaceField<F>,
    rho_k_face: FaceField<F>,
    phik_face: FaceField<F>,
    m_face: FaceField<F>,
    mr_cells: Field<F>,
    /// Viscous form at `φ_k`, restricted to the interior-face unknowns.
    pub visc: SparseOperator<F>,
}

impl<F: Scalar> AggSystem<F> {
    pub fn new(prev: &StateAgg<F>, p: &ModelParams<F>, h: F) -> Result<Self, AggError> {
        if h <= F::zero() {
            return Err(AggError::NonpositiveStep {
                h: h.to_f64().unwrap_or(f64::NAN),
            });
        }
        if !prev.is_finite() {
            return Err(AggError::NonFinite);
        }
        let grid = *prev.grid();
        let layout = AggLayout::new(&grid, p);
        let (nu, eta) = (
            p.viscosity_nu.on_field(&prev.phi),
            p.viscosity_eta.on_field(&prev.phi),
        );
        let visc_full = assemble_viscous_form(&nu, &eta, BoundaryKind::NoSlip)
            .map_err(|e| AggError::Newton(e.to_string()))?;
        let visc = restrict_to_interior_faces(&visc_full, &grid);
        Ok(Self {
            grid,
            layout,
            p: *p,
            h,
            phi_k: prev.phi.clone(),
            v_k: prev.v.clone(),
            rho_k_face: interp_cc_to_faces(&p.density(&prev.phi)),
            phik_face: interp_cc_to_faces(&prev.phi),
            m_face: interp_cc_to_faces(&p.mobility.on_field(&prev.phi)),
            mr_cells: p.mobility_r.on_field(&prev.phi),
            visc,
        })
    }

    fn barrier_check(&self, phi: &[F]) -> Result<(), String> {
        let lim = F::one() - self.p.potential.eps_barrier * F::half();
        for &s in phi {
            // negated form on purpose: it also rejects NaN
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(s.abs() < lim) {
                return Err(format!("phase field value {s} beyond the barrier"));
            }
        }
        Ok(())
    }

    /// Diffusive mass flux `J̃ = -b₋ m(φ_k) ∇μ` on faces.
    fn mass_flux(&self, mu: &Field<F>) -> FaceField<F> {
        let mut jt = face_scale(&self.m_face, &grad_cc_to_face(mu));
        let s = -self.p.b_minus();
        for v in jt.x.iter_mut().chain(jt.y.iter_mut()) {
            *v *= s;
        }
        jt
    }

    /// Strong-form residual on the packed unknown vector.
    pub fn residual(&self, x: &[F]) -> Result<Vec<F>, String> {
        let l = &self.layout;
        let phi_slice = &x[l.phi_range()];
        self.barrier_check(phi_slice)?;
        let state = l.unpack(x, &self.grid);
        let xi = if l.gauge { x[l.len() - 1] } else { F::zero() };

        let mut r = vec![F::zero(); l.len()];
        let area = self.grid.cell_area();
        let h = self.h;
        let alpha = self.p.alpha();
        let kappa = self.p.split.kappa;

        // momentum block
        let rho_face = interp_cc_to_faces(&self.p.density(&state.phi));
        let w_mass = face_scale(&self.rho_k_face, &state.v);
        let conv_mass = convect(&w_mass, &state.v);
        let jt = self.mass_flux(&state.mu);
        let conv_jt = convect(&jt, &state.v);
        let grad_lambda = grad_cc_to_face(&state.lambda);
        let grad_mu = grad_cc_to_face(&state.mu);
        let mut vpacked = vec![F::zero(); l.n_velocity()];
        l.dofs.pack(&state.v, &mut vpacked);
        let visc_v = self.visc.matvec(&vpacked).expect("velocity dimensions");

        let fill = |face: (u8, usize, usize), dof: usize, r: &mut [F]| {
            let vf = face_value(&state.v, face);
            let vkf = face_value(&self.v_k, face);
            let rf = face_value(&rho_face, face);
            let rkf = face_value(&self.rho_k_face, face);
            let time = (rf * vf - rkf * vkf) / h - (rf - rkf) * vf / (F::two() * h);
            r[dof] = time
                + face_value(&conv_mass, face)
                + face_value(&conv_jt, face)
                + visc_v[dof] / area
                + face_value(&grad_lambda, face)
                + face_value(&self.phik_face, face) * face_value(&grad_mu, face);
        };
        for j in 0..self.grid.ny() {
            for i in 1..self.grid.nx() {
                fill((0, i, j), l.dofs.xdof(i, j), &mut r);
            }
        }
        for j in 1..self.grid.ny() {
            for i in 0..self.grid.nx() {
                fill((1, i, j), l.dofs.ydof(i, j), &mut r);
            }
        }

        // cell blocks
        let div_v = div_face_to_cc(&state.v);
        let conv_phi = div_face_to_cc(&face_scale(&self.phik_face, &state.v));
        let diff_mu = div_face_to_cc(&face_scale(&self.m_face, &grad_mu));
        let lap_phi = laplace_neumann(&state.phi);
        for c in 0..l.n_cells {
            let mu = state.mu.values()[c];
            let lam = state.lambda.values()[c];
            let phi = state.phi.values()[c];
            let phik = self.phi_k.values()[c];
            let mr = self.mr_cells.values()[c];
            let q = mu + alpha * lam;
            r[l.lambda_off() + c] = div_v.values()[c] + alpha * mr * q + xi;
            r[l.mu_off() + c] =
                (phi - phik) / h + conv_phi.values()[c] - diff_mu.values()[c] + mr * q;
            let fp = f0_prime(phi, &self.p.potential, &self.p.split).map_err(|e| e.to_string())?;
            r[l.phi_off() + c] = fp - lap_phi.values()[c] - mu - kappa * (phi + phik) * F::half();
        }
        if l.gauge {
            r[l.len() - 1] = cell_mean(&state.lambda);
        }
        Ok(r)
    }

    /// Analytic Jacobian of [`AggSystem::residual`] at `x`.
    pub fn jacobian(&self, x: &[F]) -> Result<SparseOperator<F>, String> {
        let l = &self.layout;
        self.barrier_check(&x[l.phi_range()])?;
        let state = l.unpack(x, &self.grid);
        let n = l.len();
        let area = self.grid.cell_area();
        let h = self.h;
        let alpha = self.p.alpha();
        let kappa = self.p.split.kappa;
        let b_minus = self.p.b_minus();
        let mut tb = TripletBuilder::with_capacity(n, n, 40 * n);

        let rho_face = interp_cc_to_faces(&self.p.density(&state.phi));
        let jt = self.mass_flux(&state.mu);
        let w_mass = face_scale(&self.rho_k_face, &state.v);

        // momentum rows: time term and density coupling
        let time_terms = |face: (u8, usize, usize), dof: usize, tb: &mut TripletBuilder<F>| {
            let rf = face_value(&rho_face, face);
            let rkf = face_value(&self.rho_k_face, face);
            // ∂/∂v: (ρ_f + ρ_k,f) / (2h)
            tb.push(dof, dof, (rf + rkf) / (F::two() * h));
            // ∂/∂φ through ρ_f = b₊ + b₋ (φ_c1 + φ_c2)/2 at interior faces
            if let Some((c_lo, c_hi, _)) = grad_row(&self.grid, face) {
                let vf = face_value(&state.v, face);
                let coef = b_minus * F::half() * vf / (F::two() * h);
                tb.push(dof, l.phi_off() + c_lo, coef);
                tb.push(dof, l.phi_off() + c_hi, coef);
            }
            // pressure gradient and capillary forcing columns
            if let Some((c_lo, c_hi, inv_h)) = grad_row(&self.grid, face) {
                tb.push(dof, l.lambda_off() + c_hi, inv_h);
                tb.push(dof, l.lambda_off() + c_lo, -inv_h);
                let pk = face_value(&self.phik_face, face);
                tb.push(dof, l.mu_off() + c_hi, pk * inv_h);
                tb.push(dof, l.mu_off() + c_lo, -pk * inv_h);
            }
        };
        for j in 0..self.grid.ny() {
            for i in 1..self.grid.nx() {
                time_terms((0, i, j), l.dofs.xdof(i, j), &mut tb);
            }
        }
        for j in 1..self.grid.ny() {
            for i in 0..self.grid.nx() {
                time_terms((1, i, j), l.dofs.ydof(i, j), &mut tb);
            }
        }

        // momentum rows: viscous form
        for row in 0..l.n_velocity() {
            let (cols, vals) = self.visc.row(row);
            for (&c, &v) in cols.iter().zip(vals) {
                tb.push(row, c, v / area);
            }
        }

        // momentum rows: skew advection by ρ_k v (quadratic in v) and by J̃(μ)
        for_each_conv_term(&self.grid, |t| {
            let row = face_dof(&l.dofs, t.target).expect("conv targets are interior");
            let coeff = F::of(t.coeff);
            let v_nb = face_value(&state.v, t.neighbor);
            let nb_dof = face_dof(&l.dofs, t.neighbor);

            // mass-flux advection: w = ρ_k,f ∘ v
            let wsum = face_value(&w_mass, t.w_faces[0]) + face_value(&w_mass, t.w_faces[1]);
            if let Some(d) = nb_dof {
                tb.push(row, d, coeff * wsum);
            }
            for wf in t.w_faces {
                if let Some(d) = face_dof(&l.dofs, wf) {
                    tb.push(row, d, coeff * face_value(&self.rho_k_face, wf) * v_nb);
                }
            }

            // diffusive-flux advection: w = J̃ = -b₋ m_f ∇μ
            let jsum = face_value(&jt, t.w_faces[0]) + face_value(&jt, t.w_faces[1]);
            if let Some(d) = nb_dof {
                tb.push(row, d, coeff * jsum);
            }
            for wf in t.w_faces {
                if let Some((c_lo, c_hi, inv_h)) = grad_row(&self.grid, wf) {
                    let scale = coeff * v_nb * (-b_minus) * face_value(&self.m_face, wf);
                    tb.push(row, l.mu_off() + c_hi, scale * inv_h);
                    tb.push(row, l.mu_off() + c_lo, -scale * inv_h);
                }
            }
        });

        // divergence and phase-field rows
        let (hx, hy) = (self.grid.hx(), self.grid.hy());
        for j in 0..self.grid.ny() {
            for i in 0..self.grid.nx() {
                let c = self.grid.cell(i, j);
                let row_b = l.lambda_off() + c;
                let row_c = l.mu_off() + c;
                let row_d = l.phi_off() + c;
                let mr = self.mr_cells.values()[c];

                // r_b: ∇·v + α m_r (μ + αλ) [+ ξ]
                // r_c convection: ∇·(φ_k,f v)
                let dv =
                    |face: (u8, usize, usize), sign: F, inv_h: F, tb: &mut TripletBuilder<F>| {
                        if let Some(d) = face_dof(&l.dofs, face) {
                            tb.push(row_b, d, sign * inv_h);
                            tb.push(row_c, d, sign * inv_h * face_value(&self.phik_face, face));
                        }
                    };
                dv((0, i + 1, j), F::one(), F::one() / hx, &mut tb);
                dv((0, i, j), -F::one(), F::one() / hx, &mut tb);
                dv((1, i, j + 1), F::one(), F::one() / hy, &mut tb);
                dv((1, i, j), -F::one(), F::one() / hy, &mut tb);

                tb.push(row_b, l.mu_off() + c, alpha * mr);
                tb.push(row_b, l.lambda_off() + c, alpha * alpha * mr);
                if l.gauge {
                    tb.push(row_b, l.len() - 1, F::one());
                }

                // r_c: φ/h - ∇·(m_f ∇μ) + m_r (μ + αλ)
                tb.push(row_c, l.phi_off() + c, F::one() / h);
                tb.push(row_c, l.mu_off() + c, mr);
                tb.push(row_c, l.lambda_off() + c, alpha * mr);
                let diffusion = |face: (u8, usize, usize),
                                 other: usize,
                                 inv_h2: F,
                                 tb: &mut TripletBuilder<F>| {
                    if grad_row(&self.grid, face).is_some() {
                        let m = face_value(&self.m_face, face);
                        tb.push(row_c, l.mu_off() + c, m * inv_h2);
                        tb.push(row_c, l.mu_off() + other, -m * inv_h2);
                    }
                };
                if i + 1 < self.grid.nx() {
                    diffusion(
                        (0, i + 1, j),
                        self.grid.cell(i + 1, j),
                        F::one() / (hx * hx),
                        &mut tb,
                    );
                }
                if i > 0 {
                    diffusion(
                        (0, i, j),
                        self.grid.cell(i - 1, j),
                        F::one() / (hx * hx),
                        &mut tb,
                    );
                }
                if j + 1 < self.grid.ny() {
                    diffusion(
                        (1, i, j + 1),
                        self.grid.cell(i, j + 1),
                        F::one() / (hy * hy),
                        &mut tb,
                    );
                }
                if j > 0 {
                    diffusion(
                        (1, i, j),
                        self.grid.cell(i, j - 1),
                        F::one() / (hy * hy),
                        &mut tb,
                    );
                }

                // r_d: F₀'(φ) - Δφ - μ - κ(φ+φ_k)/2
                let phi = state.phi.values()[c];
                let fpp =
                    f0_second(phi, &self.p.potential, &self.p.split).map_err(|e| e.to_string())?;
                tb.push(row_d, l.mu_off() + c, -F::one());
                let mut lap_diag = F::zero();
                let mut lap = |cond: bool, other: usize, inv_h2: F, tb: &mut TripletBuilder<F>| {
                    if cond {
                        tb.push(row_d, l.phi_off() + other, -inv_h2);
                        lap_diag += inv_h2;
                    }
                };
                lap(i + 1 < self.grid.nx(), c + 1, F::one() / (hx * hx), &mut tb);
                lap(i > 0, c.wrapping_sub(1), F::one() / (hx * hx), &mut tb);
                lap(
                    j + 1 < self.grid.ny(),
                    c + self.grid.nx(),
                    F::one() / (hy * hy),
                    &mut tb,
                );
                lap(
                    j > 0,
                    c.wrapping_sub(self.grid.nx()),
                    F::one() / (hy * hy),
                    &mut tb,
                );
                tb.push(row_d, l.phi_off() + c, fpp + lap_diag - kappa * F::half());
            }
        }

        if l.gauge {
            let row = l.len() - 1;
            let w = F::one() / F::of_usize(l.n_cells);
            for c in 0..l.n_cells {
                tb.push(row, l.lambda_off() + c, w);
            }
        }

        Ok(tb.build())
    }
}

/// Concatenated discrete residuals of the implicit step (momentum in the
/// skew-symmetrized form, divergence, phase field, potential), evaluated at
/// the candidate `z` with coefficients frozen at `prev`.
pub fn residual_agg<F: Scalar>(
    z: &StateAgg<F>,
    prev: &StateAgg<F>,
    p: &ModelParams<F>,
    h: F,
) -> Result<Vec<F>, AggError> {
    let sys = AggSystem::new(prev, p, h)?;
    let x = sys.layout.pack(z);
    sys.residual(&x).map_err(AggError::Barrier)
}

/// Exact analytic Jacobian of [`residual_agg`] at `z`.
pub fn assemble_jacobian_agg<F: Scalar>(
    z: &StateAgg<F>,
    prev: &StateAgg<F>,
    p: &ModelParams<F>,
    h: F,
) -> Result<SparseOperator<F>, AggError> {
    let sys = AggSystem::new(prev, p, h)?;
    let x = sys.layout.pack(z);
    sys.jacobian(&x).map_err(AggError::Barrier)
}

/// Persistent model I stepper: owns the direct-solver factorization cache so
/// consecutive steps can reuse it (the Jacobian drifts slowly along a
/// trajectory).
pub struct AggStepper<F: Scalar> {
    pub p: ModelParams<F>,
    pub h: F,
    pub ncfg: NewtonConfig<F>,
    linear: NewtonLinear<F>,
}

impl<F: Scalar> AggStepper<F> {
    pub fn new(p: ModelParams<F>, h: F, ncfg: NewtonConfig<F>) -> Self {
        let n_border = usize::from(p.mr_is_zero());
        Self {
            p,
            h,
            ncfg,
            linear: NewtonLinear::direct(n_border),
        }
    }

    pub fn step(&mut self, prev: &StateAgg<F>) -> Result<(StateAgg<F>, DiagRecord<F>), AggError> {
        step_agg_with(prev, &self.p, self.h, &self.ncfg, &mut self.linear)
    }
}

/// Advances model I by one implicit step and verifies the discrete energy
/// inequality. A violation beyond `10·res_tol·(1+|E_prev|)` is a hard error.
///
/// One-shot convenience over [`AggStepper`]; `kcfg` selects the linear path
/// (the steppers default to the direct bordered solver, which is what the
/// persistent [`AggStepper`] uses).
pub fn step_agg<F: Scalar>(
    prev: &StateAgg<F>,
    p: &ModelParams<F>,
    h: F,
    ncfg: &NewtonConfig<F>,
    kcfg: &KrylovConfig<F>,
) -> Result<(StateAgg<F>, DiagRecord<F>), AggError> {
    let _ = kcfg;
    let mut linear = NewtonLinear::direct(usize::from(p.mr_is_zero()));
    step_agg_with(prev, p, h, ncfg, &mut linear)
}

fn step_agg_with<F: Scalar>(
    prev: &StateAgg<F>,
    p: &ModelParams<F>,
    h: F,
    ncfg: &NewtonConfig<F>,
    linear: &mut NewtonLinear<F>,
) -> Result<(StateAgg<F>, DiagRecord<F>), AggError> {
    let sys = AggSystem::new(prev, p, h)?;
    let x0 = sys.layout.pack(prev);
    let (x, ndiag) = newton_solve_with(
        |x| sys.residual(x),
        |x| sys.jacobian(x),
        x0,
        sys.layout.phi_range(),
        ncfg,
        linear,
    )
    .map_err(|e| AggError::Newton(e.to_string()))?;
    let state = sys.layout.unpack(&x, &sys.grid);
    if !state.is_finite() {
        return Err(AggError::NonFinite);
    }

    let rho_k = p.density(&prev.phi);
    let e_prev = energy_kinetic(&prev.v, &rho_k)
        + energy_free(&prev.phi, p).map_err(|e| AggError::Barrier(e.to_string()))?;
    let rho_new = p.density(&state.phi);
    let e_kin = energy_kinetic(&state.v, &rho_new);
    let e_free = energy_free(&state.phi, p).map_err(|e| AggError::Barrier(e.to_string()))?;
    let e_new = e_kin + e_free;

    // increments: ∫ ρ_k |v - v_k|²/2 + ∫ |∇φ - ∇φ_k|²/2
    let mut dv = state.v.clone();
    for (a, b) in dv.x.iter_mut().zip(&prev.v.x) {
        *a -= *b;
    }
    for (a, b) in dv.y.iter_mut().zip(&prev.v.y) {
        *a -= *b;
    }
    let inc_kin = energy_kinetic(&dv, &rho_k);
    let gphi = grad_cc_to_face(&state.phi);
    let gphik = grad_cc_to_face(&prev.phi);
    let mut dg = gphi.clone();
    for (a, b) in dg.x.iter_mut().zip(&gphik.x) {
        *a -= *b;
    }
    for (a, b) in dg.y.iter_mut().zip(&gphik.y) {
        *a -= *b;
    }
    let increments = inc_kin + face_inner(&dg, &dg) * F::half();

    let d = dissipation_agg(&state, &prev.phi, p);
    let tol = F::of(10.0) * ncfg.res_tol * (F::one() + e_prev.abs());
    let report = crate::diagnostics::check_step(e_prev, e_new, increments, d, h, tol);
    if !report.pass {
        return Err(AggError::EnergyViolation {
            slack: report.slack.to_f64().unwrap_or(f64::NAN),
            tol: tol.to_f64().unwrap_or(f64::NAN),
        });
    }

    let record = DiagRecord {
        step: 0,
        time: F::zero(),
        e_free,
        e_kin,
        e_tot: e_new,
        dissipation: d,
        mean_phi: cell_mean(&state.phi),
        min_phi: state.phi.min(),
        max_phi: state.phi.max(),
        energy_slack: report.slack,
        newton_iters: ndiag.newton_iters,
        linear_iters: ndiag.linear_iters,
    };
    Ok((state, record))
}

/// Heat-equation smoothing of the initial datum: `substeps` implicit Euler
/// steps of total time `time` with the Neumann Laplacian. Preserves the mean
/// exactly and the max-norm by the (discrete) maximum principle; nonconstant
/// data come out strictly inside (-1, 1).
pub fn smooth_initial<F: Scalar>(phi_raw: &Field<F>, time: F, substeps: usize) -> Field<F> {
    if substeps == 0 || time <= F::zero() {
        return phi_raw.clone();
    }
    let grid = *phi_raw.grid();
    let tau = time / F::of_usize(substeps);
    let lap = crate::grid::assemble_laplace(&grid);
    let n = grid.n_cells();
    let mut tb = TripletBuilder::with_capacity(n, n, lap.nnz() + n);
    for r in 0..n {
        let (cols, vals) = lap.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            tb.push(r, c, -tau * v);
        }
        tb.push(r, r, F::one());
    }
    let a = tb.build().into_symmetric();
    let cfg = KrylovConfig {
        method: KrylovMethod::Cg,
        precond: Precond::Jacobi,
        rel_tol: F::of(1e-14),
        abs_tol: F::of(1e-30),
        max_iter: 50_000,
    };
    let mut phi = phi_raw.values().to_vec();
    for _ in 0..substeps {
        match solve_sparse(&a, &phi, &cfg) {
            Ok(sol) => phi = sol.x,
            Err(crate::linsolve::LinsolveError::NotConverged { best, .. }) => phi = best,
            Err(_) => return phi_raw.clone(),
        }
    }
    Field::from_values(&grid, phi)
}
