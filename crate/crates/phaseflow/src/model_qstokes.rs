//! Model II: one implicit step of the quasi-stationary Stokes/Cahn-Hilliard
//! system with mass-averaged velocity, pressure-coupled chemical potential
//! `ω = μ + αλ`, an `hλ₀` damping term, and Navier-slip boundary conditions.
//!
//! The mean-free pressure `λ₀` and the prescribed phase-field mean are
//! enforced structurally through two scalar Lagrange multipliers, keeping the
//! Newton system square and sparse. At a converged step the multiplier
//! attached to the potential equation equals `α λ̄`, the constant part of the
//! reconstructed full pressure.

use crate::diagnostics::{dissipation_qstokes, energy_free, DiagRecord};
use crate::grid::{
    assemble_viscous_form, cell_mean, div_face_to_cc, face_inner, face_scale, grad_cc_to_face,
    interp_cc_to_faces, laplace_neumann, project_mean_free, restrict_to_interior_faces,
    BoundaryKind, FaceField, Field, Grid, VelocityDofs,
};
use crate::linsolve::{newton_solve_with, KrylovConfig, NewtonConfig, NewtonLinear};
use crate::params::ModelParams;
use crate::potential::{f0_prime, f0_second};
use crate::scalar::Scalar;
use crate::sparse::{SparseOperator, TripletBuilder};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QsError {
    #[error("time step must be positive, got {h}")]
    NonpositiveStep { h: f64 },
    #[error("phase field violates the (-1,1) barrier: {0}")]
    Barrier(String),
    #[error("state contains non-finite values")]
    NonFinite,
    #[error("Navier-slip friction must be positive: {0}")]
    Friction(String),
    #[error("matched densities (alpha = 0): full-pressure reconstruction undefined")]
    MatchedDensities,
    #[error("Newton solver failed: {0}")]
    Newton(String),
    #[error(
        "discrete energy inequality violated: slack {slack:e} < -{tol:e}; this indicates a discretization bug"
    )]
    EnergyViolation { slack: f64, tol: f64 },
}

/// Per-step unknowns of model II; the full pressure is derived via
/// [`reconstruct_full_pressure`], never stored.
#[derive(Debug, Clone)]
pub struct StateQs<F: Scalar> {
    pub u: FaceField<F>,
    /// Mean-free pressure.
    pub lambda0: Field<F>,
    /// Modified chemical potential `ω = μ + αλ`.
    pub omega: Field<F>,
    pub phi: Field<F>,
}

impl<F: Scalar> StateQs<F> {
    /// Quiescent seed: `u = 0`, `λ₀ = 0`, `ω` the mean-free part of the
    /// chemical potential of `phi`.
    pub fn quiescent(phi: Field<F>, p: &ModelParams<F>) -> Self {
        let grid = *phi.grid();
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
        let omega = project_mean_free(&mu);
        Self {
            u: FaceField::zeros(&grid),
            lambda0: Field::zeros(&grid),
            omega,
            phi,
        }
    }

    pub fn grid(&self) -> &Grid<F> {
        self.phi.grid()
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite()
            && self.lambda0.is_finite()
            && self.omega.is_finite()
            && self.phi.is_finite()
    }

    pub fn rho(&self, p: &ModelParams<F>) -> Field<F> {
        p.density(&self.phi)
    }
}

/// Unknown-vector layout `[u | λ₀ | ω | φ | ξ_b | ξ_d]`: `ξ_b` pins the mean
/// of `λ₀`, `ξ_d` pins the mean of `φ` (the discrete realization of the
/// prescribed-mean space).
#[derive(Debug, Clone, Copy)]
pub struct QsLayout {
    pub dofs: VelocityDofs,
    pub n_cells: usize,
}

impl QsLayout {
    pub fn new<F: Scalar>(grid: &Grid<F>) -> Self {
        Self {
            dofs: VelocityDofs::new(grid),
            n_cells: grid.n_cells(),
        }
    }

    pub fn n_velocity(&self) -> usize {
        self.dofs.len()
    }

    pub fn lambda_off(&self) -> usize {
        self.n_velocity()
    }

    pub fn omega_off(&self) -> usize {
        self.lambda_off() + self.n_cells
    }

    pub fn phi_off(&self) -> usize {
        self.omega_off() + self.n_cells
    }

    pub fn xi_b(&self) -> usize {
        self.phi_off() + self.n_cells
    }

    pub fn xi_d(&self) -> usize {
        self.xi_b() + 1
    }

    pub fn len(&self) -> usize {
        self.xi_d() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn phi_range(&self) -> std::ops::Range<usize> {
        self.phi_off()..self.phi_off() + self.n_cells
    }

    pub fn pack<F: Scalar>(&self, state: &StateQs<F>, xi_b: F, xi_d: F) -> Vec<F> {
        let mut x = vec![F::zero(); self.len()];
        self.dofs.pack(&state.u, &mut x[..self.n_velocity()]);
        x[self.lambda_off()..self.lambda_off() + self.n_cells]
            .copy_from_slice(state.lambda0.values());
        x[self.omega_off()..self.omega_off() + self.n_cells].copy_from_slice(state.omega.values());
        x[self.phi_off()..self.phi_off() + self.n_cells].copy_from_slice(state.phi.values());
        x[self.xi_b()] = xi_b;
        x[self.xi_d()] = xi_d;
        x
    }

    pub fn unpack<F: Scalar>(&self, x: &[F], grid: &Grid<F>) -> StateQs<F> {
        StateQs {
            u: self.dofs.unpack(&x[..self.n_velocity()], grid),
            lambda0: Field::from_values(
                grid,
                x[self.lambda_off()..self.lambda_off() + self.n_cells].to_vec(),
            ),
            omega: Field::from_values(
                grid,
                x[self.omega_off()..self.omega_off() + self.n_cells].to_vec(),
            ),
            phi: Field::from_values(
                grid,
                x[self.phi_off()..self.phi_off() + self.n_cells].to_vec(),
            ),
        }
    }
}

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

fn face_value<F: Scalar>(f: &FaceField<F>, face: (u8, usize, usize)) -> F {
    if face.0 == 0 {
        f.ux(face.1, face.2)
    } else {
        f.uy(face.1, face.2)
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

/// Frozen per-step data of the model II system.
pub struct QsSystem<F: Scalar> {
    pub grid: Grid<F>,
    pub layout: QsLayout,
    pub p: ModelParams<F>,
    pub h: F,
    pub phi_k: Field<F>,
    /// Prescribed phase-field mean, `⟨φ_k⟩`.
    pub mean_phi: F,
    rho_k_face: FaceField<F>,
    phik_face: FaceField<F>,
    m_face: FaceField<F>,
    mr_cells: Field<F>,
    /// Viscous + friction form at `φ_k` (Navier slip), interior faces.
    pub visc: SparseOperator<F>,
    /// Scale of the two constraint rows.
    constraint_scale: F,
}

impl<F: Scalar> QsSystem<F> {
    pub fn new(prev: &StateQs<F>, p: &ModelParams<F>, h: F) -> Result<Self, QsError> {
        if h <= F::zero() {
            return Err(QsError::NonpositiveStep {
                h: h.to_f64().unwrap_or(f64::NAN),
            });
        }
        if !prev.is_finite() {
            return Err(QsError::NonFinite);
        }
        p.check_gamma()
            .map_err(|e| QsError::Friction(e.to_string()))?;
        let grid = *prev.grid();
        let layout = QsLayout::new(&grid);
        let (nu, eta) = (
            p.viscosity_nu.on_field(&prev.phi),
            p.viscosity_eta.on_field(&prev.phi),
        );
        let visc_full = assemble_viscous_form(&nu, &eta, BoundaryKind::NavierSlip(p.gamma))
            .map_err(|e| QsError::Friction(e.to_string()))?;
        let visc = restrict_to_interior_faces(&visc_full, &grid);
        Ok(Self {
            grid,
            layout,
            p: *p,
            h,
            mean_phi: cell_mean(&prev.phi),
            phi_k: prev.phi.clone(),
            rho_k_face: interp_cc_to_faces(&p.density(&prev.phi)),
            phik_face: interp_cc_to_faces(&prev.phi),
            m_face: interp_cc_to_faces(&p.mobility.on_field(&prev.phi)),
            mr_cells: p.mobility_r.on_field(&prev.phi),
            visc,
            constraint_scale: (F::one() / h).max(F::of(1e4)),
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

    /// Consistent multiplier seeds for a given state (zero when the state
    /// already satisfies the mean identities).
    pub fn multiplier_seed(&self, state: &StateQs<F>) -> (F, F) {
        let kappa = self.p.split.kappa;
        let alpha = self.p.alpha();
        let mean_fp = {
            let mut acc = F::zero();
            for &s in state.phi.values() {
                acc += f0_prime(s, &self.p.potential, &self.p.split).unwrap_or(F::zero());
            }
            acc / F::of_usize(self.layout.n_cells)
        };
        // chosen so the cell-sum of the r_d block vanishes at the seed
        let xi_d = cell_mean(&state.omega)
            + kappa * (cell_mean(&state.phi) + self.mean_phi) * F::half()
            - mean_fp
            - alpha * cell_mean(&state.lambda0);
        (F::zero(), xi_d)
    }

    /// Strong-form residual on the packed unknown vector (internal blocks:
    /// momentum, mass + ξ_b, phase field, potential in full form + ξ_d, and
    /// the two mean constraints).
    pub fn residual(&self, x: &[F]) -> Result<Vec<F>, String> {
        let l = &self.layout;
        self.barrier_check(&x[l.phi_range()])?;
        let state = l.unpack(x, &self.grid);
        let xi_b = x[l.xi_b()];
        let xi_d = x[l.xi_d()];

        let mut r = vec![F::zero(); l.len()];
        let area = self.grid.cell_area();
        let h = self.h;
        let alpha = self.p.alpha();
        let beta = self.p.beta();
        let b_minus = self.p.b_minus();
        let kappa = self.p.split.kappa;
        let cp2 = self.p.c_plus() * self.p.c_plus();

        // momentum rows: S-form + friction + β ρ_k ∇λ₀ + φ_k ∇ω
        let grad_l0 = grad_cc_to_face(&state.lambda0);
        let grad_om = grad_cc_to_face(&state.omega);
        let mut upacked = vec![F::zero(); l.n_velocity()];
        l.dofs.pack(&state.u, &mut upacked);
        let visc_u = self.visc.matvec(&upacked).expect("velocity dimensions");
        let fill = |face: (u8, usize, usize), dof: usize, r: &mut [F]| {
            r[dof] = visc_u[dof] / area
                + beta * face_value(&self.rho_k_face, face) * face_value(&grad_l0, face)
                + face_value(&self.phik_face, face) * face_value(&grad_om, face);
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

        // cell rows
        let div_rho_u = div_face_to_cc(&face_scale(&self.rho_k_face, &state.u));
        let div_phi_u = div_face_to_cc(&face_scale(&self.phik_face, &state.u));
        let diff_om = div_face_to_cc(&face_scale(&self.m_face, &grad_om));
        let lap_phi = laplace_neumann(&state.phi);
        for c in 0..l.n_cells {
            let phi = state.phi.values()[c];
            let phik = self.phi_k.values()[c];
            let om = state.omega.values()[c];
            let l0 = state.lambda0.values()[c];
            let mr = self.mr_cells.values()[c];
            let dphi = (phi - phik) / h;
            r[l.lambda_off() + c] = b_minus * dphi + div_rho_u.values()[c] + h * l0 + xi_b;
            r[l.omega_off() + c] =
                dphi + div_phi_u.values()[c] - cp2 * (diff_om.values()[c] - mr * om);
            let fp = f0_prime(phi, &self.p.potential, &self.p.split).map_err(|e| e.to_string())?;
            r[l.phi_off() + c] = fp - lap_phi.values()[c] - om - kappa * (phi + phik) * F::half()
                + alpha * l0
                + xi_d;
        }

        r[l.xi_b()] = self.constraint_scale * cell_mean(&state.lambda0);
        r[l.xi_d()] = self.constraint_scale * (cell_mean(&state.phi) - self.mean_phi);
        Ok(r)
    }

    /// Analytic Jacobian of [`QsSystem::residual`].
    pub fn jacobian(&self, x: &[F]) -> Result<SparseOperator<F>, String> {
        let l = &self.layout;
        self.barrier_check(&x[l.phi_range()])?;
        let state = l.unpack(x, &self.grid);
        let n = l.len();
        let area = self.grid.cell_area();
        let h = self.h;
        let alpha = self.p.alpha();
        let beta = self.p.beta();
        let b_minus = self.p.b_minus();
        let kappa = self.p.split.kappa;
        let cp2 = self.p.c_plus() * self.p.c_plus();
        let mut tb = TripletBuilder::with_capacity(n, n, 30 * n);

        // momentum rows
        for row in 0..l.n_velocity() {
            let (cols, vals) = self.visc.row(row);
            for (&c, &v) in cols.iter().zip(vals) {
                tb.push(row, c, v / area);
            }
        }
        let pressure_cols = |face: (u8, usize, usize), dof: usize, tb: &mut TripletBuilder<F>| {
            if let Some((c_lo, c_hi, inv_h)) = grad_row(&self.grid, face) {
                let rk = beta * face_value(&self.rho_k_face, face);
                tb.push(dof, l.lambda_off() + c_hi, rk * inv_h);
                tb.push(dof, l.lambda_off() + c_lo, -rk * inv_h);
                let pk = face_value(&self.phik_face, face);
                tb.push(dof, l.omega_off() + c_hi, pk * inv_h);
                tb.push(dof, l.omega_off() + c_lo, -pk * inv_h);
            }
        };
        for j in 0..self.grid.ny() {
            for i in 1..self.grid.nx() {
                pressure_cols((0, i, j), l.dofs.xdof(i, j), &mut tb);
            }
        }
        for j in 1..self.grid.ny() {
            for i in 0..self.grid.nx() {
                pressure_cols((1, i, j), l.dofs.ydof(i, j), &mut tb);
            }
        }

        // cell rows
        let (hx, hy) = (self.grid.hx(), self.grid.hy());
        for j in 0..self.grid.ny() {
            for i in 0..self.grid.nx() {
                let c = self.grid.cell(i, j);
                let row_b = l.lambda_off() + c;
                let row_c = l.omega_off() + c;
                let row_d = l.phi_off() + c;
                let mr = self.mr_cells.values()[c];

                tb.push(row_b, l.phi_off() + c, b_minus / h);
                tb.push(row_b, l.lambda_off() + c, h);
                tb.push(row_b, l.xi_b(), F::one());

                let div_u =
                    |face: (u8, usize, usize), sign: F, inv_h: F, tb: &mut TripletBuilder<F>| {
                        if let Some(d) = face_dof(&l.dofs, face) {
                            tb.push(row_b, d, sign * inv_h * face_value(&self.rho_k_face, face));
                            tb.push(row_c, d, sign * inv_h * face_value(&self.phik_face, face));
                        }
                    };
                div_u((0, i + 1, j), F::one(), F::one() / hx, &mut tb);
                div_u((0, i, j), -F::one(), F::one() / hx, &mut tb);
                div_u((1, i, j + 1), F::one(), F::one() / hy, &mut tb);
                div_u((1, i, j), -F::one(), F::one() / hy, &mut tb);

                tb.push(row_c, l.phi_off() + c, F::one() / h);
                tb.push(row_c, l.omega_off() + c, cp2 * mr);
                let diffusion = |face: (u8, usize, usize),
                                 other: usize,
                                 inv_h2: F,
                                 tb: &mut TripletBuilder<F>| {
                    if grad_row(&self.grid, face).is_some() {
                        let m = cp2 * face_value(&self.m_face, face);
                        tb.push(row_c, l.omega_off() + c, m * inv_h2);
                        tb.push(row_c, l.omega_off() + other, -m * inv_h2);
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

                let phi = state.phi.values()[c];
                let fpp =
                    f0_second(phi, &self.p.potential, &self.p.split).map_err(|e| e.to_string())?;
                tb.push(row_d, l.omega_off() + c, -F::one());
                tb.push(row_d, l.lambda_off() + c, alpha);
                tb.push(row_d, l.xi_d(), F::one());
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

        let w = self.constraint_scale / F::of_usize(l.n_cells);
        for c in 0..l.n_cells {
            tb.push(l.xi_b(), l.lambda_off() + c, w);
            tb.push(l.xi_d(), l.phi_off() + c, w);
        }

        Ok(tb.build())
    }
}

/// Concatenated paper-form residual blocks at the candidate `z`:
/// Stokes momentum, mass balance with damping, phase field, and the
/// mean-free potential equation (with the orthogonal projection applied).
pub fn residual_qstokes<F: Scalar>(
    z: &StateQs<F>,
    prev: &StateQs<F>,
    p: &ModelParams<F>,
    h: F,
) -> Result<Vec<F>, QsError> {
    let sys = QsSystem::new(prev, p, h)?;
    let (xi_b, xi_d) = (F::zero(), F::zero());
    let x = sys.layout.pack(z, xi_b, xi_d);
    let raw = sys.residual(&x).map_err(QsError::Barrier)?;
    let l = &sys.layout;
    let mut out = raw[..l.phi_off() + l.n_cells].to_vec();

    // replace the internal full-form potential block by the mean-free form
    // P₀(ω) + κ(φ+φ_k)/2 - κ⟨φ_k⟩ - P₀(F₀'(φ)) + Δφ - αλ₀
    let kappa = p.split.kappa;
    let m = cell_mean(&prev.phi);
    let mean_om = cell_mean(&z.omega);
    let mut mean_fp = F::zero();
    for &s in z.phi.values() {
        mean_fp +=
            f0_prime(s, &p.potential, &p.split).map_err(|e| QsError::Barrier(e.to_string()))?;
    }
    mean_fp /= F::of_usize(l.n_cells);
    for c in 0..l.n_cells {
        out[l.phi_off() + c] = -raw[l.phi_off() + c] + mean_fp - mean_om - kappa * m;
    }
    Ok(out)
}

/// Persistent model II stepper with a reusable direct-solver factorization.
pub struct QsStepper<F: Scalar> {
    pub p: ModelParams<F>,
    pub h: F,
    pub ncfg: NewtonConfig<F>,
    linear: NewtonLinear<F>,
}

impl<F: Scalar> QsStepper<F> {
    pub fn new(p: ModelParams<F>, h: F, ncfg: NewtonConfig<F>) -> Self {
        Self {
            p,
            h,
            ncfg,
            linear: NewtonLinear::direct(2),
        }
    }

    pub fn step(&mut self, prev: &StateQs<F>) -> Result<(StateQs<F>, DiagRecord<F>), QsError> {
        step_qstokes_with(prev, &self.p, self.h, &self.ncfg, &mut self.linear)
    }
}

/// Advances model II by one implicit step and verifies the discrete energy
/// inequality (including the damping and boundary-friction contributions).
pub fn step_qstokes<F: Scalar>(
    prev: &StateQs<F>,
    p: &ModelParams<F>,
    h: F,
    ncfg: &NewtonConfig<F>,
    kcfg: &KrylovConfig<F>,
) -> Result<(StateQs<F>, DiagRecord<F>), QsError> {
    let _ = kcfg;
    let mut linear = NewtonLinear::direct(2);
    step_qstokes_with(prev, p, h, ncfg, &mut linear)
}

fn step_qstokes_with<F: Scalar>(
    prev: &StateQs<F>,
    p: &ModelParams<F>,
    h: F,
    ncfg: &NewtonConfig<F>,
    linear: &mut NewtonLinear<F>,
) -> Result<(StateQs<F>, DiagRecord<F>), QsError> {
    let sys = QsSystem::new(prev, p, h)?;
    let (xi_b, xi_d) = sys.multiplier_seed(prev);
    let x0 = sys.layout.pack(prev, xi_b, xi_d);
    let (x, ndiag) = newton_solve_with(
        |x| sys.residual(x),
        |x| sys.jacobian(x),
        x0,
        sys.layout.phi_range(),
        ncfg,
        linear,
    )
    .map_err(|e| QsError::Newton(e.to_string()))?;
    let state = sys.layout.unpack(&x, &sys.grid);
    if !state.is_finite() {
        return Err(QsError::NonFinite);
    }

    let e_prev = energy_free(&prev.phi, p).map_err(|e| QsError::Barrier(e.to_string()))?;
    let e_free = energy_free(&state.phi, p).map_err(|e| QsError::Barrier(e.to_string()))?;

    let gphi = grad_cc_to_face(&state.phi);
    let gphik = grad_cc_to_face(&prev.phi);
    let mut dg = gphi.clone();
    for (a, b) in dg.x.iter_mut().zip(&gphik.x) {
        *a -= *b;
    }
    for (a, b) in dg.y.iter_mut().zip(&gphik.y) {
        *a -= *b;
    }
    let increments = face_inner(&dg, &dg) * F::half();

    let d = dissipation_qstokes(&state, &prev.phi, p, h).total();
    let tol = F::of(10.0) * ncfg.res_tol * (F::one() + e_prev.abs());
    let report = crate::diagnostics::check_step(e_prev, e_free, increments, d, h, tol);
    if !report.pass {
        return Err(QsError::EnergyViolation {
            slack: report.slack.to_f64().unwrap_or(f64::NAN),
            tol: tol.to_f64().unwrap_or(f64::NAN),
        });
    }

    let record = DiagRecord {
        step: 0,
        time: F::zero(),
        e_free,
        e_kin: F::zero(),
        e_tot: e_free,
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

/// Mean of `ω` implied by the phase-field equation: testing it with the
/// constant function and using mean conservation forces `∫ m_r(φ_k) ω = 0`,
/// hence `⟨ω⟩ = -(∫m_r)⁻¹ ∫ m_r P₀(ω)`. For constant `m_r` this is zero.
pub fn mean_omega<F: Scalar>(omega: &Field<F>, phi_k: &Field<F>, p: &ModelParams<F>) -> F {
    let p0 = project_mean_free(omega);
    let mut num = F::zero();
    let mut den = F::zero();
    for (&s, &w) in phi_k.values().iter().zip(p0.values()) {
        let mr = p.mobility_r.eval(s);
        num += mr * w;
        den += mr;
    }
    -num / den
}

/// Full pressure `λ = λ₀ + λ̄` with the constant recovered from
/// `-α λ̄ = ⟨F₀'(φ)⟩ - ω̄ - κ⟨φ_k⟩`; the result satisfies the full-potential
/// equation `ω + κ(φ+φ_k)/2 = F₀'(φ) - Δφ + αλ` cellwise at converged steps.
pub fn reconstruct_full_pressure<F: Scalar>(
    lambda0: &Field<F>,
    omega: &Field<F>,
    phi: &Field<F>,
    phi_k: &Field<F>,
    p: &ModelParams<F>,
) -> Result<Field<F>, QsError> {
    let alpha = p.alpha();
    if alpha == F::zero() {
        return Err(QsError::MatchedDensities);
    }
    let omega_bar = mean_omega(omega, phi_k, p);
    let mut mean_fp = F::zero();
    for &s in phi.values() {
        mean_fp +=
            f0_prime(s, &p.potential, &p.split).map_err(|e| QsError::Barrier(e.to_string()))?;
    }
    mean_fp /= F::of_usize(phi.grid().n_cells());
    let m = cell_mean(phi_k);
    let lambda_bar = -(mean_fp - omega_bar - p.split.kappa * m) / alpha;
    Ok(lambda0.map(|v| v + lambda_bar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{friction_dissipation, stress_dissipation, WallShear};
    use crate::linsolve::newton_dense_oracle;
    use crate::model_agg::smooth_initial;
    use crate::params::Coefficient;
    use crate::potential::PotentialParams;
    use crate::scalar::{norm2, norm_inf};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn params() -> ModelParams<f64> {
        ModelParams::basic(
            1.0,
            0.5,
            PotentialParams::with_default_barrier(1.0, 2.0).unwrap(),
        )
        .unwrap()
    }

    fn uniform_state(grid: &Grid<f64>, m: f64) -> StateQs<f64> {
        StateQs {
            u: FaceField::zeros(grid),
            lambda0: Field::zeros(grid),
            omega: Field::zeros(grid),
            phi: Field::constant(grid, m),
        }
    }

    fn random_state(grid: &Grid<f64>, rng: &mut StdRng) -> StateQs<f64> {
        let mut u = FaceField::zeros(grid);
        for val in u.x.iter_mut().chain(u.y.iter_mut()) {
            *val = rng.gen_range(-0.3..0.3);
        }
        u.clear_normal_trace();
        let lambda0 = Field::from_values(
            grid,
            (0..grid.n_cells())
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect(),
        );
        let lambda0 = project_mean_free(&lambda0);
        StateQs {
            u,
            lambda0,
            omega: Field::from_values(
                grid,
                (0..grid.n_cells())
                    .map(|_| rng.gen_range(-0.5..0.5))
                    .collect(),
            ),
            phi: Field::from_values(
                grid,
                (0..grid.n_cells())
                    .map(|_| rng.gen_range(-0.7..0.7))
                    .collect(),
            ),
        }
    }

    #[test]
    fn uniform_state_has_zero_public_residual() {
        let grid: Grid<f64> = Grid::new(6, 5, 1.0, 1.0).unwrap();
        let p = params();
        let z = uniform_state(&grid, 0.25);
        let r = residual_qstokes(&z, &z, &p, 1e-3).unwrap();
        assert!(norm_inf(&r) < 1e-13, "residual {}", norm_inf(&r));
    }

    #[test]
    fn mass_block_sum_identity() {
        // Σ (b)-residual · area = (⟨ρ⟩-⟨ρ_k⟩)|Ω|/h + h Σ λ₀ · area + ξ_b |Ω|
        let mut rng = StdRng::seed_from_u64(8);
        let grid: Grid<f64> = Grid::new(7, 6, 1.0, 1.0).unwrap();
        let p = params();
        let prev = random_state(&grid, &mut rng);
        let z = random_state(&grid, &mut rng);
        let h = 1e-3;
        let sys = QsSystem::new(&prev, &p, h).unwrap();
        let x = sys.layout.pack(&z, 0.0, 0.0);
        let r = sys.residual(&x).unwrap();
        let area = grid.cell_area();
        let sum_b: f64 = (0..sys.layout.n_cells)
            .map(|c| r[sys.layout.lambda_off() + c] * area)
            .sum();
        let rho = p.density(&z.phi);
        let rho_k = p.density(&prev.phi);
        let expect = (cell_mean(&rho) - cell_mean(&rho_k)) * grid.domain_area() / h
            + h * cell_mean(&z.lambda0) * grid.domain_area();
        assert_relative_eq!(sum_b, expect, epsilon = 1e-11, max_relative = 1e-10);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(23);
        let grid: Grid<f64> = Grid::new(6, 6, 1.0, 1.0).unwrap();
        let p = params();
        let prev = random_state(&grid, &mut rng);
        let sys = QsSystem::new(&prev, &p, 1e-2).unwrap();
        let z = random_state(&grid, &mut rng);
        let x = sys.layout.pack(&z, 0.1, -0.2);
        let jac = sys.jacobian(&x).unwrap();
        for _ in 0..5 {
            let d: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let delta = 1e-6;
            let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + delta * b).collect();
            let xm: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - delta * b).collect();
            let rp = sys.residual(&xp).unwrap();
            let rm = sys.residual(&xm).unwrap();
            let fd: Vec<f64> = rp
                .iter()
                .zip(&rm)
                .map(|(a, b)| (a - b) / (2.0 * delta))
                .collect();
            let jd = jac.matvec(&d).unwrap();
            let err = norm2(&fd.iter().zip(&jd).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(err <= 1e-5 * (1.0 + norm2(&jd)), "err {err}");
        }
    }

    #[test]
    fn step_keeps_uniform_state_fixed() {
        let grid: Grid<f64> = Grid::new(8, 8, 1.0, 1.0).unwrap();
        let p = params();
        let z = uniform_state(&grid, 0.3);
        let (out, rec) = step_qstokes(
            &z,
            &p,
            1e-3,
            &NewtonConfig::default(),
            &KrylovConfig::default(),
        )
        .unwrap();
        assert!(
            norm_inf(
                &out.phi
                    .values()
                    .iter()
                    .zip(z.phi.values())
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>()
            ) < 1e-12
        );
        assert!(out
            .u
            .x
            .iter()
            .chain(out.u.y.iter())
            .all(|v| v.abs() < 1e-12));
        assert!(out.omega.values().iter().all(|v| v.abs() < 1e-12));
        assert!(out.lambda0.values().iter().all(|v| v.abs() < 1e-12));
        assert!(rec.dissipation.abs() < 1e-12);
    }

    #[test]
    fn small_grid_step_matches_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(6);
        let grid: Grid<f64> = Grid::new(4, 4, 1.0, 1.0).unwrap();
        let p = params();
        let mut prev = random_state(&grid, &mut rng);
        prev.phi = smooth_initial(&prev.phi, 1e-3, 1);
        let h = 1e-3;
        let sys = QsSystem::new(&prev, &p, h).unwrap();
        let (xb, xd) = sys.multiplier_seed(&prev);
        let x0 = sys.layout.pack(&prev, xb, xd);
        let ncfg = NewtonConfig {
            res_tol: 1e-12,
            ..NewtonConfig::default()
        };
        let kcfg = KrylovConfig {
            rel_tol: 1e-13,
            ..KrylovConfig::default()
        };
        let mut linear = crate::linsolve::NewtonLinear::krylov(kcfg);
        let (prod, _) = newton_solve_with(
            |x| sys.residual(x),
            |x| sys.jacobian(x),
            x0.clone(),
            sys.layout.phi_range(),
            &ncfg,
            &mut linear,
        )
        .unwrap();
        let oracle =
            newton_dense_oracle(|x| sys.residual(x), x0, sys.layout.phi_range(), &ncfg, 1e-7)
                .unwrap();
        let diff = norm_inf(
            &prod
                .iter()
                .zip(&oracle)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        assert!(diff <= 1e-8, "production vs oracle difference {diff}");
    }

    #[test]
    fn stratified_run_dissipates_and_conserves() {
        let grid: Grid<f64> = Grid::new(12, 12, 1.0, 1.0).unwrap();
        let p = params();
        let phi0 = Field::from_fn(&grid, |_x, y| ((0.5 - y) / 0.1).tanh());
        let prev = StateQs::quiescent(smooth_initial(&phi0, 1e-3, 2), &p);
        let mean0 = cell_mean(&prev.phi);
        let omega0 = norm2(prev.omega.values());
        let mut state = prev;
        let mut e_prev = f64::INFINITY;
        for _ in 0..10 {
            let (next, rec) = step_qstokes(
                &state,
                &p,
                1e-3,
                &NewtonConfig::default(),
                &KrylovConfig::default(),
            )
            .unwrap();
            assert!(rec.e_free <= e_prev + 1e-10);
            assert!((rec.mean_phi - mean0).abs() <= 1e-10);
            assert!(cell_mean(&next.lambda0).abs() <= 1e-12);
            e_prev = rec.e_free;
            state = next;
        }
        assert!(
            norm2(state.omega.values()) < omega0,
            "omega should relax toward zero"
        );
    }

    #[test]
    fn large_friction_approaches_no_slip() {
        let grid: Grid<f64> = Grid::new(12, 12, 1.0, 1.0).unwrap();
        let pot = PotentialParams::with_default_barrier(1.0, 2.0).unwrap();
        let one = Coefficient::Constant { value: 1.0 };
        let p = ModelParams::new(1.0, 0.5, false, one, one, one, one, 1e6, pot, None).unwrap();
        // off-center bubble to drive a nontrivial velocity
        let phi0 = Field::from_fn(&grid, |x, y| {
            let r = ((x - 0.35).powi(2) + (y - 0.6).powi(2)).sqrt();
            ((0.2 - r) / 0.08).tanh()
        });
        let prev = StateQs::quiescent(smooth_initial(&phi0, 1e-3, 2), &p);
        let (state, _) = step_qstokes(
            &prev,
            &p,
            1e-3,
            &NewtonConfig::default(),
            &KrylovConfig::default(),
        )
        .unwrap();
        let interior_max = state
            .u
            .x
            .iter()
            .chain(state.u.y.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(interior_max > 0.0, "flow should be nontrivial");
        let g = grid;
        let mut wall_max = 0.0f64;
        for i in 1..g.nx() {
            wall_max = wall_max
                .max(state.u.ux(i, 0).abs())
                .max(state.u.ux(i, g.ny() - 1).abs());
        }
        for j in 1..g.ny() {
            wall_max = wall_max
                .max(state.u.uy(0, j).abs())
                .max(state.u.uy(g.nx() - 1, j).abs());
        }
        assert!(
            wall_max <= 1e-3 * interior_max,
            "tangential wall velocity {wall_max} vs interior {interior_max}"
        );
    }

    #[test]
    fn mean_omega_examples() {
        let mut rng = StdRng::seed_from_u64(12);
        let grid: Grid<f64> = Grid::new(9, 7, 1.0, 1.0).unwrap();
        let p = params();
        // constant m_r: the weighted mean of a mean-free field vanishes
        let omega = Field::from_values(
            &grid,
            (0..grid.n_cells())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        );
        let phik = Field::constant(&grid, 0.2);
        assert!(mean_omega(&omega, &phik, &p).abs() < 1e-13);
        // constant ω: P₀ kills it
        assert_eq!(mean_omega(&Field::constant(&grid, 3.0), &phik, &p), 0.0);
        // quadratic m_r against a direct quadrature oracle
        let one = Coefficient::Constant { value: 1.0 };
        let mr = Coefficient::Quadratic { c0: 1.0, c2: 0.5 };
        let pot = PotentialParams::with_default_barrier(1.0, 2.0).unwrap();
        let pq = ModelParams::new(1.0, 0.5, false, one, mr, one, one, 1.0, pot, None).unwrap();
        let phik = Field::from_values(
            &grid,
            (0..grid.n_cells())
                .map(|_| rng.gen_range(-0.9..0.9))
                .collect(),
        );
        let omega = project_mean_free(&omega);
        let by_fn = mean_omega(&omega, &phik, &pq);
        // oracle: -Σ m_r P₀(ω) / Σ m_r by direct sums
        let mut num = 0.0;
        let mut den = 0.0;
        for (s, w) in phik.values().iter().zip(omega.values()) {
            num += (1.0 + 0.5 * s * s) * w;
            den += 1.0 + 0.5 * s * s;
        }
        assert_relative_eq!(by_fn, -num / den, epsilon = 1e-13);
    }

    #[test]
    fn pressure_reconstruction_satisfies_full_potential_equation() {
        let grid: Grid<f64> = Grid::new(8, 8, 1.0, 1.0).unwrap();
        let one = Coefficient::Constant { value: 1.0 };
        let mr = Coefficient::Quadratic { c0: 1.0, c2: 0.5 };
        let pot = PotentialParams::with_default_barrier(1.0, 2.0).unwrap();
        let p = ModelParams::new(1.0, 0.5, false, one, mr, one, one, 1.0, pot, None).unwrap();
        let phi0 = Field::from_fn(&grid, |x, y| {
            let r = ((x - 0.4).powi(2) + (y - 0.55).powi(2)).sqrt();
            ((0.22 - r) / 0.08).tanh()
        });
        let mut state = StateQs::quiescent(smooth_initial(&phi0, 1e-3, 2), &p);
        let ncfg = NewtonConfig::default();
        let mut prev = state.clone();
        for _ in 0..3 {
            prev = state.clone();
            let (next, _) =
                step_qstokes(&state, &p, 1e-3, &ncfg, &KrylovConfig::default()).unwrap();
            state = next;
        }
        let lambda =
            reconstruct_full_pressure(&state.lambda0, &state.omega, &state.phi, &prev.phi, &p)
                .unwrap();
        // plug into (d2): ω + κ(φ+φ_k)/2 - F₀'(φ) + Δφ - αλ = 0 cellwise
        let lap = laplace_neumann(&state.phi);
        let mut worst = 0.0f64;
        for c in 0..grid.n_cells() {
            let fp = f0_prime(state.phi.values()[c], &p.potential, &p.split).unwrap();
            let r = state.omega.values()[c]
                + p.split.kappa * (state.phi.values()[c] + prev.phi.values()[c]) / 2.0
                - fp
                + lap.values()[c]
                - p.alpha() * lambda.values()[c];
            worst = worst.max(r.abs());
        }
        assert!(worst <= 1e-8, "full-potential residual {worst}");
    }

    #[test]
    fn symmetric_case_has_zero_pressure_constant() {
        // φ odd about the domain center, constant m_r, zero mean: every term
        // of λ̄ vanishes
        let grid: Grid<f64> = Grid::new(8, 8, 1.0, 1.0).unwrap();
        let p = params();
        let phi = Field::from_fn(&grid, |x, y| 0.5 * ((x - 0.5) + (y - 0.5)));
        let omega = Field::zeros(&grid);
        let lambda0 = Field::zeros(&grid);
        let lambda = reconstruct_full_pressure(&lambda0, &omega, &phi, &phi, &p).unwrap();
        assert!(
            norm_inf(lambda.values()) < 1e-13,
            "lambda_bar should vanish"
        );
    }

    #[test]
    fn matched_densities_reject_reconstruction() {
        let grid: Grid<f64> = Grid::new(4, 4, 1.0, 1.0).unwrap();
        let pot = PotentialParams::with_default_barrier(1.0, 2.0).unwrap();
        let p = ModelParams::basic(1.0, 1.0, pot).unwrap();
        let f = Field::zeros(&grid);
        match reconstruct_full_pressure(&f, &f, &f, &f, &p) {
            Err(QsError::MatchedDensities) => {}
            other => panic!("expected matched-density rejection, got {other:?}"),
        }
    }

    #[test]
    fn dissipation_quadrature_matches_matrix_contraction() {
        let mut rng = StdRng::seed_from_u64(14);
        let grid: Grid<f64> = Grid::new(8, 8, 1.0, 1.0).unwrap();
        let p = params();
        let prev = random_state(&grid, &mut rng);
        let sys = QsSystem::new(&prev, &p, 1e-2).unwrap();
        let z = random_state(&grid, &mut rng);
        let mut packed = vec![0.0; sys.layout.n_velocity()];
        sys.layout.dofs.pack(&z.u, &mut packed);
        let by_matrix = sys.visc.quadratic_form(&packed);
        let nu = p.viscosity_nu.on_field(&prev.phi);
        let eta = p.viscosity_eta.on_field(&prev.phi);
        let by_quadrature = stress_dissipation(&z.u, &nu, &eta, WallShear::None)
            + friction_dissipation(&z.u, p.gamma);
        assert_relative_eq!(by_matrix, by_quadrature, max_relative = 1e-12);
    }
}
