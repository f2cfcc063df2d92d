//! Rectangular staggered (MAC) grid and its discrete differential operators.
//!
//! Scalars (phase field, pressures, chemical potentials) live at cell
//! centers, velocity components on cell faces. The operators are built so
//! that the discrete integration-by-parts identities hold exactly:
//!
//! * `div_face_to_cc` is minus the transpose of `grad_cc_to_face` for face
//!   fields with vanishing normal trace,
//! * `laplace_neumann = div ∘ grad` is symmetric negative semidefinite with
//!   the constants as kernel,
//! * the skew advection [`convect`] is exactly energy-neutral against the
//!   advected velocity,
//! * the viscous bilinear form is assembled as a sum of weighted squares and
//!   is therefore symmetric positive semidefinite by construction.
//!
//! These exact identities are what make the per-step energy inequality of the
//! two time steppers hold up to solver residual instead of up to truncation
//! error.

use crate::scalar::Scalar;
use crate::sparse::{SparseOperator, TripletBuilder};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error(
        "grid needs nx, ny >= 2 and positive edge lengths, got nx={nx}, ny={ny}, lx={lx}, ly={ly}"
    )]
    InvalidDimensions {
        nx: usize,
        ny: usize,
        lx: f64,
        ly: f64,
    },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("viscosity coefficients must be strictly positive (cell {cell})")]
    NonpositiveViscosity { cell: usize },
    #[error("Navier-slip friction must be positive, got {gamma}")]
    NonpositiveFriction { gamma: f64 },
}

/// Uniform rectangular staggered grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid<F: Scalar> {
    nx: usize,
    ny: usize,
    lx: F,
    ly: F,
    hx: F,
    hy: F,
}

impl<F: Scalar> Grid<F> {
    pub fn new(nx: usize, ny: usize, lx: F, ly: F) -> Result<Self, GridError> {
        if nx < 2 || ny < 2 || lx <= F::zero() || ly <= F::zero() {
            return Err(GridError::InvalidDimensions {
                nx,
                ny,
                lx: lx.to_f64().unwrap_or(f64::NAN),
                ly: ly.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self {
            nx,
            ny,
            lx,
            ly,
            hx: lx / F::of_usize(nx),
            hy: ly / F::of_usize(ny),
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn lx(&self) -> F {
        self.lx
    }
    pub fn ly(&self) -> F {
        self.ly
    }
    pub fn hx(&self) -> F {
        self.hx
    }
    pub fn hy(&self) -> F {
        self.hy
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Cell area, the quadrature weight of every cell and interior face.
    pub fn cell_area(&self) -> F {
        self.hx * self.hy
    }

    pub fn domain_area(&self) -> F {
        self.lx * self.ly
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    /// Index of the x-face (vertical face) at column `i in 0..=nx`, row `j`.
    #[inline]
    pub fn xface(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= self.nx && j < self.ny);
        j * (self.nx + 1) + i
    }

    /// Index of the y-face (horizontal face) at column `i`, row `j in 0..=ny`.
    #[inline]
    pub fn yface(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j <= self.ny);
        j * self.nx + i
    }

    pub fn n_xfaces(&self) -> usize {
        (self.nx + 1) * self.ny
    }
    pub fn n_yfaces(&self) -> usize {
        self.nx * (self.ny + 1)
    }

    /// Center coordinates of cell (i, j).
    pub fn cell_center(&self, i: usize, j: usize) -> (F, F) {
        (
            (F::of_usize(i) + F::half()) * self.hx,
            (F::of_usize(j) + F::half()) * self.hy,
        )
    }
}

/// Cell-centered scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<F: Scalar> {
    grid: Grid<F>,
    values: Vec<F>,
}

impl<F: Scalar> Field<F> {
    pub fn zeros(grid: &Grid<F>) -> Self {
        Self {
            grid: *grid,
            values: vec![F::zero(); grid.n_cells()],
        }
    }

    pub fn constant(grid: &Grid<F>, c: F) -> Self {
        Self {
            grid: *grid,
            values: vec![c; grid.n_cells()],
        }
    }

    pub fn from_fn(grid: &Grid<F>, mut f: impl FnMut(F, F) -> F) -> Self {
        let mut v = Vec::with_capacity(grid.n_cells());
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                let (x, y) = grid.cell_center(i, j);
                v.push(f(x, y));
            }
        }
        Self {
            grid: *grid,
            values: v,
        }
    }

    pub fn from_values(grid: &Grid<F>, values: Vec<F>) -> Self {
        assert_eq!(values.len(), grid.n_cells());
        Self {
            grid: *grid,
            values,
        }
    }

    pub fn grid(&self) -> &Grid<F> {
        &self.grid
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> F {
        self.values[self.grid.cell(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: F) {
        let idx = self.grid.cell(i, j);
        self.values[idx] = v;
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> F {
        self.values.iter().fold(F::infinity(), |a, &b| a.min(b))
    }

    pub fn max(&self) -> F {
        self.values.iter().fold(F::neg_infinity(), |a, &b| a.max(b))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Face-staggered vector field: x-components on vertical faces,
/// y-components on horizontal faces.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField<F: Scalar> {
    grid: Grid<F>,
    pub x: Vec<F>,
    pub y: Vec<F>,
}

impl<F: Scalar> FaceField<F> {
    pub fn zeros(grid: &Grid<F>) -> Self {
        Self {
            grid: *grid,
            x: vec![F::zero(); grid.n_xfaces()],
            y: vec![F::zero(); grid.n_yfaces()],
        }
    }

    pub fn grid(&self) -> &Grid<F> {
        &self.grid
    }

    #[inline]
    pub fn ux(&self, i: usize, j: usize) -> F {
        self.x[self.grid.xface(i, j)]
    }

    #[inline]
    pub fn uy(&self, i: usize, j: usize) -> F {
        self.y[self.grid.yface(i, j)]
    }

    pub fn set_ux(&mut self, i: usize, j: usize, v: F) {
        let idx = self.grid.xface(i, j);
        self.x[idx] = v;
    }

    pub fn set_uy(&mut self, i: usize, j: usize, v: F) {
        let idx = self.grid.yface(i, j);
        self.y[idx] = v;
    }

    /// Zeroes the boundary-normal entries (no-penetration trace).
    pub fn clear_normal_trace(&mut self) {
        let g = self.grid;
        for j in 0..g.ny() {
            self.x[g.xface(0, j)] = F::zero();
            self.x[g.xface(g.nx(), j)] = F::zero();
        }
        for i in 0..g.nx() {
            self.y[g.yface(i, 0)] = F::zero();
            self.y[g.yface(i, g.ny())] = F::zero();
        }
    }

    /// True when every boundary-normal entry is exactly zero.
    pub fn has_zero_normal_trace(&self) -> bool {
        let g = self.grid;
        (0..g.ny()).all(|j| self.ux(0, j) == F::zero() && self.ux(g.nx(), j) == F::zero())
            && (0..g.nx()).all(|i| self.uy(i, 0) == F::zero() && self.uy(i, g.ny()) == F::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }

    /// Concatenated [x-faces, y-faces] vector over the full face space.
    pub fn pack_full(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.x.len() + self.y.len());
        out.extend_from_slice(&self.x);
        out.extend_from_slice(&self.y);
        out
    }

    pub fn from_packed_full(grid: &Grid<F>, packed: &[F]) -> Self {
        assert_eq!(packed.len(), grid.n_xfaces() + grid.n_yfaces());
        Self {
            grid: *grid,
            x: packed[..grid.n_xfaces()].to_vec(),
            y: packed[grid.n_xfaces()..].to_vec(),
        }
    }
}

/// Two-point centered gradient onto interior faces; boundary-normal faces
/// carry zero (homogeneous Neumann convention for cell fields).
pub fn grad_cc_to_face<F: Scalar>(f: &Field<F>) -> FaceField<F> {
    let g = *f.grid();
    let mut out = FaceField::zeros(&g);
    for j in 0..g.ny() {
        for i in 1..g.nx() {
            let v = (f.at(i, j) - f.at(i - 1, j)) / g.hx();
            out.set_ux(i, j, v);
        }
    }
    for j in 1..g.ny() {
        for i in 0..g.nx() {
            let v = (f.at(i, j) - f.at(i, j - 1)) / g.hy();
            out.set_uy(i, j, v);
        }
    }
    out
}

/// Conservative flux-difference divergence, cell by cell.
pub fn div_face_to_cc<F: Scalar>(w: &FaceField<F>) -> Field<F> {
    let g = *w.grid();
    let mut out = Field::zeros(&g);
    for j in 0..g.ny() {
        for i in 0..g.nx() {
            let d = (w.ux(i + 1, j) - w.ux(i, j)) / g.hx() + (w.uy(i, j + 1) - w.uy(i, j)) / g.hy();
            out.set(i, j, d);
        }
    }
    out
}

/// Discrete Neumann Laplacian, `div ∘ grad`.
pub fn laplace_neumann<F: Scalar>(f: &Field<F>) -> Field<F> {
    div_face_to_cc(&grad_cc_to_face(f))
}

/// Spatial mean: `(Σ f · cell area) / |Ω|`.
pub fn cell_mean<F: Scalar>(f: &Field<F>) -> F {
    let sum: F = f.values().iter().copied().sum();
    sum / F::of_usize(f.grid().n_cells())
}

/// Orthogonal projection onto mean-free fields: `f - ⟨f⟩`.
pub fn project_mean_free<F: Scalar>(f: &Field<F>) -> Field<F> {
    let m = cell_mean(f);
    f.map(|v| v - m)
}

/// Arithmetic-mean interpolation of a cell field to faces.
/// Boundary faces take the adjacent cell value (one-sided).
pub fn interp_cc_to_faces<F: Scalar>(f: &Field<F>) -> FaceField<F> {
    let g = *f.grid();
    let mut out = FaceField::zeros(&g);
    for j in 0..g.ny() {
        out.set_ux(0, j, f.at(0, j));
        out.set_ux(g.nx(), j, f.at(g.nx() - 1, j));
        for i in 1..g.nx() {
            out.set_ux(i, j, (f.at(i - 1, j) + f.at(i, j)) * F::half());
        }
    }
    for i in 0..g.nx() {
        out.set_uy(i, 0, f.at(i, 0));
        out.set_uy(i, g.ny(), f.at(i, g.ny() - 1));
        for j in 1..g.ny() {
            out.set_uy(i, j, (f.at(i, j - 1) + f.at(i, j)) * F::half());
        }
    }
    out
}

/// Componentwise product of a face-interpolated coefficient and a face field.
pub fn face_scale<F: Scalar>(coef: &FaceField<F>, w: &FaceField<F>) -> FaceField<F> {
    let mut out = w.clone();
    for (o, c) in out.x.iter_mut().zip(&coef.x) {
        *o *= *c;
    }
    for (o, c) in out.y.iter_mut().zip(&coef.y) {
        *o *= *c;
    }
    out
}

/// `Σ_faces a·b · (cell area)` with trapezoid weights (half on boundary-normal
/// faces). This is the inner product under which `div = -gradᵀ`.
pub fn face_inner<F: Scalar>(a: &FaceField<F>, b: &FaceField<F>) -> F {
    let g = *a.grid();
    let w = g.cell_area();
    let mut acc = F::zero();
    for j in 0..g.ny() {
        for i in 0..=g.nx() {
            let half = i == 0 || i == g.nx();
            let ww = if half { w * F::half() } else { w };
            acc += ww * a.ux(i, j) * b.ux(i, j);
        }
    }
    for j in 0..=g.ny() {
        for i in 0..g.nx() {
            let half = j == 0 || j == g.ny();
            let ww = if half { w * F::half() } else { w };
            acc += ww * a.uy(i, j) * b.uy(i, j);
        }
    }
    acc
}

/// `Σ_cells f·g · (cell area)`.
pub fn cell_inner<F: Scalar>(f: &Field<F>, g: &Field<F>) -> F {
    let w = f.grid().cell_area();
    let mut acc = F::zero();
    for (a, b) in f.values().iter().zip(g.values()) {
        acc += *a * *b;
    }
    acc * w
}

// ---------------------------------------------------------------------------
// Velocity degrees of freedom
// ---------------------------------------------------------------------------

/// Enumeration of the interior face unknowns: every boundary-normal face is
/// pinned to zero (no-penetration), so the unknown vector covers x-faces with
/// `1 <= i <= nx-1` followed by y-faces with `1 <= j <= ny-1`.
#[derive(Debug, Clone, Copy)]
pub struct VelocityDofs {
    nx: usize,
    ny: usize,
}

impl VelocityDofs {
    pub fn new<F: Scalar>(grid: &Grid<F>) -> Self {
        Self {
            nx: grid.nx(),
            ny: grid.ny(),
        }
    }

    pub fn n_ux(&self) -> usize {
        (self.nx - 1) * self.ny
    }

    pub fn n_uy(&self) -> usize {
        self.nx * (self.ny - 1)
    }

    pub fn len(&self) -> usize {
        self.n_ux() + self.n_uy()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dof id of interior x-face (i, j), `1 <= i <= nx-1`.
    #[inline]
    pub fn xdof(&self, i: usize, j: usize) -> usize {
        debug_assert!(i >= 1 && i < self.nx && j < self.ny);
        j * (self.nx - 1) + (i - 1)
    }

    /// Dof id of interior y-face (i, j), `1 <= j <= ny-1`.
    #[inline]
    pub fn ydof(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j >= 1 && j < self.ny);
        self.n_ux() + (j - 1) * self.nx + i
    }

    /// Dof id of an x-face if it is interior.
    #[inline]
    pub fn try_xdof(&self, i: usize, j: usize) -> Option<usize> {
        (i >= 1 && i < self.nx).then(|| self.xdof(i, j))
    }

    /// Dof id of a y-face if it is interior.
    #[inline]
    pub fn try_ydof(&self, i: usize, j: usize) -> Option<usize> {
        (j >= 1 && j < self.ny).then(|| self.ydof(i, j))
    }

    pub fn pack<F: Scalar>(&self, v: &FaceField<F>, out: &mut [F]) {
        debug_assert_eq!(out.len(), self.len());
        for j in 0..self.ny {
            for i in 1..self.nx {
                out[self.xdof(i, j)] = v.ux(i, j);
            }
        }
        for j in 1..self.ny {
            for i in 0..self.nx {
                out[self.ydof(i, j)] = v.uy(i, j);
            }
        }
    }

    pub fn unpack<F: Scalar>(&self, dofs: &[F], grid: &Grid<F>) -> FaceField<F> {
        debug_assert_eq!(dofs.len(), self.len());
        let mut v = FaceField::zeros(grid);
        for j in 0..self.ny {
            for i in 1..self.nx {
                v.set_ux(i, j, dofs[self.xdof(i, j)]);
            }
        }
        for j in 1..self.ny {
            for i in 0..self.nx {
                v.set_uy(i, j, dofs[self.ydof(i, j)]);
            }
        }
        v
    }
}

// ---------------------------------------------------------------------------
// Viscous bilinear form
// ---------------------------------------------------------------------------

/// Velocity boundary treatment of the viscous form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryKind<F: Scalar> {
    /// `v = 0` on the whole boundary; wall shear uses mirrored ghost values.
    NoSlip,
    /// `v·n = 0` with tangential friction `γ > 0`; the wall-shear quadrature
    /// is dropped (natural condition) and the friction integral is taken by
    /// the trapezoid rule over the tangential faces nearest each wall.
    NavierSlip(F),
}

/// Assembles the symmetric form `a(v, ψ) = ∫ 2ν Dv:Dψ + η (∇·v)(∇·ψ)`
/// (+ the boundary friction term for [`BoundaryKind::NavierSlip`]) over the
/// full face space, in the [x-faces, y-faces] packing of
/// [`FaceField::pack_full`].
///
/// The form is a weighted sum of squares: normal strain rates and the
/// dilatation at cell centers, the shear rate at cell corners (ν averaged
/// from the adjacent cells), so the assembled matrix is symmetric positive
/// semidefinite by construction. Restricted to the interior-face unknowns
/// (see [`restrict_to_interior_faces`]) it is positive definite for no-slip,
/// and for positive friction on the no-penetration space.
pub fn assemble_viscous_form<F: Scalar>(
    nu: &Field<F>,
    eta: &Field<F>,
    bc: BoundaryKind<F>,
) -> Result<SparseOperator<F>, GridError> {
    if nu.grid() != eta.grid() {
        return Err(GridError::GridMismatch);
    }
    let g = *nu.grid();
    for (c, (&n, &e)) in nu.values().iter().zip(eta.values()).enumerate() {
        if n <= F::zero() || e <= F::zero() {
            return Err(GridError::NonpositiveViscosity { cell: c });
        }
    }
    if let BoundaryKind::NavierSlip(gamma) = bc {
        if gamma <= F::zero() {
            return Err(GridError::NonpositiveFriction {
                gamma: gamma.to_f64().unwrap_or(f64::NAN),
            });
        }
    }

    let n = g.n_xfaces() + g.n_yfaces();
    let xdof = |i: usize, j: usize| g.xface(i, j);
    let ydof = |i: usize, j: usize| g.n_xfaces() + g.yface(i, j);
    let area = g.cell_area();
    let (hx, hy) = (g.hx(), g.hy());
    let mut b = TripletBuilder::with_capacity(n, n, 24 * n);

    // rank-one update A += weight * stencil stencilᵀ
    let add_square = |b: &mut TripletBuilder<F>, stencil: &[(usize, F)], weight: F| {
        for &(r, cr) in stencil {
            for &(c, cc) in stencil {
                b.push(r, c, weight * cr * cc);
            }
        }
    };

    // cell-centered terms: 2ν (∂x u)² + 2ν (∂y v)² + η (∇·v)²
    for j in 0..g.ny() {
        for i in 0..g.nx() {
            let c = g.cell(i, j);
            let two_nu = F::two() * nu.values()[c];
            let dxu = [
                (xdof(i + 1, j), F::one() / hx),
                (xdof(i, j), -F::one() / hx),
            ];
            let dyv = [
                (ydof(i, j + 1), F::one() / hy),
                (ydof(i, j), -F::one() / hy),
            ];
            add_square(&mut b, &dxu, two_nu * area);
            add_square(&mut b, &dyv, two_nu * area);
            let div = [dxu[0], dxu[1], dyv[0], dyv[1]];
            add_square(&mut b, &div, eta.values()[c] * area);
        }
    }

    // corner (node) shear terms: ν (∂y u + ∂x v)²
    let nu_at_node = |i: usize, j: usize| -> F {
        let mut acc = F::zero();
        let mut count = 0usize;
        for (ci, cj) in [
            (i.wrapping_sub(1), j.wrapping_sub(1)),
            (i, j.wrapping_sub(1)),
            (i.wrapping_sub(1), j),
            (i, j),
        ] {
            if ci < g.nx() && cj < g.ny() {
                acc += nu.at(ci, cj);
                count += 1;
            }
        }
        acc / F::of_usize(count)
    };

    // interior nodes, full weight
    for j in 1..g.ny() {
        for i in 1..g.nx() {
            let stencil = [
                (xdof(i, j), F::one() / hy),
                (xdof(i, j - 1), -F::one() / hy),
                (ydof(i, j), F::one() / hx),
                (ydof(i - 1, j), -F::one() / hx),
            ];
            add_square(&mut b, &stencil, nu_at_node(i, j) * area);
        }
    }

    match bc {
        BoundaryKind::NoSlip => {
            // wall nodes: the tangential derivative is one-sided against the
            // mirrored ghost value, the normal-component derivative along the
            // wall is kept; trapezoid (half) weight
            let half_area = area * F::half();
            for i in 1..g.nx() {
                let bottom = [
                    (xdof(i, 0), F::two() / hy),
                    (ydof(i, 0), F::one() / hx),
                    (ydof(i - 1, 0), -F::one() / hx),
                ];
                add_square(&mut b, &bottom, nu_at_node(i, 0) * half_area);
                let top = [
                    (xdof(i, g.ny() - 1), F::two() / hy),
                    (ydof(i, g.ny()), F::one() / hx),
                    (ydof(i - 1, g.ny()), -F::one() / hx),
                ];
                add_square(&mut b, &top, nu_at_node(i, g.ny()) * half_area);
            }
            for j in 1..g.ny() {
                let left = [
                    (ydof(0, j), F::two() / hx),
                    (xdof(0, j), F::one() / hy),
                    (xdof(0, j - 1), -F::one() / hy),
                ];
                add_square(&mut b, &left, nu_at_node(0, j) * half_area);
                let right = [
                    (ydof(g.nx() - 1, j), F::two() / hx),
                    (xdof(g.nx(), j), F::one() / hy),
                    (xdof(g.nx(), j - 1), -F::one() / hy),
                ];
                add_square(&mut b, &right, nu_at_node(g.nx(), j) * half_area);
            }
        }
        BoundaryKind::NavierSlip(gamma) => {
            // tangential friction, trapezoid rule over the tangential faces
            // nearest each wall (the wall-end samples are normal faces of the
            // adjacent walls and vanish on the no-penetration space)
            for i in 1..g.nx() {
                add_square(&mut b, &[(xdof(i, 0), F::one())], gamma * hx);
                add_square(&mut b, &[(xdof(i, g.ny() - 1), F::one())], gamma * hx);
            }
            for j in 1..g.ny() {
                add_square(&mut b, &[(ydof(0, j), F::one())], gamma * hy);
                add_square(&mut b, &[(ydof(g.nx() - 1, j), F::one())], gamma * hy);
            }
        }
    }

    Ok(b.build().into_symmetric())
}

/// Restricts a full-face-space operator to the interior-face unknowns of
/// [`VelocityDofs`] (boundary-normal faces pinned to zero).
pub fn restrict_to_interior_faces<F: Scalar>(
    a: &SparseOperator<F>,
    grid: &Grid<F>,
) -> SparseOperator<F> {
    let dofs = VelocityDofs::new(grid);
    let nfull = grid.n_xfaces() + grid.n_yfaces();
    assert_eq!(a.rows(), nfull);
    assert_eq!(a.cols(), nfull);
    let mut map = vec![usize::MAX; nfull];
    for j in 0..grid.ny() {
        for i in 1..grid.nx() {
            map[grid.xface(i, j)] = dofs.xdof(i, j);
        }
    }
    for j in 1..grid.ny() {
        for i in 0..grid.nx() {
            map[grid.n_xfaces() + grid.yface(i, j)] = dofs.ydof(i, j);
        }
    }
    let mut b = TripletBuilder::with_capacity(dofs.len(), dofs.len(), a.nnz());
    for r in 0..nfull {
        if map[r] == usize::MAX {
            continue;
        }
        let (cols, vals) = a.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            if map[c] != usize::MAX {
                b.push(map[r], map[c], v);
            }
        }
    }
    b.build().into_symmetric()
}

// ---------------------------------------------------------------------------
// Skew-symmetric advection
// ---------------------------------------------------------------------------

/// One elementary advection contribution: the dual face carries the mean of
/// the mass flux over `w_faces` and transports the across-face neighbor value.
#[derive(Debug, Clone, Copy)]
pub struct ConvTerm {
    /// Face (as (component, i, j)) receiving the contribution; always interior.
    pub target: (u8, usize, usize),
    /// The two flux samples averaged on the dual face.
    pub w_faces: [(u8, usize, usize); 2],
    /// The across-face neighbor whose value is transported.
    pub neighbor: (u8, usize, usize),
    /// Signed geometric coefficient `± len / (4 · cell area)`; the factor 4
    /// folds in both the flux mean and the centered value mean.
    pub coeff: f64,
}

/// Enumerates the elementary terms of the skew advection
/// `conv(w, v) = ∇·(w ⊗ v) - ½ (∇·w) v` on the staggered dual meshes:
/// `conv_f = Σ coeff · (w_a + w_b) · v_neighbor`.
///
/// Pairing `conv(w, v)` with `v` telescopes to zero exactly whenever `w` has
/// zero normal trace and `v` vanishes on boundary faces, which is the
/// discrete counterpart of the two vanishing divergence integrals in the
/// energy argument.
pub fn for_each_conv_term<F: Scalar>(grid: &Grid<F>, mut visit: impl FnMut(ConvTerm)) {
    let (nx, ny) = (grid.nx(), grid.ny());
    let vol = (grid.cell_area()).to_f64().expect("finite cell area");
    let hx = grid.hx().to_f64().expect("finite hx");
    let hy = grid.hy().to_f64().expect("finite hy");
    const X: u8 = 0;
    const Y: u8 = 1;

    // x-component at interior x-faces
    for j in 0..ny {
        for i in 1..nx {
            let target = (X, i, j);
            // east dual face at cell (i, j) center
            visit(ConvTerm {
                target,
                w_faces: [(X, i, j), (X, i + 1, j)],
                neighbor: (X, i + 1, j),
                coeff: hy / (4.0 * vol),
            });
            // west dual face at cell (i-1, j) center
            visit(ConvTerm {
                target,
                w_faces: [(X, i - 1, j), (X, i, j)],
                neighbor: (X, i - 1, j),
                coeff: -hy / (4.0 * vol),
            });
            // north dual face at node (i, j+1); on the top wall the normal
            // flux samples vanish, so the term is skipped
            if j + 1 < ny {
                visit(ConvTerm {
                    target,
                    w_faces: [(Y, i - 1, j + 1), (Y, i, j + 1)],
                    neighbor: (X, i, j + 1),
                    coeff: hx / (4.0 * vol),
                });
            }
            // south dual face at node (i, j)
            if j > 0 {
                visit(ConvTerm {
                    target,
                    w_faces: [(Y, i - 1, j), (Y, i, j)],
                    neighbor: (X, i, j - 1),
                    coeff: -hx / (4.0 * vol),
                });
            }
        }
    }

    // y-component at interior y-faces
    for j in 1..ny {
        for i in 0..nx {
            let target = (Y, i, j);
            visit(ConvTerm {
                target,
                w_faces: [(Y, i, j), (Y, i, j + 1)],
                neighbor: (Y, i, j + 1),
                coeff: hx / (4.0 * vol),
            });
            visit(ConvTerm {
                target,
                w_faces: [(Y, i, j - 1), (Y, i, j)],
                neighbor: (Y, i, j - 1),
                coeff: -hx / (4.0 * vol),
            });
            if i + 1 < nx {
                visit(ConvTerm {
                    target,
                    w_faces: [(X, i + 1, j - 1), (X, i + 1, j)],
                    neighbor: (Y, i + 1, j),
                    coeff: hy / (4.0 * vol),
                });
            }
            if i > 0 {
                visit(ConvTerm {
                    target,
                    w_faces: [(X, i, j - 1), (X, i, j)],
                    neighbor: (Y, i - 1, j),
                    coeff: -hy / (4.0 * vol),
                });
            }
        }
    }
}

fn face_value<F: Scalar>(f: &FaceField<F>, id: (u8, usize, usize)) -> F {
    match id.0 {
        0 => f.ux(id.1, id.2),
        _ => f.uy(id.1, id.2),
    }
}

/// Skew advection of the face field `v` by the mass flux `w`
/// (`∇·(w ⊗ v) - ½ (∇·w) v`); boundary faces of the result are zero.
pub fn convect<F: Scalar>(w: &FaceField<F>, v: &FaceField<F>) -> FaceField<F> {
    let grid = *w.grid();
    let mut out = FaceField::zeros(&grid);
    for_each_conv_term(&grid, |t| {
        let wbar = face_value(w, t.w_faces[0]) + face_value(w, t.w_faces[1]);
        let contrib = F::of(t.coeff) * wbar * face_value(v, t.neighbor);
        match t.target.0 {
            0 => {
                let idx = grid.xface(t.target.1, t.target.2);
                out.x[idx] += contrib;
            }
            _ => {
                let idx = grid.yface(t.target.1, t.target.2);
                out.y[idx] += contrib;
            }
        }
    });
    out
}

// ---------------------------------------------------------------------------
// Operator matrices (structure checks and Jacobian assembly)
// ---------------------------------------------------------------------------

/// Matrix of [`grad_cc_to_face`] restricted to interior-face rows.
pub fn assemble_grad<F: Scalar>(grid: &Grid<F>) -> SparseOperator<F> {
    let dofs = VelocityDofs::new(grid);
    let mut b = TripletBuilder::with_capacity(dofs.len(), grid.n_cells(), 2 * dofs.len());
    for j in 0..grid.ny() {
        for i in 1..grid.nx() {
            let r = dofs.xdof(i, j);
            b.push(r, grid.cell(i, j), F::one() / grid.hx());
            b.push(r, grid.cell(i - 1, j), -F::one() / grid.hx());
        }
    }
    for j in 1..grid.ny() {
        for i in 0..grid.nx() {
            let r = dofs.ydof(i, j);
            b.push(r, grid.cell(i, j), F::one() / grid.hy());
            b.push(r, grid.cell(i, j - 1), -F::one() / grid.hy());
        }
    }
    b.build()
}

/// Matrix of [`div_face_to_cc`] acting on interior-face unknowns.
pub fn assemble_div<F: Scalar>(grid: &Grid<F>) -> SparseOperator<F> {
    let dofs = VelocityDofs::new(grid);
    let mut b = TripletBuilder::with_capacity(grid.n_cells(), dofs.len(), 4 * grid.n_cells());
    for j in 0..grid.ny() {
        for i in 0..grid.nx() {
            let r = grid.cell(i, j);
            if let Some(d) = dofs.try_xdof(i + 1, j) {
                b.push(r, d, F::one() / grid.hx());
            }
            if let Some(d) = dofs.try_xdof(i, j) {
                b.push(r, d, -F::one() / grid.hx());
            }
            if let Some(d) = dofs.try_ydof(i, j + 1) {
                b.push(r, d, F::one() / grid.hy());
            }
            if let Some(d) = dofs.try_ydof(i, j) {
                b.push(r, d, -F::one() / grid.hy());
            }
        }
    }
    b.build()
}

/// Matrix of [`laplace_neumann`] on cell fields.
pub fn assemble_laplace<F: Scalar>(grid: &Grid<F>) -> SparseOperator<F> {
    let n = grid.n_cells();
    let mut b = TripletBuilder::with_capacity(n, n, 5 * n);
    let ax = F::one() / (grid.hx() * grid.hx());
    let ay = F::one() / (grid.hy() * grid.hy());
    for j in 0..grid.ny() {
        for i in 0..grid.nx() {
            let r = grid.cell(i, j);
            let mut diag = F::zero();
            if i > 0 {
                b.push(r, grid.cell(i - 1, j), ax);
                diag -= ax;
            }
            if i + 1 < grid.nx() {
                b.push(r, grid.cell(i + 1, j), ax);
                diag -= ax;
            }
            if j > 0 {
                b.push(r, grid.cell(i, j - 1), ay);
                diag -= ay;
            }
            if j + 1 < grid.ny() {
                b.push(r, grid.cell(i, j + 1), ay);
                diag -= ay;
            }
            b.push(r, r, diag);
        }
    }
    b.build().into_symmetric()
}
