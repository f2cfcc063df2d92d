//! Sparse Krylov solvers, a dense direct oracle, and the safeguarded Newton
//! driver shared by both time steppers.

use crate::potential::clamp_barrier;
use crate::scalar::{dot, norm2, Scalar};
use crate::sparse::{BorderedBandSolver, Ilu0, SparseOperator};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinsolveError<F: Scalar> {
    #[error("dimension mismatch: matrix is {rows}x{cols}, rhs has length {len}")]
    DimensionMismatch {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("method misuse: {0}")]
    MethodMisuse(String),
    #[error("no convergence after {iterations} iterations, residual {residual}")]
    NotConverged {
        best: Vec<F>,
        residual: F,
        iterations: usize,
    },
    #[error("matrix numerically singular (condition estimate {condition_estimate:e})")]
    SingularMatrix { condition_estimate: F },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KrylovMethod {
    Cg,
    BiCgStab,
    /// GMRES with the given restart length.
    Gmres(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Precond {
    None,
    Jacobi,
    Ilu0,
}

#[derive(Debug, Clone, Copy)]
pub struct KrylovConfig<F: Scalar> {
    pub method: KrylovMethod,
    pub precond: Precond,
    pub rel_tol: F,
    pub abs_tol: F,
    pub max_iter: usize,
}

impl<F: Scalar> Default for KrylovConfig<F> {
    fn default() -> Self {
        Self {
            method: KrylovMethod::Gmres(50),
            precond: Precond::Ilu0,
            rel_tol: F::of(1e-10),
            abs_tol: F::of(1e-14),
            max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KrylovSolution<F: Scalar> {
    pub x: Vec<F>,
    pub residual: F,
    pub iterations: usize,
}

enum Preconditioner<F: Scalar> {
    Identity,
    Jacobi(Vec<F>),
    Ilu(Ilu0<F>),
}

impl<F: Scalar> Preconditioner<F> {
    fn build(a: &SparseOperator<F>, kind: Precond) -> Self {
        match kind {
            Precond::None => Self::Identity,
            Precond::Jacobi => {
                let n = a.rows();
                let mut d = vec![F::one(); n];
                for r in 0..n {
                    let (cols, vals) = a.row(r);
                    for (&c, &v) in cols.iter().zip(vals) {
                        if c == r && v.abs() > F::of(1e-300) {
                            d[r] = v;
                        }
                    }
                }
                Self::Jacobi(d)
            }
            Precond::Ilu0 => Self::Ilu(Ilu0::factorize_rcm(a)),
        }
    }

    fn apply(&self, r: &[F], z: &mut [F]) {
        match self {
            Self::Identity => z.copy_from_slice(r),
            Self::Jacobi(d) => {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(d) {
                    *zi = *ri / *di;
                }
            }
            Self::Ilu(ilu) => ilu.apply(r, z),
        }
    }
}

/// Solves `A x = b` with the configured Krylov method. Returns the iterate
/// once `‖b - Ax‖ ≤ rel_tol·‖b‖ + abs_tol`; on stagnation or iteration
/// exhaustion the best iterate is carried in the error.
pub fn solve_sparse<F: Scalar>(
    a: &SparseOperator<F>,
    b: &[F],
    cfg: &KrylovConfig<F>,
) -> Result<KrylovSolution<F>, LinsolveError<F>> {
    if a.rows() != a.cols() || a.cols() != b.len() {
        return Err(LinsolveError::DimensionMismatch {
            rows: a.rows(),
            cols: a.cols(),
            len: b.len(),
        });
    }
    let target = cfg.rel_tol * norm2(b) + cfg.abs_tol;
    let precond = Preconditioner::build(a, cfg.precond);
    match cfg.method {
        KrylovMethod::Cg => cg(a, b, target, cfg.max_iter, &precond),
        KrylovMethod::BiCgStab => bicgstab(a, b, target, cfg.max_iter, &precond),
        KrylovMethod::Gmres(m) => gmres(a, b, target, cfg.max_iter, m.max(1), &precond),
    }
}

fn cg<F: Scalar>(
    a: &SparseOperator<F>,
    b: &[F],
    target: F,
    max_iter: usize,
    precond: &Preconditioner<F>,
) -> Result<KrylovSolution<F>, LinsolveError<F>> {
    let n = b.len();
    let mut x = vec![F::zero(); n];
    let mut r = b.to_vec();
    let mut z = vec![F::zero(); n];
    precond.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = norm2(&r);
    let mut ap = vec![F::zero(); n];
    for it in 0..max_iter {
        if res <= target {
            return Ok(KrylovSolution {
                x,
                residual: res,
                iterations: it,
            });
        }
        a.matvec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= F::zero() {
            return Err(LinsolveError::MethodMisuse(format!(
                "CG breakdown: p^T A p = {pap:e} <= 0, matrix not positive definite"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = norm2(&r);
        precond.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if res <= target {
        Ok(KrylovSolution {
            x,
            residual: res,
            iterations: max_iter,
        })
    } else {
        Err(LinsolveError::NotConverged {
            best: x,
            residual: res,
            iterations: max_iter,
        })
    }
}

fn bicgstab<F: Scalar>(
    a: &SparseOperator<F>,
    b: &[F],
    target: F,
    max_iter: usize,
    precond: &Preconditioner<F>,
) -> Result<KrylovSolution<F>, LinsolveError<F>> {
    let n = b.len();
    let mut x = vec![F::zero(); n];
    let mut r = b.to_vec();
    let r0 = r.clone();
    let mut res = norm2(&r);
    let mut rho = F::one();
    let mut alpha = F::one();
    let mut omega = F::one();
    let mut p = vec![F::zero(); n];
    let mut v = vec![F::zero(); n];
    let mut phat = vec![F::zero(); n];
    let mut shat = vec![F::zero(); n];
    let mut t = vec![F::zero(); n];
    let tiny = F::of(1e-300);
    for it in 0..max_iter {
        if res <= target {
            return Ok(KrylovSolution {
                x,
                residual: res,
                iterations: it,
            });
        }
        let rho_new = dot(&r0, &r);
        if rho_new.abs() < tiny || omega.abs() < tiny {
            return Err(LinsolveError::NotConverged {
                best: x,
                residual: res,
                iterations: it,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        precond.apply(&p, &mut phat);
        a.matvec_into(&phat, &mut v);
        let r0v = dot(&r0, &v);
        if r0v.abs() < tiny {
            return Err(LinsolveError::NotConverged {
                best: x,
                residual: res,
                iterations: it,
            });
        }
        alpha = rho / r0v;
        let s: Vec<F> = (0..n).map(|i| r[i] - alpha * v[i]).collect();
        let s_norm = norm2(&s);
        if s_norm <= target {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            return Ok(KrylovSolution {
                x,
                residual: s_norm,
                iterations: it + 1,
            });
        }
        precond.apply(&s, &mut shat);
        a.matvec_into(&shat, &mut t);
        let tt = dot(&t, &t);
        if tt < tiny {
            return Err(LinsolveError::NotConverged {
                best: x,
                residual: res,
                iterations: it,
            });
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm2(&r);
    }
    if res <= target {
        Ok(KrylovSolution {
            x,
            residual: res,
            iterations: max_iter,
        })
    } else {
        Err(LinsolveError::NotConverged {
            best: x,
            residual: res,
            iterations: max_iter,
        })
    }
}

/// Right-preconditioned GMRES(m). Convergence is only ever reported against
/// the recomputed true residual `‖b - Ax‖`, so inconsistent or singular
/// systems surface as `NotConverged` (with the best iterate) instead of a
/// silent wrong answer.
fn gmres<F: Scalar>(
    a: &SparseOperator<F>,
    b: &[F],
    target: F,
    max_iter: usize,
    restart: usize,
    precond: &Preconditioner<F>,
) -> Result<KrylovSolution<F>, LinsolveError<F>> {
    let n = b.len();
    let mut x = vec![F::zero(); n];
    let mut best_x = x.clone();
    let mut best_res = norm2(b);
    let mut total_iters = 0usize;
    let mut tmp = vec![F::zero(); n];
    let mut prev_cycle_res = F::infinity();

    while total_iters < max_iter {
        // true residual of the current outer iterate
        a.matvec_into(&x, &mut tmp);
        let mut r: Vec<F> = (0..n).map(|i| b[i] - tmp[i]).collect();
        let beta = norm2(&r);
        if !beta.is_finite() {
            return Err(LinsolveError::NotConverged {
                best: best_x,
                residual: best_res,
                iterations: total_iters,
            });
        }
        if beta < best_res {
            best_res = beta;
            best_x.copy_from_slice(&x);
        }
        if beta <= target {
            return Ok(KrylovSolution {
                x,
                residual: beta,
                iterations: total_iters,
            });
        }
        // restart cycle made no progress: stagnation (e.g. singular system)
        if beta >= prev_cycle_res * (F::one() - F::of(1e-12)) && total_iters > 0 {
            return Err(LinsolveError::NotConverged {
                best: best_x,
                residual: best_res,
                iterations: total_iters,
            });
        }
        prev_cycle_res = beta;

        for ri in &mut r {
            *ri /= beta;
        }
        let m = restart.min(n).min(max_iter - total_iters);
        let mut basis: Vec<Vec<F>> = vec![r];
        // column-major Hessenberg after Givens rotations
        let mut h_cols: Vec<Vec<F>> = Vec::with_capacity(m);
        let mut cs: Vec<F> = Vec::with_capacity(m);
        let mut sn: Vec<F> = Vec::with_capacity(m);
        let mut g = vec![F::zero(); m + 1];
        g[0] = beta;
        let mut k_used = 0usize;

        for k in 0..m {
            total_iters += 1;
            // w = A M^{-1} v_k
            precond.apply(&basis[k], &mut tmp);
            let mut w = a.matvec(&tmp).expect("dimensions checked");
            let mut h = vec![F::zero(); k + 2];
            for (j, vj) in basis.iter().enumerate() {
                h[j] = dot(&w, vj);
                for i in 0..n {
                    w[i] -= h[j] * vj[i];
                }
            }
            h[k + 1] = norm2(&w);
            let happy = h[k + 1] <= F::of(1e-300) || !h[k + 1].is_finite();
            if !happy {
                let inv = F::one() / h[k + 1];
                for wi in &mut w {
                    *wi *= inv;
                }
                basis.push(w);
            }
            // apply previous rotations
            for j in 0..k {
                let t1 = cs[j] * h[j] + sn[j] * h[j + 1];
                let t2 = -sn[j] * h[j] + cs[j] * h[j + 1];
                h[j] = t1;
                h[j + 1] = t2;
            }
            let denom = (h[k] * h[k] + h[k + 1] * h[k + 1]).sqrt();
            let (c, s) = if denom <= F::of(1e-300) {
                (F::one(), F::zero())
            } else {
                (h[k] / denom, h[k + 1] / denom)
            };
            cs.push(c);
            sn.push(s);
            h[k] = c * h[k] + s * h[k + 1];
            h[k + 1] = F::zero();
            let g_next = -s * g[k];
            g[k] = c * g[k];
            g[k + 1] = g_next;
            h_cols.push(h);
            k_used = k + 1;
            if g[k + 1].abs() <= target || happy {
                break;
            }
        }

        // back substitution on the triangularized system; a vanishing pivot
        // contributes nothing instead of poisoning the update
        let mut y = vec![F::zero(); k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for j in i + 1..k_used {
                acc -= h_cols[j][i] * y[j];
            }
            let piv = h_cols[i][i];
            y[i] = if piv.abs() <= F::of(1e-300) || !piv.is_finite() {
                F::zero()
            } else {
                acc / piv
            };
        }
        // x += M^{-1} (V y)
        let mut vy = vec![F::zero(); n];
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                vy[i] += *yj * basis[j][i];
            }
        }
        precond.apply(&vy, &mut tmp);
        let mut candidate = x.clone();
        for i in 0..n {
            candidate[i] += tmp[i];
        }
        if candidate.iter().all(|v| v.is_finite()) {
            x = candidate;
        } else {
            return Err(LinsolveError::NotConverged {
                best: best_x,
                residual: best_res,
                iterations: total_iters,
            });
        }
    }
    a.matvec_into(&x, &mut tmp);
    let final_res = norm2(&(0..n).map(|i| b[i] - tmp[i]).collect::<Vec<_>>());
    if final_res <= target {
        return Ok(KrylovSolution {
            x,
            residual: final_res,
            iterations: total_iters,
        });
    }
    if final_res < best_res {
        best_res = final_res;
        best_x = x;
    }
    Err(LinsolveError::NotConverged {
        best: best_x,
        residual: best_res,
        iterations: total_iters,
    })
}

// ---------------------------------------------------------------------------
// Dense oracle
// ---------------------------------------------------------------------------

/// Row-major dense matrix used by the direct oracle and the finite-difference
/// Jacobians in tests.
#[derive(Debug, Clone)]
pub struct DenseMatrix<F: Scalar> {
    n_rows: usize,
    n_cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> DenseMatrix<F> {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            data: vec![F::zero(); n_rows * n_cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<F>>) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            assert_eq!(r.len(), n_cols);
            data.extend(r);
        }
        Self {
            n_rows,
            n_cols,
            data,
        }
    }

    pub fn from_sparse(a: &SparseOperator<F>) -> Self {
        Self::from_rows(a.to_dense())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.n_cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.n_cols + c] = v;
    }

    pub fn matvec(&self, x: &[F]) -> Vec<F> {
        assert_eq!(x.len(), self.n_cols);
        (0..self.n_rows)
            .map(|r| {
                let row = &self.data[r * self.n_cols..(r + 1) * self.n_cols];
                dot(row, x)
            })
            .collect()
    }
}

/// Direct LU solve with partial pivoting. The oracle side of every
/// sparse-vs-dense cross-check; sizes are capped to keep it a desk tool.
pub fn solve_dense_oracle<F: Scalar>(
    a: &DenseMatrix<F>,
    b: &[F],
) -> Result<Vec<F>, LinsolveError<F>> {
    let n = a.n_rows();
    if a.n_cols() != n || b.len() != n {
        return Err(LinsolveError::DimensionMismatch {
            rows: a.n_rows(),
            cols: a.n_cols(),
            len: b.len(),
        });
    }
    if n > 4000 {
        return Err(LinsolveError::MethodMisuse(format!(
            "dense oracle capped at 4000 unknowns, got {n}"
        )));
    }
    let mut lu = a.data.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = lu.iter().fold(F::zero(), |m, v| m.max(v.abs()));
    let mut max_pivot = F::zero();
    let mut min_pivot = F::infinity();
    for k in 0..n {
        // partial pivoting
        let mut best = k;
        let mut best_val = lu[perm[k] * n + k].abs();
        for r in k + 1..n {
            let v = lu[perm[r] * n + k].abs();
            if v > best_val {
                best = r;
                best_val = v;
            }
        }
        perm.swap(k, best);
        let pivot = lu[perm[k] * n + k];
        max_pivot = max_pivot.max(pivot.abs());
        min_pivot = min_pivot.min(pivot.abs());
        if pivot.abs() <= F::of(1e-14) * scale.max(F::one()) {
            let cond = if min_pivot > F::zero() {
                max_pivot / min_pivot
            } else {
                F::infinity()
            };
            return Err(LinsolveError::SingularMatrix {
                condition_estimate: cond,
            });
        }
        for r in k + 1..n {
            let f = lu[perm[r] * n + k] / pivot;
            lu[perm[r] * n + k] = f;
            if f != F::zero() {
                for c in k + 1..n {
                    let upd = lu[perm[k] * n + c];
                    lu[perm[r] * n + c] -= f * upd;
                }
            }
        }
    }
    // forward/backward substitution
    let mut y = vec![F::zero(); n];
    for r in 0..n {
        let mut acc = b[perm[r]];
        for c in 0..r {
            acc -= lu[perm[r] * n + c] * y[c];
        }
        y[r] = acc;
    }
    let mut x = vec![F::zero(); n];
    for r in (0..n).rev() {
        let mut acc = y[r];
        for c in r + 1..n {
            acc -= lu[perm[r] * n + c] * x[c];
        }
        x[r] = acc / lu[perm[r] * n + r];
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Newton driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct NewtonConfig<F: Scalar> {
    /// Converged when `‖r‖ ≤ res_tol · (1 + ‖r(x0)‖)`.
    pub res_tol: F,
    pub max_newton: usize,
    /// Backtracking line search: factor and maximal number of halvings.
    pub backtrack_factor: F,
    pub max_backtracks: usize,
    /// Barrier distance for the phase-field entries.
    pub eps_barrier: F,
}

impl<F: Scalar> Default for NewtonConfig<F> {
    fn default() -> Self {
        Self {
            res_tol: F::of(1e-10),
            max_newton: 50,
            backtrack_factor: F::half(),
            max_backtracks: 40,
            eps_barrier: F::of(1e-9),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct NewtonDiagnostics<F: Scalar> {
    pub newton_iters: usize,
    pub linear_iters: usize,
    pub initial_residual: F,
    pub final_residual: F,
}

#[derive(Debug, Error)]
pub enum NewtonError<F: Scalar> {
    #[error("initial iterate violates the phase-field barrier")]
    InitialBarrierViolation,
    #[error("line search starved at the phase-field barrier after {halvings} halvings (residual {residual})")]
    BarrierStarvation { halvings: usize, residual: F },
    #[error("line search failed to reduce the residual (residual {residual})")]
    LineSearchFailure { residual: F },
    #[error("no convergence in {iterations} Newton iterations, best residual {residual}")]
    MaxIterations {
        best: Vec<F>,
        residual: F,
        iterations: usize,
    },
    #[error("linear solver: {0}")]
    Linear(LinsolveError<F>),
    #[error("residual evaluation: {0}")]
    Residual(String),
}

/// Linear-solver strategy of the Newton driver.
#[allow(clippy::large_enum_variant)]
pub enum NewtonLinear<F: Scalar> {
    /// A fresh Krylov solve per iteration.
    Krylov(KrylovConfig<F>),
    /// Direct bordered banded LU; the factorization is reused across
    /// iterations (and across steps when the strategy object is kept) and
    /// refreshed when the line search reports poor progress.
    Direct {
        n_border: usize,
        cache: Option<BorderedBandSolver<F>>,
    },
}

impl<F: Scalar> NewtonLinear<F> {
    pub fn direct(n_border: usize) -> Self {
        Self::Direct {
            n_border,
            cache: None,
        }
    }

    pub fn krylov(cfg: KrylovConfig<F>) -> Self {
        Self::Krylov(cfg)
    }

    /// Drops any cached factorization.
    pub fn invalidate(&mut self) {
        if let Self::Direct { cache, .. } = self {
            *cache = None;
        }
    }
}

/// Monolithic Newton with backtracking line search and a hard barrier on the
/// phase-field entries (`phi_range` of the unknown vector): any trial point
/// with a φ entry outside `[-1+eps, 1-eps]` is rejected before the residual
/// is evaluated, so the singular potential is never probed beyond the
/// barrier.
pub fn newton_solve<F, R, J>(
    residual: R,
    jacobian: J,
    x0: Vec<F>,
    phi_range: Range<usize>,
    ncfg: &NewtonConfig<F>,
    kcfg: &KrylovConfig<F>,
) -> Result<(Vec<F>, NewtonDiagnostics<F>), NewtonError<F>>
where
    F: Scalar,
    R: FnMut(&[F]) -> Result<Vec<F>, String>,
    J: FnMut(&[F]) -> Result<SparseOperator<F>, String>,
{
    let mut linear = NewtonLinear::krylov(*kcfg);
    newton_solve_with(residual, jacobian, x0, phi_range, ncfg, &mut linear)
}

/// [`newton_solve`] with an explicit (and possibly persistent) linear
/// strategy; the steppers use [`NewtonLinear::Direct`] here.
pub fn newton_solve_with<F, R, J>(
    mut residual: R,
    mut jacobian: J,
    x0: Vec<F>,
    phi_range: Range<usize>,
    ncfg: &NewtonConfig<F>,
    linear: &mut NewtonLinear<F>,
) -> Result<(Vec<F>, NewtonDiagnostics<F>), NewtonError<F>>
where
    F: Scalar,
    R: FnMut(&[F]) -> Result<Vec<F>, String>,
    J: FnMut(&[F]) -> Result<SparseOperator<F>, String>,
{
    let barrier_ok = |x: &[F]| {
        x[phi_range.clone()]
            .iter()
            .all(|&s| s.abs() <= F::one() - ncfg.eps_barrier)
    };
    if !barrier_ok(&x0) {
        return Err(NewtonError::InitialBarrierViolation);
    }

    let mut x = x0;
    let mut r = residual(&x).map_err(NewtonError::Residual)?;
    let r0_norm = norm2(&r);
    // aim well below the contractual tolerance; a rough first guess must not
    // loosen the goal
    let target = ncfg.res_tol * (F::one() + r0_norm.min(F::one()));
    // the documented convergence criterion; reaching it counts as success
    // even when rounding stops further line-search progress
    let contract = ncfg.res_tol * (F::one() + r0_norm);
    let mut diag = NewtonDiagnostics {
        newton_iters: 0,
        linear_iters: 0,
        initial_residual: r0_norm,
        final_residual: r0_norm,
    };

    let mut compute_direction = |linear: &mut NewtonLinear<F>,
                                 x: &[F],
                                 neg_r: &[F],
                                 refresh: bool,
                                 diag: &mut NewtonDiagnostics<F>|
     -> Result<Vec<F>, NewtonError<F>> {
        match linear {
            NewtonLinear::Krylov(cfg) => {
                let jac = jacobian(x).map_err(NewtonError::Residual)?;
                match solve_sparse(&jac, neg_r, cfg) {
                    Ok(sol) => {
                        diag.linear_iters += sol.iterations;
                        Ok(sol.x)
                    }
                    // inexact directions are still useful; the line search guards them
                    Err(LinsolveError::NotConverged {
                        best, iterations, ..
                    }) => {
                        diag.linear_iters += iterations;
                        Ok(best)
                    }
                    Err(e) => Err(NewtonError::Linear(e)),
                }
            }
            NewtonLinear::Direct { n_border, cache } => {
                if refresh || cache.is_none() {
                    let jac = jacobian(x).map_err(NewtonError::Residual)?;
                    let solver =
                        BorderedBandSolver::new(&jac, *n_border).map_err(NewtonError::Residual)?;
                    *cache = Some(solver);
                }
                diag.linear_iters += 1;
                Ok(cache.as_ref().expect("factorization cached").solve(neg_r))
            }
        }
    };

    let mut res_norm = r0_norm;
    for _ in 0..ncfg.max_newton {
        if res_norm <= target {
            diag.final_residual = res_norm;
            return Ok((x, diag));
        }
        diag.newton_iters += 1;
        let neg_r: Vec<F> = r.iter().map(|&v| -v).collect();
        let mut refreshed = false;
        let mut delta = compute_direction(linear, &x, &neg_r, false, &mut diag)?;
        // unusable Newton direction (singular Jacobian point): fall back to
        // the residual direction and let the line search arbitrate
        if !delta.iter().all(|v| v.is_finite()) || delta.iter().all(|&v| v == F::zero()) {
            delta = neg_r.clone();
        }

        // backtracking with barrier rejection; a stale direct factorization
        // gets one refresh before the line search may fail
        'line_search: loop {
            let mut step = F::one();
            let mut halvings = 0usize;
            loop {
                let trial: Vec<F> = x
                    .iter()
                    .zip(&delta)
                    .map(|(&xi, &di)| xi + step * di)
                    .collect();
                if !barrier_ok(&trial) {
                    halvings += 1;
                    if halvings > ncfg.max_backtracks {
                        return Err(NewtonError::BarrierStarvation {
                            halvings,
                            residual: res_norm,
                        });
                    }
                    step *= ncfg.backtrack_factor;
                    continue;
                }
                let trial_r = residual(&trial).map_err(NewtonError::Residual)?;
                let trial_norm = norm2(&trial_r);
                let sufficient = trial_norm <= (F::one() - F::of(1e-4) * step) * res_norm
                    || trial_norm <= target;
                if sufficient {
                    // mediocre contraction with a reused factorization:
                    // refresh before the next direction
                    if trial_norm > F::of(0.2) * res_norm && !refreshed {
                        linear.invalidate();
                    }
                    x = trial;
                    r = trial_r;
                    res_norm = trial_norm;
                    break 'line_search;
                }
                halvings += 1;
                if halvings > ncfg.max_backtracks {
                    if !refreshed && matches!(linear, NewtonLinear::Direct { cache: Some(_), .. }) {
                        // retry once with a fresh factorization at the current point
                        refreshed = true;
                        delta = compute_direction(linear, &x, &neg_r, true, &mut diag)?;
                        if !delta.iter().all(|v| v.is_finite())
                            || delta.iter().all(|&v| v == F::zero())
                        {
                            delta = neg_r.clone();
                        }
                        continue 'line_search;
                    }
                    if res_norm <= contract {
                        // rounding floor reached inside the documented tolerance
                        diag.final_residual = res_norm;
                        return Ok((x, diag));
                    }
                    return Err(NewtonError::LineSearchFailure { residual: res_norm });
                }
                step *= ncfg.backtrack_factor;
            }
        }
    }
    if res_norm <= contract {
        diag.final_residual = res_norm;
        return Ok((x, diag));
    }
    Err(NewtonError::MaxIterations {
        best: x,
        residual: res_norm,
        iterations: diag.newton_iters,
    })
}

/// Finite-difference Jacobian of a residual, used by the dense oracle path.
pub fn fd_jacobian<F: Scalar>(
    mut residual: impl FnMut(&[F]) -> Result<Vec<F>, String>,
    x: &[F],
    delta: F,
) -> Result<DenseMatrix<F>, String> {
    let n = x.len();
    let r0 = residual(x)?;
    let m = r0.len();
    let mut jac = DenseMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    for c in 0..n {
        xp[c] = x[c] + delta;
        xm[c] = x[c] - delta;
        let rp = residual(&xp)?;
        let rm = residual(&xm)?;
        for r in 0..m {
            jac.set(r, c, (rp[r] - rm[r]) / (F::two() * delta));
        }
        xp[c] = x[c];
        xm[c] = x[c];
    }
    Ok(jac)
}

/// Brute-force Newton on the same residual: finite-difference Jacobian plus
/// the dense direct solve, with the identical barrier policy. This is the
/// independent oracle the production path is checked against.
pub fn newton_dense_oracle<F: Scalar>(
    mut residual: impl FnMut(&[F]) -> Result<Vec<F>, String>,
    x0: Vec<F>,
    phi_range: Range<usize>,
    ncfg: &NewtonConfig<F>,
    fd_delta: F,
) -> Result<Vec<F>, NewtonError<F>> {
    let barrier_ok = |x: &[F]| {
        x[phi_range.clone()]
            .iter()
            .all(|&s| s.abs() <= F::one() - ncfg.eps_barrier)
    };
    if !barrier_ok(&x0) {
        return Err(NewtonError::InitialBarrierViolation);
    }
    let mut x = x0;
    let mut r = residual(&x).map_err(NewtonError::Residual)?;
    let r0 = norm2(&r);
    let target = ncfg.res_tol * (F::one() + r0.min(F::one()));
    let contract = ncfg.res_tol * (F::one() + r0);
    let mut res_norm = r0;
    for it in 0..ncfg.max_newton {
        if res_norm <= target {
            return Ok(x);
        }
        let jac = fd_jacobian(&mut residual, &x, fd_delta).map_err(NewtonError::Residual)?;
        let neg_r: Vec<F> = r.iter().map(|&v| -v).collect();
        let delta = match solve_dense_oracle(&jac, &neg_r) {
            Ok(d) => d,
            // same fallback as the production driver at singular points
            Err(LinsolveError::SingularMatrix { .. }) => neg_r.clone(),
            Err(e) => return Err(NewtonError::Linear(e)),
        };
        let mut step = F::one();
        let mut halvings = 0usize;
        loop {
            let trial: Vec<F> = x
                .iter()
                .zip(&delta)
                .map(|(&xi, &di)| xi + step * di)
                .collect();
            if !barrier_ok(&trial) {
                halvings += 1;
                if halvings > ncfg.max_backtracks {
                    return Err(NewtonError::BarrierStarvation {
                        halvings,
                        residual: res_norm,
                    });
                }
                step *= ncfg.backtrack_factor;
                continue;
            }
            let trial_r = residual(&trial).map_err(NewtonError::Residual)?;
            let trial_norm = norm2(&trial_r);
            if trial_norm <= (F::one() - F::of(1e-4) * step) * res_norm || trial_norm <= target {
                x = trial;
                r = trial_r;
                res_norm = trial_norm;
                break;
            }
            halvings += 1;
            if halvings > ncfg.max_backtracks {
                if res_norm <= contract {
                    return Ok(x);
                }
                return Err(NewtonError::LineSearchFailure { residual: res_norm });
            }
            step *= ncfg.backtrack_factor;
        }
        let _ = it;
    }
    if res_norm <= contract {
        return Ok(x);
    }
    Err(NewtonError::MaxIterations {
        best: x,
        residual: res_norm,
        iterations: ncfg.max_newton,
    })
}

/// Clamps the phase-field block of an unknown vector into the barrier box.
/// Used to construct admissible initial guesses, never on accepted iterates.
pub fn clamp_phi_block<F: Scalar>(x: &mut [F], phi_range: Range<usize>, eps: F) {
    for v in &mut x[phi_range] {
        *v = clamp_barrier(*v, eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{assemble_laplace, Grid};
    use crate::potential::{f0, f0_prime, kappa_min, PotentialParams};
    use crate::sparse::TripletBuilder;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn shifted_laplacian(n_side: usize) -> SparseOperator<f64> {
        let g = Grid::new(n_side, n_side, 1.0, 1.0).unwrap();
        let lap = assemble_laplace(&g);
        let n = g.n_cells();
        let mut b = TripletBuilder::new(n, n);
        for r in 0..n {
            let (cols, vals) = lap.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                b.push(r, c, -v);
            }
            b.push(r, r, 1.0);
        }
        b.build().into_symmetric()
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let a = SparseOperator::<f64>::identity(10);
        let b: Vec<f64> = (0..10).map(|i| i as f64 - 4.5).collect();
        for method in [
            KrylovMethod::Cg,
            KrylovMethod::BiCgStab,
            KrylovMethod::Gmres(5),
        ] {
            let cfg = KrylovConfig {
                method,
                ..KrylovConfig::default()
            };
            let sol = solve_sparse(&a, &b, &cfg).unwrap();
            for (xi, bi) in sol.x.iter().zip(&b) {
                assert_relative_eq!(xi, bi, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn shifted_laplacian_converges_quickly() {
        let mut rng = StdRng::seed_from_u64(42);
        let a = shifted_laplacian(16);
        let b: Vec<f64> = (0..a.rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for method in [
            KrylovMethod::Cg,
            KrylovMethod::BiCgStab,
            KrylovMethod::Gmres(50),
        ] {
            let cfg = KrylovConfig {
                method,
                rel_tol: 1e-12,
                abs_tol: 1e-14,
                ..KrylovConfig::default()
            };
            let sol = solve_sparse(&a, &b, &cfg).unwrap();
            let r = a.matvec(&sol.x).unwrap();
            let res: f64 = norm2(&b.iter().zip(&r).map(|(x, y)| x - y).collect::<Vec<_>>());
            assert!(res <= 1e-10, "{method:?}: residual {res}");
            assert!(
                sol.iterations < 400,
                "{method:?}: {} iterations",
                sol.iterations
            );
        }
    }

    #[test]
    fn singular_system_is_flagged() {
        // pure Neumann Laplacian with an incompatible rhs
        let g = Grid::new(8, 8, 1.0, 1.0).unwrap();
        let mut lap = assemble_laplace(&g);
        lap.scale(-1.0);
        let b = vec![1.0; lap.rows()]; // nonzero mean: inconsistent
        let cfg = KrylovConfig {
            method: KrylovMethod::Gmres(30),
            max_iter: 500,
            ..KrylovConfig::default()
        };
        match solve_sparse(&lap, &b, &cfg) {
            Err(LinsolveError::NotConverged { residual, .. }) => {
                assert!(
                    residual > 1e-8,
                    "inconsistent system cannot be solved, residual {residual}"
                );
            }
            Err(_) => {}
            Ok(sol) => panic!("silent wrong answer with residual {}", sol.residual),
        }
    }

    #[test]
    fn cg_reports_indefinite_misuse() {
        let mut b = TripletBuilder::new(2, 2);
        b.push(0, 0, 1.0);
        b.push(1, 1, -1.0);
        let a = b.build();
        let cfg = KrylovConfig {
            method: KrylovMethod::Cg,
            precond: Precond::None,
            ..KrylovConfig::default()
        };
        match solve_sparse(&a, &[1.0, 1.0], &cfg) {
            Err(LinsolveError::MethodMisuse(_)) => {}
            other => panic!("expected misuse report, got {other:?}"),
        }
    }

    #[test]
    fn dense_oracle_small_systems() {
        let a = DenseMatrix::from_rows(vec![vec![2.0, 0.0], vec![0.0, 3.0]]);
        let x = solve_dense_oracle(&a, &[2.0, 3.0]).unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn dense_oracle_random_100() {
        let mut rng = StdRng::seed_from_u64(1);
        let n = 100;
        let mut rows = vec![vec![0.0; n]; n];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = rng.gen_range(-1.0..1.0);
                if r == c {
                    *v += 10.0; // keep it comfortably well-conditioned
                }
            }
        }
        let a = DenseMatrix::from_rows(rows);
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = solve_dense_oracle(&a, &b).unwrap();
        let r = a.matvec(&x);
        let res = norm2(&b.iter().zip(&r).map(|(u, v)| u - v).collect::<Vec<_>>());
        assert!(res <= 1e-11 * norm2(&b), "residual {res}");
    }

    #[test]
    fn dense_oracle_reports_singularity() {
        let a = DenseMatrix::from_rows(vec![vec![1.0, 2.0], vec![2.0, 4.0]]);
        match solve_dense_oracle(&a, &[1.0, 2.0]) {
            Err(LinsolveError::SingularMatrix { .. }) => {}
            other => panic!("expected singularity report, got {other:?}"),
        }
    }

    #[test]
    fn sparse_and_dense_agree() {
        let mut rng = StdRng::seed_from_u64(9);
        let a = shifted_laplacian(16); // 256 unknowns
        let b: Vec<f64> = (0..a.rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = KrylovConfig {
            rel_tol: 1e-13,
            ..KrylovConfig::default()
        };
        let sparse = solve_sparse(&a, &b, &cfg).unwrap().x;
        let dense = solve_dense_oracle(&DenseMatrix::from_sparse(&a), &b).unwrap();
        let diff = norm2(
            &sparse
                .iter()
                .zip(&dense)
                .map(|(u, v)| u - v)
                .collect::<Vec<_>>(),
        );
        assert!(diff <= 1e-8 * norm2(&dense), "difference {diff}");
    }

    #[test]
    fn sparse_and_dense_agree_on_viscous_system() {
        // a second oracle-equivalence instance: SPD viscous form plus shift
        use crate::grid::{assemble_viscous_form, restrict_to_interior_faces, BoundaryKind, Field};
        let g: Grid<f64> = Grid::new(16, 16, 1.0, 1.0).unwrap();
        let ones = Field::constant(&g, 1.0);
        let full = assemble_viscous_form(&ones, &ones, BoundaryKind::NoSlip).unwrap();
        let a = restrict_to_interior_faces(&full, &g);
        let mut rng = StdRng::seed_from_u64(77);
        let b: Vec<f64> = (0..a.rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = KrylovConfig {
            method: KrylovMethod::Cg,
            rel_tol: 1e-13,
            ..KrylovConfig::default()
        };
        let sparse = solve_sparse(&a, &b, &cfg).unwrap().x;
        let dense = solve_dense_oracle(&DenseMatrix::from_sparse(&a), &b).unwrap();
        let diff = norm2(
            &sparse
                .iter()
                .zip(&dense)
                .map(|(u, v)| u - v)
                .collect::<Vec<_>>(),
        );
        assert!(diff <= 1e-8 * norm2(&dense), "difference {diff}");
    }

    #[test]
    fn newton_converges_in_one_step_on_linear_problems() {
        let a = shifted_laplacian(4);
        let n = a.rows();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let a2 = a.clone();
        let residual = move |x: &[f64]| -> Result<Vec<f64>, String> {
            let ax = a.matvec(x).unwrap();
            Ok(ax.iter().zip(&b).map(|(u, v)| u - v).collect())
        };
        let jacobian = move |_: &[f64]| -> Result<SparseOperator<f64>, String> { Ok(a2.clone()) };
        let ncfg = NewtonConfig::default();
        // exact (direct) linear solves: Newton is exact on linear maps
        let mut linear = NewtonLinear::direct(0);
        let (x, diag) =
            newton_solve_with(residual, jacobian, vec![0.0; n], 0..0, &ncfg, &mut linear).unwrap();
        assert_eq!(diag.newton_iters, 1);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn newton_scalar_logarithmic_root_matches_bisection() {
        // solve F0'(s) = 2 for theta=1, theta_c=2, kappa=1
        let p = PotentialParams::with_default_barrier(1.0, 2.0).unwrap();
        let k = kappa_min(&p);
        let f = |s: f64| f0_prime(s, &p, &k).unwrap() - 2.0;
        // independent bisection oracle on the monotone function
        let (mut lo, mut hi) = (0.0, 1.0 - 1e-9);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let root = 0.5 * (lo + hi);

        let residual = |x: &[f64]| -> Result<Vec<f64>, String> { Ok(vec![f(x[0])]) };
        let jacobian = |x: &[f64]| -> Result<SparseOperator<f64>, String> {
            let mut b = TripletBuilder::new(1, 1);
            b.push(
                0,
                0,
                crate::potential::f0_second(x[0], &p, &k).map_err(|e| e.to_string())?,
            );
            Ok(b.build())
        };
        let ncfg = NewtonConfig {
            res_tol: 1e-14,
            ..NewtonConfig::default()
        };
        let (x, _) = newton_solve(
            residual,
            jacobian,
            vec![0.0],
            0..1,
            &ncfg,
            &KrylovConfig::default(),
        )
        .unwrap();
        assert!(
            (x[0] - root).abs() <= 1e-12,
            "newton {} vs bisection {root}",
            x[0]
        );
        // same root through the dense oracle path
        let residual2 = |x: &[f64]| -> Result<Vec<f64>, String> { Ok(vec![f(x[0])]) };
        let y = newton_dense_oracle(residual2, vec![0.0], 0..1, &ncfg, 1e-7).unwrap();
        assert!((y[0] - root).abs() <= 1e-10);
    }

    #[test]
    fn line_search_halts_at_barrier_without_nan() {
        // phi entry starts a hair inside the barrier; the descent direction
        // pushes it out, so every full step must be rejected cleanly
        let p = PotentialParams::with_default_barrier(1.0, 2.0).unwrap();
        let k = kappa_min(&p);
        let residual = move |x: &[f64]| -> Result<Vec<f64>, String> {
            // root would lie beyond s = 1: forces outward steps
            Ok(vec![f0(x[0], &p, &k).map_err(|e| e.to_string())? - 100.0])
        };
        let jacobian = move |x: &[f64]| -> Result<SparseOperator<f64>, String> {
            let mut b = TripletBuilder::new(1, 1);
            b.push(0, 0, f0_prime(x[0], &p, &k).map_err(|e| e.to_string())?);
            Ok(b.build())
        };
        let ncfg = NewtonConfig::default();
        let out = newton_solve(
            residual,
            jacobian,
            vec![1.0 - 1e-12 - 1e-9],
            0..1,
            &ncfg,
            &KrylovConfig::default(),
        );
        match out {
            Err(NewtonError::BarrierStarvation { .. })
            | Err(NewtonError::LineSearchFailure { .. })
            | Err(NewtonError::MaxIterations { .. }) => {}
            Err(NewtonError::InitialBarrierViolation) => panic!("start point was admissible"),
            other => panic!("expected a clean failure, got {other:?}"),
        }
    }

    #[test]
    fn initial_barrier_violation_detected() {
        let residual = |_: &[f64]| -> Result<Vec<f64>, String> { Ok(vec![0.0]) };
        let jacobian =
            |_: &[f64]| -> Result<SparseOperator<f64>, String> { Ok(SparseOperator::identity(1)) };
        let ncfg = NewtonConfig::<f64>::default();
        match newton_solve(
            residual,
            jacobian,
            vec![1.0],
            0..1,
            &ncfg,
            &KrylovConfig::default(),
        ) {
            Err(NewtonError::InitialBarrierViolation) => {}
            other => panic!("{other:?}"),
        }
    }
}
