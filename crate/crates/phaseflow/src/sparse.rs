//! Compressed sparse row matrices and the triplet builder used by all
//! operator assembly in this crate.

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("dimension mismatch: matrix is {rows}x{cols}, operand has length {len}")]
    DimensionMismatch {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("triplet ({row}, {col}) outside {rows}x{cols} matrix")]
    TripletOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
}

/// Accumulates (row, col, value) triplets; duplicates are summed on build.
#[derive(Debug, Clone)]
pub struct TripletBuilder<F: Scalar> {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, F)>,
}

impl<F: Scalar> TripletBuilder<F> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(rows: usize, cols: usize, cap: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::with_capacity(cap),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: F) {
        debug_assert!(
            row < self.rows && col < self.cols,
            "triplet ({row},{col}) out of range"
        );
        if value != F::zero() {
            self.entries.push((row, col, value));
        }
    }

    pub fn build(mut self) -> SparseOperator<F> {
        self.entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_counts = vec![0usize; self.rows + 1];
        let mut col_idx: Vec<usize> = Vec::with_capacity(self.entries.len());
        let mut values: Vec<F> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &self.entries {
            if last == Some((r, c)) {
                let v_last = values.last_mut().expect("entry exists when last is set");
                *v_last += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_counts[r + 1] += 1;
                last = Some((r, c));
            }
        }
        let mut row_ptr = row_counts;
        for i in 1..row_ptr.len() {
            row_ptr[i] += row_ptr[i - 1];
        }
        SparseOperator {
            rows: self.rows,
            cols: self.cols,
            row_ptr,
            col_idx,
            values,
            symmetric: false,
        }
    }
}

/// Sparse matrix in CSR form.
///
/// `symmetric` is an assembly-time promise checked by [`SparseOperator::verify_symmetry`];
/// solvers use it to select methods (CG requires it).
#[derive(Debug, Clone)]
pub struct SparseOperator<F: Scalar> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<F>,
    symmetric: bool,
}

impl<F: Scalar> SparseOperator<F> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn identity(n: usize) -> Self {
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.push(i, i, F::one());
        }
        b.build().into_symmetric()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Marks the operator as symmetric. Debug builds verify the claim.
    pub fn into_symmetric(mut self) -> Self {
        debug_assert!(
            self.verify_symmetry(F::of(1e-12)),
            "matrix marked symmetric is not"
        );
        self.symmetric = true;
        self
    }

    /// Checks `A == A^T` entrywise within `tol` (relative to the largest entry).
    pub fn verify_symmetry(&self, tol: F) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let t = self.transpose();
        let scale = self.values.iter().fold(F::one(), |a, &b| a.max(b.abs()));
        for r in 0..self.rows {
            let (sa, sb) = (self.row(r), t.row(r));
            let mut ia = 0;
            let mut ib = 0;
            while ia < sa.0.len() || ib < sb.0.len() {
                let ca = sa.0.get(ia).copied().unwrap_or(usize::MAX);
                let cb = sb.0.get(ib).copied().unwrap_or(usize::MAX);
                let (va, vb) = if ca == cb {
                    let p = (sa.1[ia], sb.1[ib]);
                    ia += 1;
                    ib += 1;
                    p
                } else if ca < cb {
                    ia += 1;
                    (sa.1[ia - 1], F::zero())
                } else {
                    ib += 1;
                    (F::zero(), sb.1[ib - 1])
                };
                if (va - vb).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[F]) {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn matvec(&self, x: &[F]) -> Result<Vec<F>, SparseError> {
        if x.len() != self.cols {
            return Err(SparseError::DimensionMismatch {
                rows: self.rows,
                cols: self.cols,
                len: x.len(),
            });
        }
        let mut y = vec![F::zero(); self.rows];
        self.matvec_into(x, &mut y);
        Ok(y)
    }

    pub fn matvec_into(&self, x: &[F], y: &mut [F]) {
        for r in 0..self.rows {
            let mut acc = F::zero();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
    }

    /// `x^T A x` for square `A`.
    pub fn quadratic_form(&self, x: &[F]) -> F {
        let mut acc = F::zero();
        for r in 0..self.rows {
            let mut row_acc = F::zero();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                row_acc += self.values[k] * x[self.col_idx[k]];
            }
            acc += x[r] * row_acc;
        }
        acc
    }

    pub fn transpose(&self) -> Self {
        let mut b = TripletBuilder::with_capacity(self.cols, self.rows, self.nnz());
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                b.push(self.col_idx[k], r, self.values[k]);
            }
        }
        b.build()
    }

    pub fn to_dense(&self) -> Vec<Vec<F>> {
        let mut d = vec![vec![F::zero(); self.cols]; self.rows];
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                d[r][self.col_idx[k]] += self.values[k];
            }
        }
        d
    }

    /// Largest absolute difference to another operator of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> F {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let a = self.to_dense();
        let b = other.to_dense();
        let mut m = F::zero();
        for r in 0..self.rows {
            for c in 0..self.cols {
                m = m.max((a[r][c] - b[r][c]).abs());
            }
        }
        m
    }

    pub fn scale(&mut self, s: F) {
        for v in &mut self.values {
            *v *= s;
        }
    }
}

/// Reverse Cuthill-McKee ordering on the symmetrized pattern of `A`.
/// Returns `perm` with `perm[new] = old`. Low-bandwidth orderings make
/// level-0 incomplete factorizations substantially stronger on PDE Jacobians.
pub fn reverse_cuthill_mckee<F: Scalar>(a: &SparseOperator<F>) -> Vec<usize> {
    let n = a.rows();
    // symmetrized adjacency
    let t = a.transpose();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for r in 0..n {
        for &c in a.row(r).0.iter().chain(t.row(r).0) {
            if c != r {
                adj[r].push(c);
            }
        }
    }
    for l in &mut adj {
        l.sort_unstable();
        l.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(|l| l.len()).collect();

    // densely coupled vertices (Lagrange-multiplier rows) would flatten the
    // BFS level structure; pin them to the end of the elimination order
    let avg = degree.iter().sum::<usize>().max(1) / n.max(1);
    let dense_threshold = (8 * avg.max(1)).max(32);

    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    for v in 0..n {
        if degree[v] > dense_threshold {
            visited[v] = true;
            order.push(v); // reversed below: lands at the end
        }
    }
    let mut queue = std::collections::VecDeque::new();
    // seed each component from a minimum-degree vertex
    let mut seeds: Vec<usize> = (0..n).collect();
    seeds.sort_unstable_by_key(|&v| degree[v]);
    for &seed in &seeds {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        queue.push_back(seed);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adj[v]
                .iter()
                .copied()
                .filter(|&u| !visited[u] && degree[u] <= dense_threshold)
                .collect();
            nbrs.sort_unstable_by_key(|&u| degree[u]);
            for u in nbrs {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

fn permute<F: Scalar>(a: &SparseOperator<F>, perm: &[usize]) -> SparseOperator<F> {
    let n = a.rows();
    let mut iperm = vec![0usize; n];
    for (new, &old) in perm.iter().enumerate() {
        iperm[old] = new;
    }
    let mut b = TripletBuilder::with_capacity(n, n, a.nnz());
    for (new_r, &old_r) in perm.iter().enumerate() {
        let (cols, vals) = a.row(old_r);
        for (&c, &v) in cols.iter().zip(vals) {
            b.push(new_r, iperm[c], v);
        }
    }
    b.build()
}

/// ILU(0) factorization: incomplete LU on the sparsity pattern of `A`.
///
/// Zero or tiny pivots are replaced by a safe value so the factorization can
/// always be used as a preconditioner, even for saddle-point systems.
pub struct Ilu0<F: Scalar> {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<F>,
    diag_pos: Vec<usize>,
    /// `perm[new] = old`; identity for the unpermuted factorization.
    perm: Option<Vec<usize>>,
    /// Row equilibration applied before factorizing, `None` when unscaled.
    row_scale: Option<Vec<F>>,
}

impl<F: Scalar> Ilu0<F> {
    /// Factorization after row-max equilibration and a reverse
    /// Cuthill-McKee reordering; both are applied transparently in
    /// [`Ilu0::apply`]. Equilibration keeps the incomplete pivots O(1) even
    /// for saddle blocks with tiny diagonal terms.
    pub fn factorize_rcm(a: &SparseOperator<F>) -> Self {
        let n = a.rows();
        let mut scale = vec![F::one(); n];
        for r in 0..n {
            let m = a.row(r).1.iter().fold(F::zero(), |acc, v| acc.max(v.abs()));
            if m > F::of(1e-300) {
                scale[r] = F::one() / m;
            }
        }
        let mut b = TripletBuilder::with_capacity(n, n, a.nnz());
        for r in 0..n {
            let (cols, vals) = a.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                b.push(r, c, v * scale[r]);
            }
        }
        let scaled = b.build();
        let perm = reverse_cuthill_mckee(&scaled);
        let pa = permute(&scaled, &perm);
        let mut f = Self::factorize(&pa);
        f.perm = Some(perm);
        f.row_scale = Some(scale);
        f
    }

    pub fn factorize(a: &SparseOperator<F>) -> Self {
        assert_eq!(a.rows, a.cols, "ILU(0) needs a square matrix");
        let n = a.rows;
        let row_ptr = a.row_ptr.clone();
        let col_idx = a.col_idx.clone();
        let mut values = a.values.clone();

        // position of the diagonal in each row; insert conceptually if missing
        let mut diag_pos = vec![usize::MAX; n];
        for r in 0..n {
            for k in row_ptr[r]..row_ptr[r + 1] {
                if col_idx[k] == r {
                    diag_pos[r] = k;
                }
            }
        }

        let scale = values.iter().fold(F::one(), |m, &v| m.max(v.abs()));
        let pivot_floor = F::of(1e-12) * scale;

        // IKJ variant of Gaussian elimination restricted to the pattern
        let mut col_lookup = vec![usize::MAX; n];
        for i in 0..n {
            for k in row_ptr[i]..row_ptr[i + 1] {
                col_lookup[col_idx[k]] = k;
            }
            for kk in row_ptr[i]..row_ptr[i + 1] {
                let k = col_idx[kk];
                if k >= i {
                    break;
                }
                let dk = diag_pos[k];
                if dk == usize::MAX {
                    continue;
                }
                let pivot = values[dk];
                let factor = values[kk] / pivot;
                values[kk] = factor;
                for jj in dk + 1..row_ptr[k + 1] {
                    let j = col_idx[jj];
                    let pos = col_lookup[j];
                    if pos != usize::MAX {
                        values[pos] = values[pos] - factor * values[jj];
                    }
                }
            }
            if let Some(&d) = diag_pos.get(i) {
                if d != usize::MAX && values[d].abs() < pivot_floor {
                    // pivot repair keeps the preconditioner usable
                    values[d] = if values[d] >= F::zero() {
                        pivot_floor
                    } else {
                        -pivot_floor
                    };
                }
            }
            for k in row_ptr[i]..row_ptr[i + 1] {
                col_lookup[col_idx[k]] = usize::MAX;
            }
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
            diag_pos,
            perm: None,
            row_scale: None,
        }
    }

    /// Solves `L U z = r` (with equilibration and reordering when present).
    pub fn apply(&self, r: &[F], z: &mut [F]) {
        debug_assert_eq!(r.len(), self.n);
        let scaled: Vec<F>;
        let rhs: &[F] = match &self.row_scale {
            None => r,
            Some(scale) => {
                scaled = r.iter().zip(scale).map(|(&v, &s)| v * s).collect();
                &scaled
            }
        };
        match &self.perm {
            None => self.apply_inner(rhs, z),
            Some(perm) => {
                let rp: Vec<F> = perm.iter().map(|&old| rhs[old]).collect();
                let mut zp = vec![F::zero(); self.n];
                self.apply_inner(&rp, &mut zp);
                for (new, &old) in perm.iter().enumerate() {
                    z[old] = zp[new];
                }
            }
        }
    }

    fn apply_inner(&self, r: &[F], z: &mut [F]) {
        z.copy_from_slice(r);
        // forward: unit lower triangle
        for i in 0..self.n {
            let mut acc = z[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                if j >= i {
                    break;
                }
                acc -= self.values[k] * z[j];
            }
            z[i] = acc;
        }
        // backward: upper triangle including diagonal
        for i in (0..self.n).rev() {
            let mut acc = z[i];
            let d = self.diag_pos[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                if j > i {
                    acc -= self.values[k] * z[j];
                }
            }
            z[i] = if d == usize::MAX {
                acc
            } else {
                acc / self.values[d]
            };
        }
    }
}

/// Banded LU without row interchanges; pivots below the threshold are
/// perturbed (static pivoting) and the perturbation is compensated by
/// iterative refinement in [`BorderedBandSolver::solve`].
struct BandedLu<F: Scalar> {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<F>,
    perturbed: usize,
}

impl<F: Scalar> BandedLu<F> {
    fn factorize(k: &SparseOperator<F>, kl: usize, ku: usize) -> Self {
        let n = k.rows();
        let width = kl + ku + 1;
        let mut data = vec![F::zero(); n * width];
        let mut scale = F::zero();
        for r in 0..n {
            let (cols, vals) = k.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                debug_assert!(c + kl >= r && c <= r + ku, "entry outside band");
                data[r * width + (c + kl - r)] = v;
                scale = scale.max(v.abs());
            }
        }
        let floor = F::of(1e-10) * scale.max(F::one());
        let mut perturbed = 0usize;
        for col in 0..n {
            let mut piv = data[col * width + kl];
            if piv.abs() < floor {
                piv = if piv >= F::zero() { floor } else { -floor };
                data[col * width + kl] = piv;
                perturbed += 1;
            }
            let rmax = (col + kl).min(n - 1);
            let cmax = (col + ku).min(n - 1);
            for r in col + 1..=rmax {
                let idx = r * width + (col + kl - r);
                let m = data[idx] / piv;
                data[idx] = m;
                if m != F::zero() {
                    for c in col + 1..=cmax {
                        let u = data[col * width + (c + kl - col)];
                        if u != F::zero() {
                            data[r * width + (c + kl - r)] -= m * u;
                        }
                    }
                }
            }
        }
        if perturbed > 0 {
            // visible in debug logs only; the refinement loop compensates
            let _ = perturbed;
        }
        Self {
            n,
            kl,
            ku,
            width,
            data,
            perturbed,
        }
    }

    fn solve_into(&self, b: &mut [F]) {
        let (n, kl, ku, w) = (self.n, self.kl, self.ku, self.width);
        for r in 0..n {
            let lo = r.saturating_sub(kl);
            let mut acc = b[r];
            for c in lo..r {
                acc -= self.data[r * w + (c + kl - r)] * b[c];
            }
            b[r] = acc;
        }
        for r in (0..n).rev() {
            let hi = (r + ku).min(n - 1);
            let mut acc = b[r];
            for c in r + 1..=hi {
                acc -= self.data[r * w + (c + kl - r)] * b[c];
            }
            b[r] = acc / self.data[r * w + kl];
        }
    }
}

/// Direct solver for sparse systems whose trailing `n_border` rows/columns
/// are dense (Lagrange multipliers): the leading block is reordered by
/// reverse Cuthill-McKee, row-equilibrated, and factored as a banded LU;
/// the border is eliminated exactly by the block-bordering algorithm.
pub struct BorderedBandSolver<F: Scalar> {
    n: usize,
    m: usize,
    row_scale: Vec<F>,
    perm: Vec<usize>,
    /// Permuted, scaled leading block (kept for iterative refinement).
    k_csr: SparseOperator<F>,
    lu: BandedLu<F>,
    /// `Y = K⁻¹ B`, one column per border unknown.
    y_cols: Vec<Vec<F>>,
    /// Border rows `C` (scaled, permuted).
    c_rows: Vec<Vec<F>>,
    /// Dense LU of the border Schur complement `S = D - C Y`.
    s_dense: Vec<F>,
}

impl<F: Scalar> BorderedBandSolver<F> {
    /// Factorizes `a` with its trailing `n_border` unknowns treated as the
    /// dense border. Fails only on absurd bandwidth (quasi-dense coupling).
    pub fn new(a: &SparseOperator<F>, n_border: usize) -> Result<Self, String> {
        let n = a.rows();
        if a.cols() != n {
            return Err("bordered solver needs a square matrix".to_string());
        }
        if n_border > n {
            return Err("border larger than the matrix".to_string());
        }
        let m = n - n_border;

        // row equilibration over the full matrix
        let mut row_scale = vec![F::one(); n];
        for r in 0..n {
            let mx = a.row(r).1.iter().fold(F::zero(), |acc, v| acc.max(v.abs()));
            if mx > F::of(1e-300) {
                row_scale[r] = F::one() / mx;
            }
        }

        // split into K (leading m x m), B, C, D with scaling applied
        let mut kb = TripletBuilder::with_capacity(m, m, a.nnz());
        let mut b_cols = vec![vec![F::zero(); m]; n_border];
        let mut c_rows = vec![vec![F::zero(); m]; n_border];
        let mut d = vec![F::zero(); n_border * n_border];
        for r in 0..n {
            let (cols, vals) = a.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let v = v * row_scale[r];
                match (r < m, c < m) {
                    (true, true) => kb.push(r, c, v),
                    (true, false) => b_cols[c - m][r] = v,
                    (false, true) => c_rows[r - m][c] = v,
                    (false, false) => d[(r - m) * n_border + (c - m)] = v,
                }
            }
        }
        let k_block = kb.build();

        let perm = reverse_cuthill_mckee(&k_block);
        let k_csr = permute(&k_block, &perm);
        let mut bw = 0usize;
        for r in 0..m {
            for &c in k_csr.row(r).0 {
                bw = bw.max(r.abs_diff(c));
            }
        }
        if m > 0 && (bw + 1) * 3 > 2 * m + 2 && m > 64 {
            return Err(format!(
                "bandwidth {bw} of {m} unknowns: matrix is quasi-dense"
            ));
        }
        let lu = BandedLu::factorize(&k_csr, bw, bw);

        let mut solver = Self {
            n,
            m,
            row_scale,
            perm,
            k_csr,
            lu,
            y_cols: Vec::new(),
            c_rows: Vec::new(),
            s_dense: Vec::new(),
        };

        // permute the border coupling and build the Schur complement
        let mut y_cols = Vec::with_capacity(n_border);
        for col in &b_cols {
            let permuted: Vec<F> = solver.perm.iter().map(|&old| col[old]).collect();
            y_cols.push(solver.solve_k(&permuted));
        }
        let c_perm: Vec<Vec<F>> = c_rows
            .iter()
            .map(|row| solver.perm.iter().map(|&old| row[old]).collect())
            .collect();
        let mut s = d;
        for i in 0..n_border {
            for j in 0..n_border {
                let dot: F = c_perm[i]
                    .iter()
                    .zip(&y_cols[j])
                    .map(|(&a, &b)| a * b)
                    .fold(F::zero(), |x, y| x + y);
                s[i * n_border + j] -= dot;
            }
        }
        // tiny dense LU with partial pivoting, stored unrolled
        solver.s_dense = s;
        solver.y_cols = y_cols;
        solver.c_rows = c_perm;
        Ok(solver)
    }

    /// `K⁻¹ r` in the permuted numbering, with iterative refinement against
    /// the exact sparse block (compensates the static pivot perturbations).
    fn solve_k(&self, r: &[F]) -> Vec<F> {
        let mut x = r.to_vec();
        self.lu.solve_into(&mut x);
        let mut res = vec![F::zero(); self.m];
        for _ in 0..3 {
            self.k_csr.matvec_into(&x, &mut res);
            let mut worst = F::zero();
            let mut rhs_norm = F::zero();
            for i in 0..self.m {
                res[i] = r[i] - res[i];
                worst = worst.max(res[i].abs());
                rhs_norm = rhs_norm.max(r[i].abs());
            }
            if worst <= F::of(1e-14) * (rhs_norm + F::one()) {
                break;
            }
            let mut corr = res.clone();
            self.lu.solve_into(&mut corr);
            for i in 0..self.m {
                x[i] += corr[i];
            }
        }
        x
    }

    fn solve_border(&self, rhs: &[F]) -> Vec<F> {
        // dense solve of S x = rhs with partial pivoting (n_border is tiny)
        let nb = rhs.len();
        let mut a = self.s_dense.clone();
        let mut b = rhs.to_vec();
        let mut piv: Vec<usize> = (0..nb).collect();
        for k in 0..nb {
            let mut best = k;
            for r in k + 1..nb {
                if a[piv[r] * nb + k].abs() > a[piv[best] * nb + k].abs() {
                    best = r;
                }
            }
            piv.swap(k, best);
            let p = a[piv[k] * nb + k];
            for r in k + 1..nb {
                let f = a[piv[r] * nb + k] / p;
                a[piv[r] * nb + k] = f;
                for c in k + 1..nb {
                    let u = a[piv[k] * nb + c];
                    a[piv[r] * nb + c] -= f * u;
                }
            }
        }
        let mut y = vec![F::zero(); nb];
        for r in 0..nb {
            let mut acc = b[piv[r]];
            for c in 0..r {
                acc -= a[piv[r] * nb + c] * y[c];
            }
            y[r] = acc;
        }
        for r in (0..nb).rev() {
            let mut acc = y[r];
            for c in r + 1..nb {
                acc -= a[piv[r] * nb + c] * b[c];
            }
            b[r] = acc / a[piv[r] * nb + r];
        }
        b
    }

    /// Half-bandwidth of the reordered leading block.
    pub fn bandwidth(&self) -> usize {
        self.lu.kl
    }

    /// Number of statically perturbed pivots in the banded factorization.
    pub fn perturbed_pivots(&self) -> usize {
        self.lu.perturbed
    }

    /// Solves `A x = rhs` for the original (unscaled, unpermuted) system.
    pub fn solve(&self, rhs: &[F]) -> Vec<F> {
        assert_eq!(rhs.len(), self.n);
        let nb = self.n - self.m;
        let mut r1p = vec![F::zero(); self.m];
        for new in 0..self.m {
            let old = self.perm[new];
            r1p[new] = rhs[old] * self.row_scale[old];
        }
        let w = self.solve_k(&r1p);
        let mut x1 = w;
        let mut x2 = Vec::new();
        if nb > 0 {
            let mut r2 = vec![F::zero(); nb];
            for i in 0..nb {
                let mut dot = F::zero();
                for (cv, xv) in self.c_rows[i].iter().zip(&x1) {
                    dot += *cv * *xv;
                }
                r2[i] = rhs[self.m + i] * self.row_scale[self.m + i] - dot;
            }
            x2 = self.solve_border(&r2);
            for (j, x2j) in x2.iter().enumerate() {
                for i in 0..self.m {
                    x1[i] -= self.y_cols[j][i] * *x2j;
                }
            }
        }
        let mut x = vec![F::zero(); self.n];
        for new in 0..self.m {
            x[self.perm[new]] = x1[new];
        }
        for (i, v) in x2.into_iter().enumerate() {
            x[self.m + i] = v;
        }
        x
    }
}
