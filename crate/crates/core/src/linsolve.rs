//! Sparse storage and solution of the bordered Neumann system
//!
//! ```text
//! [ A   e ] [ w      ]   [ b ]
//! [ e'  0 ] [ lambda ] = [ 0 ]
//! ```
//!
//! where `A` has the constant vector in its kernel. The border keeps `w`
//! orthogonal to that kernel instead of pinning an arbitrary unknown.
//!
//! Both solver paths work on the regularized core `B = A + tau e_r e_r'`,
//! which is nonsingular whenever `A` has a one-dimensional kernel, and recover
//! the bordered solution exactly from solves with `B`:
//!
//! * direct: banded LU with partial pivoting, then iterative refinement;
//! * Krylov: restarted GMRES on the bordered operator, right-preconditioned by
//!   the same reduction with an ILU(0) factor of `B`.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Square sparse matrix in compressed sparse row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<T> {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> SparseMatrix<T> {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, T)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|&&(r, c, _)| r >= n || c >= n) {
            return Err(Error::invalid(format!("entry ({r}, {c}) outside {n}x{n}")));
        }
        if triplets.iter().any(|t| !t.2.is_finite()) {
            return Err(Error::numeric("non-finite matrix entry"));
        }
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => T::zero(),
        }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        self.matvec_into(x, &mut y);
        y
    }

    fn matvec_into(&self, x: &[T], y: &mut [T]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum();
        }
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.n).map(|i| self.row(i).1.iter().copied().sum()).collect()
    }

    /// Lower and upper bandwidths.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for i in 0..self.n {
            for &c in self.row(i).0 {
                if c < i {
                    kl = kl.max(i - c);
                } else {
                    ku = ku.max(c - i);
                }
            }
        }
        (kl, ku)
    }

    /// Structurally symmetric sparsity pattern.
    pub fn is_structurally_symmetric(&self) -> bool {
        (0..self.n).all(|i| {
            self.row(i)
                .0
                .iter()
                .all(|&c| self.row(c).0.binary_search(&i).is_ok())
        })
    }

    fn with_diagonal_shift(&self, r: usize, tau: T) -> Self {
        let mut out = self.clone();
        let (start, end) = (out.row_ptr[r], out.row_ptr[r + 1]);
        match out.col_idx[start..end].binary_search(&r) {
            Ok(p) => out.values[start + p] += tau,
            Err(_) => {
                let mut trip: Vec<(usize, usize, T)> = Vec::with_capacity(out.nnz() + 1);
                for i in 0..out.n {
                    let (cols, vals) = out.row(i);
                    trip.extend(cols.iter().zip(vals).map(|(&c, &v)| (i, c, v)));
                }
                trip.push((r, r, tau));
                return Self::from_triplets(self.n, trip).expect("valid shift");
            }
        }
        out
    }
}

/// The bordered system: sparse core, all-ones border and right-hand side.
#[derive(Debug, Clone)]
pub struct BorderedSystem<T> {
    pub core: SparseMatrix<T>,
    pub rhs: Vec<T>,
}

/// Solution `(w, lambda)` of a bordered system.
#[derive(Debug, Clone)]
pub struct BorderedSolution<T> {
    pub w: Vec<T>,
    pub lambda: T,
    /// `||M z - rhs|| / ||rhs||` for the full bordered operator `M`.
    pub relative_residual: T,
    pub method: SolverKind,
    /// Krylov iterations, or refinement sweeps for the direct path.
    pub iterations: usize,
}

/// Which path to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    /// Direct for at most `direct_limit` unknowns, Krylov above.
    Auto { direct_limit: usize },
    Direct,
    Krylov,
}

impl Default for SolverKind {
    fn default() -> Self {
        SolverKind::Auto {
            direct_limit: DEFAULT_DIRECT_LIMIT,
        }
    }
}

pub const DEFAULT_DIRECT_LIMIT: usize = 10_000;

/// Residual bound every successful solve meets. Narrow scalar types are held
/// to `RESIDUAL_EPS_FACTOR * epsilon` when that is larger.
pub const BORDERED_RESIDUAL_TOL: f64 = 1e-9;

pub const RESIDUAL_EPS_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverOptions {
    pub kind: SolverKind,
    /// Relative residual the solve must reach.
    pub tol: f64,
    pub krylov_restart: usize,
    pub krylov_max_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kind: SolverKind::default(),
            tol: BORDERED_RESIDUAL_TOL,
            krylov_restart: 80,
            krylov_max_iters: 4000,
        }
    }
}

impl<T: Real> BorderedSystem<T> {
    pub fn new(core: SparseMatrix<T>, rhs: Vec<T>) -> Result<Self> {
        if rhs.len() != core.dim() {
            return Err(Error::invalid(format!(
                "rhs length {} does not match core dimension {}",
                rhs.len(),
                core.dim()
            )));
        }
        Ok(Self { core, rhs })
    }

    /// Dimension of the bordered operator, `N + 1`.
    pub fn dim(&self) -> usize {
        self.core.dim() + 1
    }

    /// Applies the bordered operator to `(w, lambda)`.
    pub fn apply(&self, w: &[T], lambda: T) -> (Vec<T>, T) {
        let mut top = self.core.matvec(w);
        for t in top.iter_mut() {
            *t += lambda;
        }
        (top, w.iter().copied().sum())
    }

    /// Relative residual of a candidate solution against `[b; 0]`.
    pub fn relative_residual(&self, w: &[T], lambda: T) -> T {
        let (top, bottom) = self.apply(w, lambda);
        let num: T = top
            .iter()
            .zip(&self.rhs)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            + bottom * bottom;
        let den = norm(&self.rhs);
        if den == T::zero() {
            num.sqrt()
        } else {
            num.sqrt() / den
        }
    }
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Solves with default options.
pub fn solve<T: Real>(sys: &BorderedSystem<T>) -> Result<BorderedSolution<T>> {
    solve_with(sys, &SolverOptions::default())
}

pub fn solve_with<T: Real>(
    sys: &BorderedSystem<T>,
    opts: &SolverOptions,
) -> Result<BorderedSolution<T>> {
    let n = sys.core.dim();
    if n == 0 {
        return Err(Error::invalid("empty system"));
    }
    if sys.rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite right-hand side"));
    }
    let kind = match opts.kind {
        SolverKind::Auto { direct_limit } if n <= direct_limit => SolverKind::Direct,
        SolverKind::Auto { .. } => SolverKind::Krylov,
        k => k,
    };
    if sys.rhs.iter().all(|&v| v == T::zero()) {
        return Ok(BorderedSolution {
            w: vec![T::zero(); n],
            lambda: T::zero(),
            relative_residual: T::zero(),
            method: kind,
            iterations: 0,
        });
    }
    let tol = T::lit(opts.tol).max(T::lit(RESIDUAL_EPS_FACTOR) * T::epsilon());
    let sol = match kind {
        SolverKind::Direct => solve_direct(sys, tol)?,
        _ => solve_krylov(sys, tol, opts)?,
    };
    if !(sol.relative_residual <= tol) {
        return Err(Error::NumericFailure {
            message: format!(
                "bordered solve did not reach relative residual {tol:e}"
            ),
            iteration: None,
            residual: Some(sol.relative_residual.to_f64_lossy()),
        });
    }
    Ok(sol)
}

/// Any square linear operator approximating `B^{-1}`.
trait CoreInverse<T> {
    fn apply(&self, rhs: &[T]) -> Vec<T>;
}

/// Reduction of the bordered system to solves with `B = A + tau e_r e_r'`.
struct BorderReduction<T, S> {
    inv: S,
    r: usize,
    tau: T,
    q: Vec<T>,
    s: Vec<T>,
    sum_q: T,
    sum_s: T,
}

impl<T: Real, S: CoreInverse<T>> BorderReduction<T, S> {
    fn new(inv: S, n: usize, r: usize, tau: T) -> Self {
        let q = inv.apply(&vec![T::one(); n]);
        let mut er = vec![T::zero(); n];
        er[r] = T::one();
        let s = inv.apply(&er);
        let sum_q = q.iter().copied().sum();
        let sum_s = s.iter().copied().sum();
        Self {
            inv,
            r,
            tau,
            q,
            s,
            sum_q,
            sum_s,
        }
    }

    /// Solves `A w + lambda e = b`, `e'w = c` through `B`.
    fn apply(&self, b: &[T], c: T) -> (Vec<T>, T) {
        let p = self.inv.apply(b);
        let sum_p: T = p.iter().copied().sum();
        let r = self.r;
        // w = p - lambda q + tau w_r s, with
        //   q_r lambda + (1 - tau s_r) w_r = p_r
        //  -sum_q lambda + tau sum_s w_r = c - sum_p
        let (a11, a12, b1) = (self.q[r], T::one() - self.tau * self.s[r], p[r]);
        let (a21, a22, b2) = (-self.sum_q, self.tau * self.sum_s, c - sum_p);
        let det = a11 * a22 - a12 * a21;
        let lambda = (b1 * a22 - a12 * b2) / det;
        let wr = (a11 * b2 - a21 * b1) / det;
        let w = p
            .iter()
            .zip(&self.q)
            .zip(&self.s)
            .map(|((&pi, &qi), &si)| pi - lambda * qi + self.tau * wr * si)
            .collect();
        (w, lambda)
    }
}

fn regularization<T: Real>(a: &SparseMatrix<T>) -> (usize, T) {
    let n = a.dim();
    let r = n / 2;
    let d = a.get(r, r).abs();
    (r, if d > T::zero() { d } else { T::one() })
}

/// Banded LU factorization with partial pivoting.
struct BandedLu<T> {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    // row i holds columns [i - kl, i + kl + ku]
    rows: Vec<T>,
    lower: Vec<T>,
    pivots: Vec<usize>,
}

impl<T: Real> BandedLu<T> {
    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        i * self.width + (j + self.kl - i)
    }

    fn factor(a: &SparseMatrix<T>) -> Result<Self> {
        let n = a.dim();
        let (kl, ku) = a.bandwidths();
        let width = 2 * kl + ku + 1;
        let mut lu = Self {
            n,
            kl,
            ku,
            width,
            rows: vec![T::zero(); n * width],
            lower: vec![T::zero(); n * kl.max(1)],
            pivots: vec![0; n],
        };
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                let idx = lu.at(i, c);
                lu.rows[idx] = v;
            }
        }
        let reach = kl + ku;
        for c in 0..n {
            let last_row = (c + kl).min(n - 1);
            let mut p = c;
            let mut best = lu.rows[lu.at(c, c)].abs();
            for i in c + 1..=last_row {
                let v = lu.rows[lu.at(i, c)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            lu.pivots[c] = p;
            if best == T::zero() || !best.is_finite() {
                return Err(Error::numeric(format!(
                    "singular or non-finite pivot in column {c}"
                )));
            }
            let last_col = (c + reach).min(n - 1);
            if p != c {
                for j in c..=last_col {
                    let (x, y) = (lu.at(c, j), lu.at(p, j));
                    lu.rows.swap(x, y);
                }
            }
            let piv = lu.rows[lu.at(c, c)];
            let prow = lu.at(c, c);
            for i in c + 1..=last_row {
                let ic = lu.at(i, c);
                let l = lu.rows[ic] / piv;
                lu.lower[c * kl + (i - c - 1)] = l;
                lu.rows[ic] = T::zero();
                if l == T::zero() {
                    continue;
                }
                let irow = lu.at(i, c);
                let len = last_col - c;
                let (src, dst) = if prow < irow {
                    let (lo, hi) = lu.rows.split_at_mut(irow);
                    (&lo[prow + 1..prow + 1 + len], &mut hi[1..1 + len])
                } else {
                    unreachable!("pivot row precedes eliminated rows")
                };
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d -= l * s;
                }
            }
        }
        Ok(lu)
    }

    fn solve_in_place(&self, b: &mut [T]) {
        let (n, kl) = (self.n, self.kl);
        for c in 0..n {
            let p = self.pivots[c];
            if p != c {
                b.swap(c, p);
            }
            let bc = b[c];
            if bc != T::zero() {
                let last_row = (c + kl).min(n - 1);
                for i in c + 1..=last_row {
                    b[i] -= self.lower[c * kl + (i - c - 1)] * bc;
                }
            }
        }
        let reach = self.kl + self.ku;
        for c in (0..n).rev() {
            let last_col = (c + reach).min(n - 1);
            let base = self.at(c, c);
            let mut s = b[c];
            for (off, j) in (c + 1..=last_col).enumerate() {
                s -= self.rows[base + 1 + off] * b[j];
            }
            b[c] = s / self.rows[base];
        }
    }
}

impl<T: Real> CoreInverse<T> for BandedLu<T> {
    fn apply(&self, rhs: &[T]) -> Vec<T> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

fn solve_direct<T: Real>(sys: &BorderedSystem<T>, tol: T) -> Result<BorderedSolution<T>> {
    let n = sys.core.dim();
    let (r, tau) = regularization(&sys.core);
    let b = sys.core.with_diagonal_shift(r, tau);
    let lu = BandedLu::factor(&b)?;
    let red = BorderReduction::new(lu, n, r, tau);

    let (mut w, mut lambda) = red.apply(&sys.rhs, T::zero());
    let mut res = sys.relative_residual(&w, lambda);
    let mut sweeps = 0;
    // iterative refinement against the bordered operator
    let target = tol * T::lit(1e-3);
    while sweeps < 4 && res > target {
        let (top, bottom) = sys.apply(&w, lambda);
        let rt: Vec<T> = sys.rhs.iter().zip(&top).map(|(&b, &a)| b - a).collect();
        let (dw, dl) = red.apply(&rt, -bottom);
        for (wi, di) in w.iter_mut().zip(&dw) {
            *wi += *di;
        }
        lambda += dl;
        let next = sys.relative_residual(&w, lambda);
        sweeps += 1;
        if !(next < res) {
            res = next;
            break;
        }
        res = next;
    }
    if w.iter().any(|v| !v.is_finite()) || !lambda.is_finite() {
        return Err(Error::numeric("direct solve produced non-finite values"));
    }
    Ok(BorderedSolution {
        w,
        lambda,
        relative_residual: res,
        method: SolverKind::Direct,
        iterations: sweeps,
    })
}

/// Incomplete LU with zero fill on the sparsity pattern of the matrix.
struct Ilu0<T> {
    m: SparseMatrix<T>,
    diag: Vec<usize>,
}

impl<T: Real> Ilu0<T> {
    fn factor(a: &SparseMatrix<T>) -> Result<Self> {
        let mut m = a.clone();
        let n = m.n;
        let mut diag = vec![usize::MAX; n];
        for (i, d) in diag.iter_mut().enumerate() {
            let (cols, _) = m.row(i);
            match cols.binary_search(&i) {
                Ok(p) => *d = m.row_ptr[i] + p,
                Err(_) => return Err(Error::numeric(format!("missing diagonal in row {i}"))),
            }
        }
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            let (start, end) = (m.row_ptr[i], m.row_ptr[i + 1]);
            for p in start..end {
                pos[m.col_idx[p]] = p;
            }
            for p in start..end {
                let kcol = m.col_idx[p];
                if kcol >= i {
                    break;
                }
                let pivot = m.values[diag[kcol]];
                if pivot == T::zero() {
                    return Err(Error::numeric(format!("zero ILU pivot in row {kcol}")));
                }
                let l = m.values[p] / pivot;
                m.values[p] = l;
                for q in diag[kcol] + 1..m.row_ptr[kcol + 1] {
                    let target = pos[m.col_idx[q]];
                    if target != usize::MAX {
                        let u = m.values[q];
                        m.values[target] -= l * u;
                    }
                }
            }
            for p in start..end {
                pos[m.col_idx[p]] = usize::MAX;
            }
        }
        Ok(Self { m, diag })
    }
}

impl<T: Real> CoreInverse<T> for Ilu0<T> {
    fn apply(&self, rhs: &[T]) -> Vec<T> {
        let n = self.m.n;
        let mut x = rhs.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for p in self.m.row_ptr[i]..self.diag[i] {
                s -= self.m.values[p] * x[self.m.col_idx[p]];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for p in self.diag[i] + 1..self.m.row_ptr[i + 1] {
                s -= self.m.values[p] * x[self.m.col_idx[p]];
            }
            x[i] = s / self.m.values[self.diag[i]];
        }
        x
    }
}

fn solve_krylov<T: Real>(
    sys: &BorderedSystem<T>,
    tol: T,
    opts: &SolverOptions,
) -> Result<BorderedSolution<T>> {
    let n = sys.core.dim();
    let (r, tau) = regularization(&sys.core);
    let b = sys.core.with_diagonal_shift(r, tau);
    let ilu = Ilu0::factor(&b)?;
    let prec = BorderReduction::new(ilu, n, r, tau);

    let pack = |w: &[T], l: T| -> Vec<T> {
        let mut v = w.to_vec();
        v.push(l);
        v
    };
    let op = |z: &[T]| -> Vec<T> {
        let (top, bottom) = sys.apply(&z[..n], z[n]);
        pack(&top, bottom)
    };
    let precond = |z: &[T]| -> Vec<T> {
        let (w, l) = prec.apply(&z[..n], z[n]);
        pack(&w, l)
    };
    let rhs = pack(&sys.rhs, T::zero());
    let bnorm = norm(&rhs);
    let target = tol * T::lit(1e-2);

    let (x0w, x0l) = prec.apply(&sys.rhs, T::zero());
    let mut x = pack(&x0w, x0l);
    let restart = opts.krylov_restart.max(2);
    let mut total = 0;

    while total < opts.krylov_max_iters {
        let ax = op(&x);
        let r0: Vec<T> = rhs.iter().zip(&ax).map(|(&b, &a)| b - a).collect();
        let beta = norm(&r0);
        if beta / bnorm <= target {
            break;
        }
        // Arnoldi with modified Gram-Schmidt and Givens rotations.
        let mut v: Vec<Vec<T>> = vec![r0.iter().map(|&x| x / beta).collect()];
        let mut z: Vec<Vec<T>> = Vec::with_capacity(restart);
        let mut hcols: Vec<Vec<T>> = Vec::with_capacity(restart);
        let mut cs: Vec<T> = Vec::with_capacity(restart);
        let mut sn: Vec<T> = Vec::with_capacity(restart);
        let mut g = vec![T::zero(); restart + 1];
        g[0] = beta;
        let mut steps = 0;
        for jdx in 0..restart {
            let zj = precond(&v[jdx]);
            let mut wv = op(&zj);
            z.push(zj);
            let mut hcol = vec![T::zero(); jdx + 2];
            for (i, vi) in v.iter().enumerate() {
                let hij: T = wv.iter().zip(vi).map(|(&a, &b)| a * b).sum();
                hcol[i] = hij;
                for (a, &b) in wv.iter_mut().zip(vi) {
                    *a -= hij * b;
                }
            }
            let hnext = norm(&wv);
            hcol[jdx + 1] = hnext;
            for i in 0..jdx {
                let t = cs[i] * hcol[i] + sn[i] * hcol[i + 1];
                hcol[i + 1] = -sn[i] * hcol[i] + cs[i] * hcol[i + 1];
                hcol[i] = t;
            }
            let denom = (hcol[jdx] * hcol[jdx] + hcol[jdx + 1] * hcol[jdx + 1]).sqrt();
            let (c, s) = if denom == T::zero() {
                (T::one(), T::zero())
            } else {
                (hcol[jdx] / denom, hcol[jdx + 1] / denom)
            };
            cs.push(c);
            sn.push(s);
            hcol[jdx] = c * hcol[jdx] + s * hcol[jdx + 1];
            hcol[jdx + 1] = T::zero();
            g[jdx + 1] = -s * g[jdx];
            g[jdx] = c * g[jdx];
            hcols.push(hcol);
            steps += 1;
            total += 1;
            if g[jdx + 1].abs() / bnorm <= target
                || hnext == T::zero()
                || total >= opts.krylov_max_iters
            {
                break;
            }
            v.push(wv.iter().map(|&x| x / hnext).collect());
        }
        // back substitution for the least-squares coefficients
        let mut y = vec![T::zero(); steps];
        for i in (0..steps).rev() {
            let mut s = g[i];
            for (jj, yj) in y.iter().enumerate().take(steps).skip(i + 1) {
                s -= hcols[jj][i] * *yj;
            }
            y[i] = s / hcols[i][i];
        }
        for (yj, zj) in y.iter().zip(&z) {
            for (a, &b) in x.iter_mut().zip(zj) {
                *a += *yj * b;
            }
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("Krylov solve produced non-finite values"));
    }
    let lambda = x[n];
    x.truncate(n);
    let relative_residual = sys.relative_residual(&x, lambda);
    if relative_residual > tol {
        return Err(Error::NumericFailure {
            message: format!("GMRES stagnated after {total} iterations"),
            iteration: None,
            residual: Some(relative_residual.to_f64_lossy()),
        });
    }
    Ok(BorderedSolution {
        w: x,
        lambda,
        relative_residual,
        method: SolverKind::Krylov,
        iterations: total,
    })
}
