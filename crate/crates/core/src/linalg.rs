//! Small dense linear algebra.
//!
//! Storage is column-major throughout, and `vec(X)` means stacking the
//! columns of `X`. Under that convention
//!
//! ```text
//! vec(A X B) = (Bᵀ ⊗ A) vec(X)
//! ```
//!
//! so the gradient of a linear map `h = W a` with output gradient `g` has
//! `vec(∇W) = vec(g aᵀ) = a ⊗ g`, and a per-layer Fisher block is written
//! `(input factor) ⊗ (output factor)`. All curvature and prediction code
//! relies on this ordering.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Jitter values tried, in order, when a Cholesky factorisation fails.
pub const JITTER_LADDER: [f64; 8] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Largest row or column count `kron` will materialise.
pub const KRON_MAX_DIM: usize = 4096;

const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|j| format!("{:.6e}", self[(i, j)]))
                .collect();
            writeln!(f, "  {}", row.join(", "))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from column-major storage.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from a list of rows. Panics on ragged input; intended for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self::from_fn(r, c, |i, j| rows[i][j])
    }

    /// Single column matrix.
    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Column-major storage, i.e. `vec(self)`.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        for j in 0..self.cols {
            for i in (j + 1)..self.rows {
                if (self[(i, j)] - self[(j, i)]).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "axpy: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn add_diag(&mut self, v: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += v;
        }
    }

    /// `self += w · x yᵀ`
    pub fn rank1_update(&mut self, w: f64, x: &[f64], y: &[f64]) {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        for (j, &yj) in y.iter().enumerate() {
            let f = w * yj;
            if f == 0.0 {
                continue;
            }
            for (c, &xi) in self.col_mut(j).iter_mut().zip(x) {
                *c += f * xi;
            }
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul: inner dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for j in 0..other.cols {
            for k in 0..self.cols {
                let b = other[(k, j)];
                if b == 0.0 {
                    continue;
                }
                let a_col = self.col(k);
                for (o, &a) in out.col_mut(j).iter_mut().zip(a_col) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul: inner dimension mismatch");
        Self::from_fn(self.cols, other.cols, |i, j| dot(self.col(i), other.col(j)))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Self) -> Self {
        self.matmul(&other.transpose())
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec: dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.col(j)) {
                *o += a * xj;
            }
        }
        out
    }

    /// `selfᵀ · x`
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "tr_matvec: dimension mismatch");
        (0..self.cols).map(|j| dot(self.col(j), x)).collect()
    }

    /// Appends the columns of `other` on the right.
    pub fn hcat(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows && self.cols != 0 && other.cols != 0 {
            return Err(Error::DimMismatch(format!(
                "hcat of {} and {} rows",
                self.rows, other.rows
            )));
        }
        let rows = if self.cols == 0 { other.rows } else { self.rows };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows,
            cols: self.cols + other.cols,
            data,
        })
    }

    /// Keeps the first `k` columns.
    pub fn leading_cols(&self, k: usize) -> Self {
        let k = k.min(self.cols);
        Self {
            rows: self.rows,
            cols: k,
            data: self.data[..k * self.rows].to_vec(),
        }
    }

    /// Symmetrises in place as `(M + Mᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        for j in 0..self.cols {
            for i in (j + 1)..self.rows {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[j * self.rows + i]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[j * self.rows + i]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Column-stacking `vec`.
pub fn vec(m: &Matrix) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::from_col_major(rows, cols, v.to_vec())
}

/// Lower-triangular factor `L` with `L Lᵀ = m + jitter·I`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    lower: Matrix,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// Diagonal jitter that was added to obtain this factor.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    pub fn reconstruct(&self) -> Matrix {
        self.lower.matmul_t(&self.lower)
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let l = &self.lower;
        let mut y = b.to_vec();
        for j in 0..n {
            y[j] /= l[(j, j)];
            let yj = y[j];
            for i in (j + 1)..n {
                y[i] -= l[(i, j)] * yj;
            }
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(y.len(), n);
        let l = &self.lower;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let s = dot(&l.col(i)[i + 1..], &x[i + 1..]);
            x[i] = (x[i] - s) / l[(i, i)];
        }
        x
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn solve_mat(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let x = self.solve(b.col(j));
            out.col_mut(j).copy_from_slice(&x);
        }
        out
    }

    /// `L⁻¹ B`, column by column.
    pub fn solve_lower_mat(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let y = self.solve_lower(b.col(j));
            out.col_mut(j).copy_from_slice(&y);
        }
        out
    }

    pub fn inverse(&self) -> Matrix {
        let mut inv = self.solve_mat(&Matrix::identity(self.dim()));
        inv.symmetrize();
        inv
    }

    /// Diagonal of `(L Lᵀ)⁻¹` without forming the inverse.
    pub fn inverse_diag(&self) -> Vec<f64> {
        let n = self.dim();
        // (LLᵀ)⁻¹_ii = ‖L⁻¹ e_i‖²
        let linv = self.solve_lower_mat(&Matrix::identity(n));
        (0..n)
            .map(|i| (0..n).map(|k| linv[(k, i)] * linv[(k, i)]).sum())
            .collect()
    }
}

/// Cholesky factorisation of a symmetric matrix, retrying with diagonal
/// jitter from [`JITTER_LADDER`] (starting at `jitter`) until it succeeds.
pub fn cholesky(m: &Matrix, jitter: f64) -> Result<CholeskyFactor> {
    check_symmetric(m)?;
    let mut rungs = vec![jitter];
    rungs.extend(JITTER_LADDER.iter().copied().filter(|&j| j > jitter));
    for j in rungs {
        if let Some(lower) = try_cholesky(m, j) {
            return Ok(CholeskyFactor { lower, jitter: j });
        }
    }
    Err(Error::NotPositiveDefinite {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1].max(jitter),
    })
}

/// Cholesky factorisation with exactly the given jitter, no retries.
pub fn cholesky_exact(m: &Matrix, jitter: f64) -> Result<CholeskyFactor> {
    check_symmetric(m)?;
    try_cholesky(m, jitter)
        .map(|lower| CholeskyFactor { lower, jitter })
        .ok_or(Error::NotPositiveDefinite { max_jitter: jitter })
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NonSquare {
            rows: m.rows,
            cols: m.cols,
        });
    }
    if !m.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::DimMismatch("matrix is not symmetric".into()));
    }
    Ok(())
}

fn try_cholesky(m: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = m.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// `log det(L Lᵀ)`.
pub fn logdet(c: &CholeskyFactor) -> f64 {
    2.0 * c.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    if rows > KRON_MAX_DIM || cols > KRON_MAX_DIM {
        return Err(Error::DimTooLarge { rows, cols });
    }
    Ok(Matrix::from_fn(rows, cols, |i, j| {
        a[(i / b.rows, j / b.cols)] * b[(i % b.rows, j % b.cols)]
    }))
}

/// Thin singular value decomposition `m = u · diag(s) · vᵀ` with `s`
/// sorted descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, &sj) in self.s.iter().enumerate() {
            us.col_mut(j).iter_mut().for_each(|x| *x *= sj);
        }
        us.matmul_t(&self.v)
    }
}

/// Thin SVD by one-sided Jacobi rotations on the smaller dimension.
pub fn thin_svd(m: &Matrix) -> Svd {
    if m.rows >= m.cols {
        let (w, v) = jacobi_columns(m);
        finish_svd(w, v)
    } else {
        // mᵀ = u' s v'ᵀ  ⇒  m = v' s u'ᵀ
        let (w, v) = jacobi_columns(&m.transpose());
        let Svd { u, s, v: vt } = finish_svd(w, v);
        Svd { u: vt, s, v: u }
    }
}

/// Scaled left factor of the leading `k` singular components:
/// `u[:, :k]` with orthonormal columns and `s[:k]`.
pub fn svd_topk(m: &Matrix, k: usize) -> Result<(Matrix, Vec<f64>)> {
    if k > m.rows.min(m.cols) {
        return Err(Error::KTooLarge {
            k,
            rows: m.rows,
            cols: m.cols,
        });
    }
    let svd = thin_svd(m);
    Ok((svd.u.leading_cols(k), svd.s[..k].to_vec()))
}

/// Orthogonalises the columns of `m` (rows ≥ cols) by Hestenes' one-sided
/// Jacobi method. Returns `(W, V)` with `m V = W`, `V` orthogonal and the
/// columns of `W` mutually orthogonal.
pub(crate) fn jacobi_columns(m: &Matrix) -> (Matrix, Matrix) {
    let n = m.cols;
    let mut w = m.clone();
    let mut v = Matrix::identity(n);
    const MAX_SWEEPS: usize = 60;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(w.col(p), w.col(p));
                let beta = dot(w.col(q), w.col(q));
                let gamma = dot(w.col(p), w.col(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_cols(&mut w, p, q, c, s);
                rotate_cols(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    (w, v)
}

fn rotate_cols(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let rows = m.rows;
    for i in 0..rows {
        let xp = m.data[p * rows + i];
        let xq = m.data[q * rows + i];
        m.data[p * rows + i] = c * xp - s * xq;
        m.data[q * rows + i] = s * xp + c * xq;
    }
}

fn finish_svd(w: Matrix, v: Matrix) -> Svd {
    let n = w.cols;
    let norms: Vec<f64> = (0..n).map(|j| norm(w.col(j))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let smax = norms.iter().copied().fold(0.0, f64::max);
    let tiny = smax * (w.rows.max(n) as f64) * f64::EPSILON;

    let mut u = Matrix::zeros(w.rows, n);
    let mut vs = Matrix::zeros(v.rows, n);
    let mut s = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let sj = norms[src];
        s.push(sj);
        vs.col_mut(dst).copy_from_slice(v.col(src));
        if sj > tiny && sj > 0.0 {
            for (o, &x) in u.col_mut(dst).iter_mut().zip(w.col(src)) {
                *o = x / sj;
            }
        } else {
            deficient.push(dst);
        }
    }
    complete_orthonormal(&mut u, &deficient);
    Svd { u, s, v: vs }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to all
/// other columns (Gram-Schmidt against the standard basis).
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let rows = u.rows;
    let mut filled: Vec<usize> = (0..u.cols).filter(|j| !missing.contains(j)).collect();
    let mut candidate = 0;
    for &j in missing {
        while candidate < rows {
            let mut e = vec![0.0; rows];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &k in &filled {
                    let proj = dot(u.col(k), &e);
                    for (x, &uk) in e.iter_mut().zip(u.col(k)) {
                        *x -= proj * uk;
                    }
                }
            }
            let n = norm(&e);
            if n > 1e-8 {
                for (o, x) in u.col_mut(j).iter_mut().zip(e) {
                    *o = x / n;
                }
                filled.push(j);
                break;
            }
        }
    }
}

/// Square root `R` with `R Rᵀ = m` of a symmetric positive semi-definite
/// matrix. Works for singular `m`, unlike Cholesky.
pub fn psd_root(m: &Matrix) -> Result<Matrix> {
    check_symmetric(m)?;
    // For symmetric PSD m, m = U S Vᵀ implies m = (m mᵀ)^{1/2} = U S Uᵀ.
    let svd = thin_svd(m);
    let mut root = svd.u;
    for (j, &sj) in svd.s.iter().enumerate() {
        let r = sj.sqrt();
        root.col_mut(j).iter_mut().for_each(|x| *x *= r);
    }
    Ok(root)
}

/// Square root of a symmetric PSD matrix: the Cholesky factor when it
/// exists without jitter, otherwise the spectral root.
pub fn psd_factor(m: &Matrix) -> Result<Matrix> {
    match cholesky_exact(m, 0.0) {
        Ok(c) => Ok(c.lower),
        Err(Error::NotPositiveDefinite { .. }) => psd_root(m),
        Err(e) => Err(e),
    }
}

/// Root `R` (d × k) of the positive semi-definite matrix `R Rᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactor {
    root: Matrix,
}

impl LowRankFactor {
    pub fn new(root: Matrix) -> Result<Self> {
        if root.cols() > root.rows() {
            return Err(Error::DimMismatch(format!(
                "low-rank root of shape {:?} has more columns than rows",
                root.shape()
            )));
        }
        Ok(Self { root })
    }

    /// Rank-zero factor of dimension `d`.
    pub fn empty(d: usize) -> Self {
        Self {
            root: Matrix::zeros(d, 0),
        }
    }

    pub fn root(&self) -> &Matrix {
        &self.root
    }

    pub fn dim(&self) -> usize {
        self.root.rows()
    }

    pub fn rank(&self) -> usize {
        self.root.cols()
    }

    /// `R Rᵀ`; for tests and small oracles only.
    pub fn dense(&self) -> Matrix {
        self.root.matmul_t(&self.root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let g = random(n, n, seed);
        let mut m = g.t_matmul(&g);
        m.add_diag(1.0);
        m
    }

    fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).max_abs()
    }

    /// Log-determinant by partial-pivoting LU, independent of Cholesky.
    fn lu_logdet(m: &Matrix) -> (f64, f64) {
        let n = m.rows();
        let mut a = m.clone();
        let mut sign = 1.0;
        let mut acc = 0.0;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[(i, k)].abs().total_cmp(&a[(j, k)].abs()))
                .unwrap();
            if p != k {
                sign = -sign;
                for j in 0..n {
                    let t = a[(k, j)];
                    a[(k, j)] = a[(p, j)];
                    a[(p, j)] = t;
                }
            }
            let piv = a[(k, k)];
            if piv < 0.0 {
                sign = -sign;
            }
            acc += piv.abs().ln();
            for i in (k + 1)..n {
                let f = a[(i, k)] / piv;
                for j in k..n {
                    a[(i, j)] -= f * a[(k, j)];
                }
            }
        }
        (sign, acc)
    }

    #[test]
    fn cholesky_two_by_two_closed_form() {
        let m = Matrix::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]]);
        let c = cholesky(&m, 0.0).unwrap();
        let expected = Matrix::from_rows(&[&[2.0, 0.0], &[1.0, 2f64.sqrt()]]);
        assert!(max_diff(c.lower(), &expected) < 1e-15);
        assert_eq!(c.jitter(), 0.0);
    }

    #[test]
    fn cholesky_identity() {
        let c = cholesky(&Matrix::identity(3), 0.0).unwrap();
        assert_eq!(c.lower(), &Matrix::identity(3));
    }

    #[test]
    fn cholesky_random_spd_reconstructs() {
        let m = random_spd(20, 7);
        let c = cholesky(&m, 0.0).unwrap();
        assert!(max_diff(&c.reconstruct(), &m) / m.max_abs() < 1e-10);
    }

    #[test]
    fn cholesky_errors() {
        let m = Matrix::zeros(2, 3);
        assert!(matches!(cholesky(&m, 0.0), Err(Error::NonSquare { .. })));
        let neg = Matrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(
            cholesky(&neg, 0.0),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn cholesky_jitter_ladder_rescues_psd() {
        // rank-1 PSD matrix
        let m = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let c = cholesky(&m, 0.0).unwrap();
        assert!(c.jitter() > 0.0);
        let mut target = m.clone();
        target.add_diag(c.jitter());
        assert!(max_diff(&c.reconstruct(), &target) < 1e-12);
    }

    #[test]
    fn cholesky_solves() {
        let m = random_spd(6, 11);
        let c = cholesky(&m, 0.0).unwrap();
        let b: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let x = c.solve(&b);
        let r = m.matvec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-10);
        }
        let inv = c.inverse();
        assert!(max_diff(&inv.matmul(&m), &Matrix::identity(6)) < 1e-10);
        let d = c.inverse_diag();
        for i in 0..6 {
            assert!((d[i] - inv[(i, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_rank_one() {
        let b = [1.0, -2.0, 0.5];
        let mut m = Matrix::zeros(3, 3);
        m.rank1_update(1.0, &b, &b);
        let (u, s) = svd_topk(&m, 1).unwrap();
        let nb2 = dot(&b, &b);
        assert!((s[0] - nb2).abs() < 1e-12);
        let nb = nb2.sqrt();
        let cos = dot(u.col(0), &b) / nb;
        assert!((cos.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_degenerate_spectrum() {
        let (u, s) = svd_topk(&Matrix::identity(4), 2).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15 && (s[1] - 1.0).abs() < 1e-15);
        assert!(max_diff(&u.t_matmul(&u), &Matrix::identity(2)) < 1e-12);
    }

    #[test]
    fn svd_full_rank_reconstructs() {
        let m = random(30, 8, 3);
        let svd = thin_svd(&m);
        assert!(max_diff(&svd.reconstruct(), &m) < 1e-8);
        assert!(max_diff(&svd.u.t_matmul(&svd.u), &Matrix::identity(8)) < 1e-8);
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        let (u, _) = svd_topk(&m, 8).unwrap();
        assert!(max_diff(&u.t_matmul(&u), &Matrix::identity(8)) < 1e-8);
    }

    #[test]
    fn svd_wide_matrix() {
        let m = random(5, 12, 21);
        let svd = thin_svd(&m);
        assert_eq!(svd.u.shape(), (5, 5));
        assert_eq!(svd.v.shape(), (12, 5));
        assert!(max_diff(&svd.reconstruct(), &m) < 1e-10);
    }

    #[test]
    fn svd_rank_deficient_still_orthonormal() {
        let mut m = Matrix::zeros(6, 4);
        m.rank1_update(1.0, &[1.0, 2.0, 0.0, 0.0, 1.0, 3.0], &[1.0, 0.0, -1.0, 2.0]);
        let (u, s) = svd_topk(&m, 4).unwrap();
        assert!(s[1..].iter().all(|&x| x < 1e-12));
        assert!(max_diff(&u.t_matmul(&u), &Matrix::identity(4)) < 1e-10);
    }

    #[test]
    fn svd_k_too_large() {
        assert!(matches!(
            svd_topk(&Matrix::identity(3), 4),
            Err(Error::KTooLarge { .. })
        ));
    }

    #[test]
    fn svd_truncation_error_monotone() {
        let m = random(12, 9, 5);
        let mut last = f64::INFINITY;
        for k in 0..=9 {
            let svd = thin_svd(&m);
            let mut approx = Matrix::zeros(12, 9);
            for j in 0..k {
                approx.rank1_update(svd.s[j], svd.u.col(j), svd.v.col(j));
            }
            let err = m.sub(&approx).frobenius_norm();
            assert!(err <= last + 1e-12);
            last = err;
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn kron_identities() {
        let i2 = Matrix::identity(2);
        assert_eq!(kron(&i2, &i2).unwrap(), Matrix::identity(4));
        let m = random(3, 2, 4);
        let two = Matrix::from_rows(&[&[2.0]]);
        assert!(max_diff(&kron(&two, &m).unwrap(), &m.scale(2.0)) < 1e-15);
    }

    #[test]
    fn kron_vec_convention() {
        // vec(A X B) = (Bᵀ ⊗ A) vec(X)
        let a = random(3, 3, 1);
        let x = random(3, 3, 2);
        let b = random(3, 3, 3);
        let lhs = vec(&a.matmul(&x).matmul(&b));
        let rhs = kron(&b.transpose(), &a).unwrap().matvec(&vec(&x));
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn kron_guard() {
        let big = Matrix::zeros(100, 1);
        assert!(matches!(kron(&big, &big), Err(Error::DimTooLarge { .. })));
    }

    #[test]
    fn logdet_cases() {
        assert_eq!(logdet(&cholesky(&Matrix::identity(5), 0.0).unwrap()), 0.0);
        let e = std::f64::consts::E;
        let c = cholesky(&Matrix::from_diag(&[e, e]), 0.0).unwrap();
        assert!((logdet(&c) - 2.0).abs() < 1e-15);
        let m = random_spd(15, 9);
        let (sign, lu) = lu_logdet(&m);
        assert_eq!(sign, 1.0);
        assert!((logdet(&cholesky(&m, 0.0).unwrap()) - lu).abs() < 1e-10);
    }

    #[test]
    fn psd_root_of_singular_matrix() {
        let mut m = Matrix::zeros(4, 4);
        m.rank1_update(1.0, &[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]);
        m.rank1_update(0.5, &[0.0, 1.0, 0.0, -1.0], &[0.0, 1.0, 0.0, -1.0]);
        let r = psd_root(&m).unwrap();
        assert!(max_diff(&r.matmul_t(&r), &m) < 1e-12);
        let f = psd_factor(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cholesky_roundtrip(seed in 0u64..1000, n in 1usize..12) {
                let m = random_spd(n, seed);
                let c = cholesky(&m, 0.0).unwrap();
                prop_assert!(max_diff(&c.reconstruct(), &m) / m.max_abs() < 1e-9);
            }

            #[test]
            fn kron_mixed_product(seed in 0u64..1000) {
                let a = random(2, 3, seed);
                let b = random(3, 2, seed + 1);
                let c = random(3, 2, seed + 2);
                let d = random(2, 4, seed + 3);
                let lhs = kron(&a, &b).unwrap().matmul(&kron(&c, &d).unwrap());
                let rhs = kron(&a.matmul(&c), &b.matmul(&d)).unwrap();
                prop_assert!(max_diff(&lhs, &rhs) < 1e-10);
            }

            #[test]
            fn svd_reconstructs(seed in 0u64..1000, r in 1usize..10, c in 1usize..10) {
                let m = random(r, c, seed);
                let svd = thin_svd(&m);
                prop_assert!(max_diff(&svd.reconstruct(), &m) < 1e-8);
            }
        }
    }
}
