//! Dense real matrix kernel.
//!
//! Everything here targets desk-scale problems (dimension up to a few
//! dozen): row-major storage, LU with partial pivoting, cyclic Jacobi for
//! symmetric eigenproblems, Hessenberg + double-shift QR for general
//! spectra, and Lyapunov/Sylvester solvers that vectorize through the
//! Kronecker product and solve the dense linear system directly.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is numerically singular")]
    Singular,
    #[error("Kronecker pencil is numerically singular")]
    SingularPencil,
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("eigenvalue iteration did not converge within the sweep budget")]
    ConvergenceFailure,
}

pub type MatResult<T> = Result<T, MatError>;

/// Dense real matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Matrix { rows, cols, data: data.to_vec() }
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = entries[i];
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|a| a * c).collect() }
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions must agree");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.data[i * self.cols + k];
                if aik == 0.0 {
                    continue;
                }
                let row_b = &other.data[k * other.cols..(k + 1) * other.cols];
                let row_o = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    row_o[j] += aik * row_b[j];
                }
            }
        }
        out
    }

    /// out = A x.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += row[j] * x[j];
            }
            out[i] = acc;
        }
    }

    /// out += A x.
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += row[j] * x[j];
            }
            out[i] += acc;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, a| m.max(a.abs()))
    }

    pub fn trace(&self) -> f64 {
        assert!(self.is_square());
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self.get(i, j) - self.get(j, i)).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }

    pub fn symmetrized(&self) -> Matrix {
        assert!(self.is_square());
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, v);
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Copy of rows r0..r0+nr, cols c0..c0+nc.
    pub fn block(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Matrix {
        assert!(r0 + nr <= self.rows && c0 + nc <= self.cols);
        let mut out = Matrix::zeros(nr, nc);
        for i in 0..nr {
            for j in 0..nc {
                out.data[i * nc + j] = self.get(r0 + i, c0 + j);
            }
        }
        out
    }

    /// [[a, b], [c, d]] with conformable blocks.
    pub fn from_blocks(a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix) -> Matrix {
        assert_eq!(a.rows, b.rows);
        assert_eq!(c.rows, d.rows);
        assert_eq!(a.cols, c.cols);
        assert_eq!(b.cols, d.cols);
        let rows = a.rows + c.rows;
        let cols = a.cols + b.cols;
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..a.rows {
            for j in 0..a.cols {
                out.set(i, j, a.get(i, j));
            }
            for j in 0..b.cols {
                out.set(i, a.cols + j, b.get(i, j));
            }
        }
        for i in 0..c.rows {
            for j in 0..c.cols {
                out.set(a.rows + i, j, c.get(i, j));
            }
            for j in 0..d.cols {
                out.set(a.rows + i, a.cols + j, d.get(i, j));
            }
        }
        out
    }

    pub fn kron(&self, other: &Matrix) -> Matrix {
        let (m, n, p, q) = (self.rows, self.cols, other.rows, other.cols);
        let mut out = Matrix::zeros(m * p, n * q);
        for i in 0..m {
            for j in 0..n {
                let aij = self.get(i, j);
                if aij == 0.0 {
                    continue;
                }
                for k in 0..p {
                    for l in 0..q {
                        out.set(i * p + k, j * q + l, aij * other.get(k, l));
                    }
                }
            }
        }
        out
    }
}

/// Symmetric positive definite matrix, validated at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    /// Requires symmetry to 1e-12 relative and a successful Cholesky
    /// factorization (all pivots positive).
    pub fn new(m: Matrix) -> MatResult<Self> {
        if !m.is_square() {
            return Err(MatError::DimensionMismatch("SPD matrix must be square".into()));
        }
        if !m.is_symmetric(1e-12) {
            return Err(MatError::NotSymmetric);
        }
        let sym = m.symmetrized();
        if cholesky(&sym).is_none() {
            return Err(MatError::NotPositiveDefinite);
        }
        Ok(SpdMatrix(sym))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }
}

/// Lower-triangular Cholesky factor of a symmetric matrix, or None if a
/// pivot fails to be positive.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// LU factorization with partial pivoting.
pub struct LuFactor {
    lu: Matrix,
    perm: Vec<usize>,
    min_pivot: f64,
    max_pivot: f64,
}

impl LuFactor {
    pub fn new(a: &Matrix) -> MatResult<Self> {
        if !a.is_square() {
            return Err(MatError::DimensionMismatch("LU requires a square matrix".into()));
        }
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut min_pivot = f64::INFINITY;
        let mut max_pivot = 0.0_f64;
        for k in 0..n {
            let mut p = k;
            let mut best = lu.get(k, k).abs();
            for i in (k + 1)..n {
                let v = lu.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(MatError::Singular);
            }
            if p != k {
                for j in 0..n {
                    let t = lu.get(k, j);
                    lu.set(k, j, lu.get(p, j));
                    lu.set(p, j, t);
                }
                perm.swap(k, p);
            }
            let pivot = lu.get(k, k);
            min_pivot = min_pivot.min(pivot.abs());
            max_pivot = max_pivot.max(pivot.abs());
            for i in (k + 1)..n {
                let factor = lu.get(i, k) / pivot;
                lu.set(i, k, factor);
                if factor != 0.0 {
                    for j in (k + 1)..n {
                        let v = lu.get(i, j) - factor * lu.get(k, j);
                        lu.set(i, j, v);
                    }
                }
            }
        }
        Ok(LuFactor { lu, perm, min_pivot, max_pivot })
    }

    /// Ratio of extreme pivot magnitudes, a cheap singularity indicator.
    pub fn pivot_ratio(&self) -> f64 {
        if self.max_pivot == 0.0 {
            return 0.0;
        }
        self.min_pivot / self.max_pivot
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows();
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu.get(i, j) * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lu.get(i, j) * x[j];
            }
            x[i] = s / self.lu.get(i, i);
        }
        x
    }

    /// Solve A X = B column by column.
    pub fn solve_matrix(&self, b: &Matrix) -> Matrix {
        let n = self.lu.rows();
        assert_eq!(b.rows(), n);
        let mut out = Matrix::zeros(n, b.cols());
        let mut col = vec![0.0; n];
        for j in 0..b.cols() {
            for i in 0..n {
                col[i] = b.get(i, j);
            }
            let x = self.solve_vec(&col);
            for i in 0..n {
                out.set(i, j, x[i]);
            }
        }
        out
    }

    pub fn inverse(&self) -> Matrix {
        self.solve_matrix(&Matrix::identity(self.lu.rows()))
    }
}

pub fn solve_linear(a: &Matrix, b: &[f64]) -> MatResult<Vec<f64>> {
    Ok(LuFactor::new(a)?.solve_vec(b))
}

pub fn inverse(a: &Matrix) -> MatResult<Matrix> {
    Ok(LuFactor::new(a)?.inverse())
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

/// Eigenvalues (ascending) and orthonormal eigenvectors (columns) of a
/// symmetric matrix.
pub fn sym_eigen(a: &Matrix) -> MatResult<(Vec<f64>, Matrix)> {
    if !a.is_square() {
        return Err(MatError::DimensionMismatch("sym_eigen requires a square matrix".into()));
    }
    let n = a.rows();
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    if n == 1 {
        return Ok((vec![m.get(0, 0)], v));
    }
    let scale = m.max_abs().max(1.0);
    let tol = 1e-15 * scale;
    for _sweep in 0..200 {
        let mut off = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(m.get(i, j).abs());
            }
        }
        if off <= tol {
            let mut vals: Vec<(f64, usize)> = (0..n).map(|i| (m.get(i, i), i)).collect();
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut vec_sorted = Matrix::zeros(n, n);
            for (col, &(_, src)) in vals.iter().enumerate() {
                for r in 0..n {
                    vec_sorted.set(r, col, v.get(r, src));
                }
            }
            let eigs = vals.into_iter().map(|(val, _)| val).collect();
            return Ok((eigs, vec_sorted));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e15 {
                    1.0 / (2.0 * theta)
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Err(MatError::ConvergenceFailure)
}

/// Symmetric square root of a positive definite matrix.
///
/// Eigenvalues are clamped at 1e-14 * lambda_max before the square root;
/// any eigenvalue below -1e-10 * lambda_max is rejected.
pub fn spd_sqrt(p: &SpdMatrix) -> MatResult<Matrix> {
    sqrt_of_symmetric(p.as_matrix())
}

/// Same clamping policy as `spd_sqrt` but accepts a raw symmetric matrix
/// (used for positive semidefinite noise covariances of degenerate models).
pub fn sqrt_of_symmetric(m: &Matrix) -> MatResult<Matrix> {
    if !m.is_symmetric(1e-10) {
        return Err(MatError::NotSymmetric);
    }
    let (vals, vecs) = sym_eigen(m)?;
    let lam_max = vals.iter().fold(0.0_f64, |acc, &v| acc.max(v));
    if lam_max <= 0.0 {
        // Exactly-degenerate covariances (zero noise) root to zero.
        let lam_min = vals.iter().fold(0.0_f64, |acc, &v| acc.min(v));
        if lam_min >= -1e-12 * m.max_abs().max(1.0) {
            return Ok(Matrix::zeros(m.rows(), m.cols()));
        }
        return Err(MatError::NotPositiveDefinite);
    }
    let floor = 1e-14 * lam_max;
    let reject = -1e-10 * lam_max;
    let mut roots = Vec::with_capacity(vals.len());
    for &v in &vals {
        if v < reject {
            return Err(MatError::NotPositiveDefinite);
        }
        roots.push(v.max(floor).sqrt());
    }
    Ok(reassemble(&vecs, &roots).symmetrized())
}

/// P^{-1/2} from the same eigendecomposition used by `spd_sqrt`.
pub fn spd_inv_sqrt(p: &SpdMatrix) -> MatResult<Matrix> {
    let (vals, vecs) = sym_eigen(p.as_matrix())?;
    let lam_max = vals.iter().fold(0.0_f64, |acc, &v| acc.max(v));
    if lam_max <= 0.0 || vals.iter().any(|&v| v < -1e-10 * lam_max) {
        return Err(MatError::NotPositiveDefinite);
    }
    let floor = 1e-14 * lam_max;
    let inv_roots: Vec<f64> = vals.iter().map(|&v| 1.0 / v.max(floor).sqrt()).collect();
    Ok(reassemble(&vecs, &inv_roots).symmetrized())
}

fn reassemble(vecs: &Matrix, diag: &[f64]) -> Matrix {
    let n = vecs.rows();
    let mut scaled = vecs.clone();
    for j in 0..n {
        for i in 0..n {
            scaled.set(i, j, vecs.get(i, j) * diag[j]);
        }
    }
    scaled.matmul(&vecs.transpose())
}

/// Largest singular value.
pub fn spectral_norm(a: &Matrix) -> f64 {
    let gram = if a.rows() >= a.cols() { a.transpose().matmul(a) } else { a.matmul(&a.transpose()) };
    let (vals, _) = sym_eigen(&gram).expect("Jacobi on a Gram matrix converges");
    vals.last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

/// Weighted operator norm ||A||_P = ||P^{1/2} A P^{-1/2}||_2.
pub fn weighted_norm(a: &Matrix, p: &SpdMatrix) -> MatResult<f64> {
    if !a.is_square() || a.rows() != p.dim() {
        return Err(MatError::DimensionMismatch(format!(
            "weighted_norm: A is {}x{}, P is {}x{}",
            a.rows(),
            a.cols(),
            p.dim(),
            p.dim()
        )));
    }
    let s = spd_sqrt(p)?;
    let s_inv = spd_inv_sqrt(p)?;
    Ok(spectral_norm(&s.matmul(a).matmul(&s_inv)))
}

/// Cross norm ||C||_{P_left,P_right} = ||P_right^{1/2} C P_left^{-1/2}||_2
/// for C mapping the left-weighted space into the right-weighted space.
pub fn cross_weighted_norm(c: &Matrix, p_left: &SpdMatrix, p_right: &SpdMatrix) -> MatResult<f64> {
    if c.rows() != p_right.dim() || c.cols() != p_left.dim() {
        return Err(MatError::DimensionMismatch(format!(
            "cross_weighted_norm: C is {}x{}, weights are {} (right) and {} (left)",
            c.rows(),
            c.cols(),
            p_right.dim(),
            p_left.dim()
        )));
    }
    let s_right = spd_sqrt(p_right)?;
    let s_left_inv = spd_inv_sqrt(p_left)?;
    Ok(spectral_norm(&s_right.matmul(c).matmul(&s_left_inv)))
}

// ---------------------------------------------------------------------------
// General (nonsymmetric) eigenvalues: Householder Hessenberg + double-shift QR
// ---------------------------------------------------------------------------

const QR_SWEEP_BUDGET: usize = 10_000;

/// Eigenvalues of a square real matrix as (re, im) pairs, unordered.
pub fn eigenvalues(a: &Matrix) -> MatResult<Vec<(f64, f64)>> {
    if !a.is_square() {
        return Err(MatError::DimensionMismatch("eigenvalues require a square matrix".into()));
    }
    let n = a.rows();
    if n == 1 {
        return Ok(vec![(a.get(0, 0), 0.0)]);
    }
    if a.is_symmetric(1e-13) {
        let (vals, _) = sym_eigen(a)?;
        return Ok(vals.into_iter().map(|v| (v, 0.0)).collect());
    }
    let mut h = hessenberg(a);
    hqr(&mut h)
}

/// Minimum real part over the spectrum of A.
pub fn spectral_abscissa(a: &Matrix) -> MatResult<f64> {
    let eigs = eigenvalues(a)?;
    Ok(eigs.into_iter().map(|(re, _)| re).fold(f64::INFINITY, f64::min))
}

fn hessenberg(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut h = a.clone();
    let mut v = vec![0.0; n];
    for k in 0..n.saturating_sub(2) {
        let mut norm = 0.0;
        for i in (k + 1)..n {
            norm += h.get(i, k) * h.get(i, k);
        }
        norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if h.get(k + 1, k) >= 0.0 { -norm } else { norm };
        let mut vnorm2 = 0.0;
        for i in (k + 1)..n {
            v[i] = h.get(i, k);
            if i == k + 1 {
                v[i] -= alpha;
            }
            vnorm2 += v[i] * v[i];
        }
        if vnorm2 == 0.0 {
            continue;
        }
        // H <- (I - 2vv^T/v^Tv) H (I - 2vv^T/v^Tv)
        for j in k..n {
            let mut dot = 0.0;
            for i in (k + 1)..n {
                dot += v[i] * h.get(i, j);
            }
            let f = 2.0 * dot / vnorm2;
            for i in (k + 1)..n {
                let val = h.get(i, j) - f * v[i];
                h.set(i, j, val);
            }
        }
        for i in 0..n {
            let mut dot = 0.0;
            for j in (k + 1)..n {
                dot += h.get(i, j) * v[j];
            }
            let f = 2.0 * dot / vnorm2;
            for j in (k + 1)..n {
                let val = h.get(i, j) - f * v[j];
                h.set(i, j, val);
            }
        }
        for i in (k + 2)..n {
            h.set(i, k, 0.0);
        }
    }
    h
}

/// Double-shift QR on an upper Hessenberg matrix (EISPACK hqr lineage).
fn hqr(h: &mut Matrix) -> MatResult<Vec<(f64, f64)>> {
    let n = h.rows();
    let mut eigs: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += h.get(i, j).abs();
        }
    }
    if anorm == 0.0 {
        return Ok(vec![(0.0, 0.0); n]);
    }
    let eps = f64::EPSILON;
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    let mut sweeps = 0usize;
    while nn >= 0 {
        let mut its = 0;
        loop {
            // Look for a negligible subdiagonal element.
            let mut l = nn;
            while l >= 1 {
                let s = h.get((l - 1) as usize, (l - 1) as usize).abs()
                    + h.get(l as usize, l as usize).abs();
                let s = if s == 0.0 { anorm } else { s };
                if h.get(l as usize, (l - 1) as usize).abs() <= eps * s {
                    break;
                }
                l -= 1;
            }
            let mut x = h.get(nn as usize, nn as usize);
            if l == nn {
                eigs.push((x + t, 0.0));
                nn -= 1;
                break;
            }
            let mut y = h.get((nn - 1) as usize, (nn - 1) as usize);
            let mut w =
                h.get(nn as usize, (nn - 1) as usize) * h.get((nn - 1) as usize, nn as usize);
            if l == nn - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    let z = p + if p >= 0.0 { z } else { -z };
                    eigs.push((x + z, 0.0));
                    if z != 0.0 {
                        eigs.push((x - w / z, 0.0));
                    } else {
                        eigs.push((x + z, 0.0));
                    }
                } else {
                    eigs.push((x + p, z));
                    eigs.push((x + p, -z));
                }
                nn -= 2;
                break;
            }
            sweeps += 1;
            if sweeps > QR_SWEEP_BUDGET {
                return Err(MatError::ConvergenceFailure);
            }
            if its == 10 || its == 20 {
                // Exceptional shift.
                t += x;
                for i in 0..=nn as usize {
                    let v = h.get(i, i) - x;
                    h.set(i, i, v);
                }
                let s = h.get(nn as usize, (nn - 1) as usize).abs()
                    + h.get((nn - 1) as usize, (nn - 2) as usize).abs();
                y = 0.75 * s;
                x = y;
                w = -0.4375 * s * s;
            }
            its += 1;
            if its > 60 {
                return Err(MatError::ConvergenceFailure);
            }
            // Form shift and look for two consecutive small subdiagonals.
            let mut m = nn - 2;
            let (mut p, mut q, mut r) = (0.0, 0.0, 0.0);
            while m >= l {
                let z = h.get(m as usize, m as usize);
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / h.get((m + 1) as usize, m as usize)
                    + h.get(m as usize, (m + 1) as usize);
                q = h.get((m + 1) as usize, (m + 1) as usize) - z - rr - ss;
                r = h.get((m + 2) as usize, (m + 1) as usize);
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = h.get(m as usize, (m - 1) as usize).abs() * (q.abs() + r.abs());
                let v = p.abs()
                    * (h.get((m - 1) as usize, (m - 1) as usize).abs()
                        + z.abs()
                        + h.get((m + 1) as usize, (m + 1) as usize).abs());
                if u <= eps * v {
                    break;
                }
                m -= 1;
            }
            for i in (m + 2)..=nn {
                h.set(i as usize, (i - 2) as usize, 0.0);
                if i > m + 2 {
                    h.set(i as usize, (i - 3) as usize, 0.0);
                }
            }
            // Double QR step over rows l..nn.
            for k in m..=(nn - 1) {
                if k != m {
                    p = h.get(k as usize, (k - 1) as usize);
                    q = h.get((k + 1) as usize, (k - 1) as usize);
                    r = if k != nn - 1 { h.get((k + 2) as usize, (k - 1) as usize) } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s0 = (p * p + q * q + r * r).sqrt();
                let s = if p >= 0.0 { s0 } else { -s0 };
                if s == 0.0 {
                    continue;
                }
                if k == m {
                    if l != m {
                        let v = -h.get(k as usize, (k - 1) as usize);
                        h.set(k as usize, (k - 1) as usize, v);
                    }
                } else {
                    h.set(k as usize, (k - 1) as usize, -s * x);
                }
                p += s;
                x = p / s;
                y = q / s;
                let z = r / s;
                q /= p;
                r /= p;
                for j in (k as usize)..=(nn as usize) {
                    let mut pp = h.get(k as usize, j) + q * h.get((k + 1) as usize, j);
                    if k != nn - 1 {
                        pp += r * h.get((k + 2) as usize, j);
                        let v = h.get((k + 2) as usize, j) - pp * z;
                        h.set((k + 2) as usize, j, v);
                    }
                    let v1 = h.get((k + 1) as usize, j) - pp * y;
                    h.set((k + 1) as usize, j, v1);
                    let v0 = h.get(k as usize, j) - pp * x;
                    h.set(k as usize, j, v0);
                }
                let imax = if nn < k + 3 { nn } else { k + 3 };
                for i in (l as usize)..=(imax as usize) {
                    let mut pp = x * h.get(i, k as usize) + y * h.get(i, (k + 1) as usize);
                    if k != nn - 1 {
                        pp += z * h.get(i, (k + 2) as usize);
                        let v = h.get(i, (k + 2) as usize) - pp * r;
                        h.set(i, (k + 2) as usize, v);
                    }
                    let v1 = h.get(i, (k + 1) as usize) - pp * q;
                    h.set(i, (k + 1) as usize, v1);
                    let v0 = h.get(i, k as usize) - pp;
                    h.set(i, k as usize, v0);
                }
            }
        }
    }
    Ok(eigs)
}

// ---------------------------------------------------------------------------
// Lyapunov / Sylvester via Kronecker vectorization
// ---------------------------------------------------------------------------

const PENCIL_PIVOT_FLOOR: f64 = 1e-14;

/// Solve A X + X A^T = Q for symmetric Q by LU on I (x) A + A (x) I.
///
/// All residual tolerances downstream are relative to max(1, ||Q||_F).
pub fn solve_lyapunov(a: &Matrix, q: &Matrix) -> MatResult<Matrix> {
    if !a.is_square() || !q.is_square() || a.rows() != q.rows() {
        return Err(MatError::DimensionMismatch(format!(
            "solve_lyapunov: A is {}x{}, Q is {}x{}",
            a.rows(),
            a.cols(),
            q.rows(),
            q.cols()
        )));
    }
    if !q.is_symmetric(1e-9) {
        return Err(MatError::NotSymmetric);
    }
    let n = a.rows();
    let eye = Matrix::identity(n);
    let pencil = eye.kron(a).add(&a.kron(&eye));
    let x = solve_vectorized(&pencil, q, n, n)?;
    Ok(x.symmetrized())
}

/// Solve A X + X B = Q by LU on I (x) A + B^T (x) I.
pub fn solve_sylvester(a: &Matrix, b: &Matrix, q: &Matrix) -> MatResult<Matrix> {
    if !a.is_square() || !b.is_square() {
        return Err(MatError::DimensionMismatch("solve_sylvester: A and B must be square".into()));
    }
    let (m, n) = (a.rows(), b.rows());
    if q.rows() != m || q.cols() != n {
        return Err(MatError::DimensionMismatch(format!(
            "solve_sylvester: Q is {}x{}, expected {}x{}",
            q.rows(),
            q.cols(),
            m,
            n
        )));
    }
    let pencil = Matrix::identity(n).kron(a).add(&b.transpose().kron(&Matrix::identity(m)));
    solve_vectorized(&pencil, q, m, n)
}

fn solve_vectorized(pencil: &Matrix, q: &Matrix, m: usize, n: usize) -> MatResult<Matrix> {
    let lu = match LuFactor::new(pencil) {
        Ok(f) => f,
        Err(MatError::Singular) => return Err(MatError::SingularPencil),
        Err(e) => return Err(e),
    };
    if lu.pivot_ratio() < PENCIL_PIVOT_FLOOR {
        return Err(MatError::SingularPencil);
    }
    // Column-major stacking: vec(X)[j*m + i] = X[i][j].
    let mut rhs = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            rhs[j * m + i] = q.get(i, j);
        }
    }
    let sol = lu.solve_vec(&rhs);
    let mut x = Matrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            x.set(i, j, sol[j * m + i]);
        }
    }
    if !x.all_finite() {
        return Err(MatError::SingularPencil);
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Small vector helpers shared by the iteration engine
// ---------------------------------------------------------------------------

pub fn vec_norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn vec_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn vec_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn vec_scale(a: &[f64], c: f64) -> Vec<f64> {
    a.iter().map(|x| c * x).collect()
}

/// y += c * x
pub fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn residual_lyapunov(a: &Matrix, x: &Matrix, q: &Matrix) -> f64 {
        a.matmul(x).add(&x.matmul(&a.transpose())).sub(q).frobenius_norm()
    }

    #[test]
    fn lyapunov_scalar() {
        let a = Matrix::from_rows(1, 1, &[2.0]);
        let q = Matrix::from_rows(1, 1, &[4.0]);
        let x = solve_lyapunov(&a, &q).unwrap();
        assert_close(x.get(0, 0), 1.0, 1e-14);
    }

    #[test]
    fn lyapunov_diagonal() {
        let a = Matrix::diag(&[1.0, 2.0]);
        let q = Matrix::identity(2);
        let x = solve_lyapunov(&a, &q).unwrap();
        assert_close(x.get(0, 0), 0.5, 1e-14);
        assert_close(x.get(1, 1), 0.25, 1e-14);
        assert_close(x.get(0, 1), 0.0, 1e-14);
    }

    #[test]
    fn lyapunov_random_residual() {
        // A with positive-real-part spectrum, Q = M^T M + I.
        let a = Matrix::from_rows(3, 3, &[1.5, 0.3, -0.2, 0.1, 0.9, 0.4, -0.3, 0.2, 1.8]);
        let m = Matrix::from_rows(3, 3, &[0.2, -1.0, 0.5, 0.7, 0.1, -0.4, 0.3, 0.6, 0.9]);
        let q = m.transpose().matmul(&m).add(&Matrix::identity(3));
        let x = solve_lyapunov(&a, &q).unwrap();
        let rel = residual_lyapunov(&a, &x, &q) / q.frobenius_norm().max(1.0);
        assert!(rel <= 1e-10, "residual {rel}");
        assert!(x.is_symmetric(1e-10));
    }

    #[test]
    fn lyapunov_rejects_singular_pencil() {
        // A and -A^T share the eigenvalue 0.
        let a = Matrix::from_rows(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let q = Matrix::identity(2);
        assert!(matches!(solve_lyapunov(&a, &q), Err(MatError::SingularPencil)));
    }

    #[test]
    fn sylvester_scalars_and_identity() {
        let one = Matrix::from_rows(1, 1, &[1.0]);
        let q = Matrix::from_rows(1, 1, &[2.0]);
        let x = solve_sylvester(&one, &one, &q).unwrap();
        assert_close(x.get(0, 0), 1.0, 1e-14);

        let i2 = Matrix::identity(2);
        let x = solve_sylvester(&i2, &i2, &i2.scale(2.0)).unwrap();
        assert!(x.sub(&i2).frobenius_norm() < 1e-13);
    }

    #[test]
    fn sylvester_rectangular_residual() {
        let a = Matrix::from_rows(2, 2, &[1.2, 0.4, -0.1, 0.8]);
        let b = Matrix::from_rows(3, 3, &[0.9, 0.2, 0.0, -0.3, 1.4, 0.1, 0.2, 0.0, 1.1]);
        let q = Matrix::from_rows(2, 3, &[0.5, -0.2, 0.9, 1.1, 0.3, -0.7]);
        let x = solve_sylvester(&a, &b, &q).unwrap();
        let res = a.matmul(&x).add(&x.matmul(&b)).sub(&q).frobenius_norm();
        assert!(res <= 1e-10 * q.frobenius_norm().max(1.0));
    }

    #[test]
    fn spd_sqrt_identity_and_diag() {
        let s = spd_sqrt(&SpdMatrix::new(Matrix::identity(3)).unwrap()).unwrap();
        assert!(s.sub(&Matrix::identity(3)).frobenius_norm() < 1e-12);

        let p = SpdMatrix::new(Matrix::diag(&[4.0, 9.0])).unwrap();
        let s = spd_sqrt(&p).unwrap();
        assert_close(s.get(0, 0), 2.0, 1e-12);
        assert_close(s.get(1, 1), 3.0, 1e-12);
    }

    #[test]
    fn spd_sqrt_random_reconstructs() {
        let m = Matrix::from_rows(
            4,
            4,
            &[
                0.8, 0.2, -0.5, 0.1, 0.3, 1.1, 0.4, -0.2, -0.6, 0.5, 0.9, 0.3, 0.2, -0.1, 0.7, 1.3,
            ],
        );
        let p_raw = m.transpose().matmul(&m).add(&Matrix::identity(4));
        let p = SpdMatrix::new(p_raw.clone()).unwrap();
        let s = spd_sqrt(&p).unwrap();
        let err = s.matmul(&s).sub(&p_raw).frobenius_norm();
        assert!(err <= 1e-10 * p_raw.frobenius_norm());
    }

    #[test]
    fn spd_rejects_indefinite() {
        let m = Matrix::diag(&[1.0, -1.0]);
        assert!(matches!(SpdMatrix::new(m), Err(MatError::NotPositiveDefinite)));
    }

    #[test]
    fn weighted_norm_cases() {
        let p = SpdMatrix::new(Matrix::diag(&[1.0, 4.0])).unwrap();
        assert_close(weighted_norm(&Matrix::identity(2), &p).unwrap(), 1.0, 1e-12);

        let a = Matrix::from_rows(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let pi = SpdMatrix::new(Matrix::identity(2)).unwrap();
        assert_close(weighted_norm(&a, &pi).unwrap(), spectral_norm(&a), 1e-12);

        // Diagonal case: P^{1/2} A P^{-1/2} = A for diagonal A, so the norm
        // is max |a_ii| = 3.
        let a = Matrix::diag(&[2.0, 3.0]);
        let p = SpdMatrix::new(Matrix::diag(&[1.0, 4.0])).unwrap();
        assert_close(weighted_norm(&a, &p).unwrap(), 3.0, 1e-12);
    }

    #[test]
    fn weighted_norm_scale_invariance() {
        let a = Matrix::from_rows(2, 2, &[0.3, -1.2, 0.8, 0.4]);
        let base = Matrix::from_rows(2, 2, &[2.0, 0.5, 0.5, 1.5]);
        let p1 = SpdMatrix::new(base.clone()).unwrap();
        let p2 = SpdMatrix::new(base.scale(7.3)).unwrap();
        let n1 = weighted_norm(&a, &p1).unwrap();
        let n2 = weighted_norm(&a, &p2).unwrap();
        assert_close(n1, n2, 1e-12 * n1.max(1.0));
    }

    #[test]
    fn cross_weighted_norm_cases() {
        let c = Matrix::zeros(2, 3);
        let pl = SpdMatrix::new(Matrix::identity(3)).unwrap();
        let pr = SpdMatrix::new(Matrix::identity(2)).unwrap();
        assert_close(cross_weighted_norm(&c, &pl, &pr).unwrap(), 0.0, 1e-15);

        let c = Matrix::from_rows(2, 3, &[1.0, -0.4, 0.2, 0.7, 0.9, -1.1]);
        assert_close(cross_weighted_norm(&c, &pl, &pr).unwrap(), spectral_norm(&c), 1e-12);

        // Against the explicitly formed weighted product.
        let pl = SpdMatrix::new(Matrix::diag(&[1.0, 2.0, 5.0])).unwrap();
        let pr = SpdMatrix::new(Matrix::diag(&[3.0, 0.5])).unwrap();
        let formed = spd_sqrt(&pr).unwrap().matmul(&c).matmul(&spd_inv_sqrt(&pl).unwrap());
        assert_close(
            cross_weighted_norm(&c, &pl, &pr).unwrap(),
            spectral_norm(&formed),
            1e-12,
        );
    }

    #[test]
    fn spectral_abscissa_cases() {
        assert_close(spectral_abscissa(&Matrix::diag(&[1.0, 2.0, 3.0])).unwrap(), 1.0, 1e-10);

        let rot = Matrix::from_rows(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert_close(spectral_abscissa(&rot).unwrap(), 0.0, 1e-10);

        // Companion matrix of (z - 0.5)(z - 2) = z^2 - 2.5 z + 1.
        let comp = Matrix::from_rows(2, 2, &[0.0, -1.0, 1.0, 2.5]);
        assert_close(spectral_abscissa(&comp).unwrap(), 0.5, 1e-8);
    }

    #[test]
    fn eigenvalues_complex_pair() {
        // Spectrum {1, 2 +- i}.
        let a = Matrix::from_rows(3, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0, -1.0, 2.0]);
        let mut eigs = eigenvalues(&a).unwrap();
        eigs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
        assert_close(eigs[0].0, 1.0, 1e-9);
        assert_close(eigs[1].0, 2.0, 1e-9);
        assert_close(eigs[1].1.abs(), 1.0, 1e-9);
        assert_close(eigs[2].1 + eigs[1].1, 0.0, 1e-9);
    }

    #[test]
    fn lu_solve_and_inverse() {
        let a = Matrix::from_rows(3, 3, &[2.0, 1.0, 0.5, -0.3, 1.7, 0.2, 0.8, -0.4, 2.2]);
        let b = vec![1.0, -2.0, 0.5];
        let x = solve_linear(&a, &b).unwrap();
        let mut back = vec![0.0; 3];
        a.matvec_into(&x, &mut back);
        for i in 0..3 {
            assert_close(back[i], b[i], 1e-12);
        }
        let inv = inverse(&a).unwrap();
        assert!(a.matmul(&inv).sub(&Matrix::identity(3)).frobenius_norm() < 1e-12);
    }

    #[test]
    fn sym_eigen_orthogonality() {
        let m = Matrix::from_rows(3, 3, &[2.0, -1.0, 0.3, -1.0, 1.5, 0.2, 0.3, 0.2, 0.9]);
        let (vals, vecs) = sym_eigen(&m).unwrap();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let vtv = vecs.transpose().matmul(&vecs);
        assert!(vtv.sub(&Matrix::identity(3)).frobenius_norm() < 1e-12);
        let recon = vecs.matmul(&Matrix::diag(&vals)).matmul(&vecs.transpose());
        assert!(recon.sub(&m.symmetrized()).frobenius_norm() < 1e-12);
    }
}
