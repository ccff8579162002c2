//! Dense linear algebra for small symmetric problems.
//!
//! Everything here works on row-major `f64` matrices. The eigensolver is a
//! cyclic Jacobi iteration, which is accurate to working precision for the
//! symmetric positive semidefinite covariance matrices the trainer builds
//! (at most a few hundred rows).

use std::fmt;

use crate::error::{Error, Result};

/// Default relative tolerance below which an eigenvalue counts as zero.
pub const DEFAULT_REL_TOL: f64 = 1e-8;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_OFF_TOL: f64 = 1e-12;
const NEGATIVE_EIG_REL_TOL: f64 = 1e-10;

/// Row-major real matrix.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotFinite);
        }
        Ok(Self { rows, cols, data })
    }

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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    /// Builds a matrix from a closure over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "t_matmul {}x{}ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "matmul_t {}x{} by {}x{}ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product `⟨self, other⟩ = Σ self_ij · other_ij`.
    pub fn frobenius_inner(&self, other: &Self) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrized(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let n = self.rows;
        Ok(Self::from_fn(n, n, |i, j| 0.5 * (self.get(i, j) + self.get(j, i))))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct Spectrum {
    /// Sorted non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the unit eigenvector for `eigenvalues[i]`.
    pub eigenvectors: DenseMatrix,
}

impl Spectrum {
    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// Reassembles `Q diag(λ) Qᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let q = &self.eigenvectors;
        let n = q.rows();
        DenseMatrix::from_fn(n, n, |i, j| {
            self.eigenvalues
                .iter()
                .enumerate()
                .map(|(k, l)| q.get(i, k) * l * q.get(j, k))
                .sum()
        })
    }

    /// `Σ q_k q_kᵀ` over the selected eigenvector columns.
    fn outer_sum(&self, keep: impl Fn(usize) -> bool) -> DenseMatrix {
        let q = &self.eigenvectors;
        let n = q.rows();
        let cols: Vec<usize> = (0..q.cols()).filter(|k| keep(*k)).collect();
        let mut p = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = cols.iter().map(|&k| q.get(i, k) * q.get(j, k)).sum();
                p.set(i, j, v);
                p.set(j, i, v);
            }
        }
        p
    }
}

/// Symmetric eigendecomposition of a positive semidefinite matrix by cyclic
/// Jacobi rotations.
///
/// The input is symmetrized first. Eigenvalues slightly below zero (within
/// `1e-10 · λ_max`) are treated as rounding noise and clamped to zero; more
/// negative ones mean the input is not PSD.
pub fn sym_eig(m: &DenseMatrix) -> Result<Spectrum> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    if !m.is_finite() {
        return Err(Error::NotFinite);
    }
    let n = m.rows();
    let mut a = m.symmetrized()?;
    let mut v = DenseMatrix::identity(n);
    let target = JACOBI_REL_OFF_TOL * a.frobenius_norm();

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > target {
        return Err(Error::EigFailure {
            sweeps: JACOBI_MAX_SWEEPS,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps equal eigenvalues in their original (axis) order.
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));

    let lambda_max = order.first().map_or(0.0, |&i| a.get(i, i)).max(0.0);
    let mut eigenvalues = Vec::with_capacity(n);
    for &i in &order {
        let l = a.get(i, i);
        if l < -NEGATIVE_EIG_REL_TOL * lambda_max || (lambda_max == 0.0 && l < 0.0) {
            return Err(Error::NotPositiveSemidefinite {
                eigenvalue: l,
                max: lambda_max,
            });
        }
        eigenvalues.push(l.max(0.0));
    }
    let eigenvectors = DenseMatrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j) * a.get(i, j);
            }
        }
    }
    s.sqrt()
}

/// One symmetric Schur rotation annihilating `a[p][q]`, accumulated into `v`.
fn rotate(a: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize) {
    let apq = a.get(p, q);
    if apq == 0.0 {
        return;
    }
    let n = a.rows();
    let tau = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;

    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

/// Number of eigenvalues strictly above `rel_tol · λ_max`.
pub fn numerical_rank(s: &Spectrum, rel_tol: f64) -> usize {
    let lambda_max = s.max_eigenvalue();
    if lambda_max <= 0.0 {
        return 0;
    }
    s.eigenvalues
        .iter()
        .filter(|&&l| l > rel_tol * lambda_max)
        .count()
}

/// Orthogonal projector onto the numerical null space of a PSD matrix.
pub fn null_projector(m: &DenseMatrix, rel_tol: f64) -> Result<DenseMatrix> {
    let s = sym_eig(m)?;
    Ok(null_projector_from(&s, rel_tol))
}

/// Same as [`null_projector`] for an already factored matrix.
pub fn null_projector_from(s: &Spectrum, rel_tol: f64) -> DenseMatrix {
    let n = s.eigenvalues.len();
    let lambda_max = s.max_eigenvalue();
    if lambda_max <= 0.0 {
        return DenseMatrix::identity(n);
    }
    let cut = rel_tol * lambda_max;
    s.outer_sum(|k| s.eigenvalues[k] <= cut)
}

/// Projector onto the complement of the leading principal subspace holding
/// at least `energy` of the spectrum's total mass.
///
/// This is the approximate-null-space construction used by SVD-truncation
/// baselines: directions outside the kept subspace are treated as free even
/// when the matrix is not actually zero along them.
pub fn lowrank_truncation_projector(m: &DenseMatrix, energy: f64) -> Result<DenseMatrix> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "energy must be in (0, 1], got {energy}"
        )));
    }
    let s = sym_eig(m)?;
    let n = s.eigenvalues.len();
    let total: f64 = s.eigenvalues.iter().sum();
    if total <= 0.0 {
        return Ok(DenseMatrix::identity(n));
    }
    let mut kept = 0;
    let mut acc = 0.0;
    for l in &s.eigenvalues {
        if acc >= energy * total {
            break;
        }
        acc += l;
        kept += 1;
    }
    let kept_proj = s.outer_sum(|k| k < kept);
    DenseMatrix::identity(n).sub(&kept_proj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &DenseMatrix, b: &DenseMatrix, tol: f64) {
        let d = a.sub(b).unwrap().max_abs();
        assert!(d <= tol, "max diff {d:e} > {tol:e}\n{a:?}\n{b:?}");
    }

    #[test]
    fn new_rejects_non_finite_and_bad_length() {
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NotFinite)
        ));
        assert!(matches!(
            DenseMatrix::new(2, 2, vec![1.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn products_agree() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 2.0], vec![-1.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[-1.0, 7.0, 0.5, 16.0]);
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), ab);
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), ab);
    }

    #[test]
    fn eig_of_diagonal_is_itself() {
        let s = sym_eig(&DenseMatrix::diag(&[2.0, 0.0])).unwrap();
        assert_eq!(s.eigenvalues, vec![2.0, 0.0]);
        assert_eq!(s.eigenvectors, DenseMatrix::identity(2));
    }

    #[test]
    fn eig_of_all_ones_2x2() {
        // characteristic polynomial λ² − 2λ = 0
        let m = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let s = sym_eig(&m).unwrap();
        assert!((s.eigenvalues[0] - 2.0).abs() < 1e-14);
        assert!(s.eigenvalues[1].abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let q0 = s.eigenvectors.column(0);
        let q1 = s.eigenvectors.column(1);
        assert!((q0[0].abs() - r).abs() < 1e-14 && (q0[0] - q0[1]).abs() < 1e-14);
        assert!((q1[0].abs() - r).abs() < 1e-14 && (q1[0] + q1[1]).abs() < 1e-14);
    }

    #[test]
    fn eig_of_zero_matrix() {
        let s = sym_eig(&DenseMatrix::zeros(3, 3)).unwrap();
        assert_eq!(s.eigenvalues, vec![0.0; 3]);
        assert_eq!(s.eigenvectors, DenseMatrix::identity(3));
    }

    #[test]
    fn eig_errors() {
        assert!(matches!(
            sym_eig(&DenseMatrix::zeros(2, 3)),
            Err(Error::NotSquare { .. })
        ));
        let neg = DenseMatrix::diag(&[1.0, -0.5]);
        assert!(matches!(
            sym_eig(&neg),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
        // rounding-level negatives are clamped
        let s = sym_eig(&DenseMatrix::diag(&[1.0, -1e-13])).unwrap();
        assert_eq!(s.eigenvalues[1], 0.0);
    }

    #[test]
    fn rank_examples() {
        let spec = |ev: Vec<f64>| Spectrum {
            eigenvectors: DenseMatrix::identity(ev.len()),
            eigenvalues: ev,
        };
        assert_eq!(numerical_rank(&spec(vec![2.0, 0.0]), 1e-8), 1);
        assert_eq!(numerical_rank(&spec(vec![0.0, 0.0, 0.0]), 1e-8), 0);
        assert_eq!(numerical_rank(&spec(vec![1.0, 1e-12, 0.0]), 1e-8), 1);
    }

    #[test]
    fn null_projector_examples() {
        let p = null_projector(&DenseMatrix::diag(&[2.0, 0.0, 0.0]), 1e-8).unwrap();
        assert_close(&p, &DenseMatrix::diag(&[0.0, 1.0, 1.0]), 1e-15);

        let m = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let p = null_projector(&m, 1e-8).unwrap();
        let expected =
            DenseMatrix::from_rows(&[vec![0.5, -0.5], vec![-0.5, 0.5]]).unwrap();
        assert_close(&p, &expected, 1e-14);

        let p = null_projector(&DenseMatrix::zeros(3, 3), 1e-8).unwrap();
        assert_eq!(p, DenseMatrix::identity(3));
    }

    #[test]
    fn truncation_projector_examples() {
        let p = lowrank_truncation_projector(&DenseMatrix::diag(&[4.0, 1.0, 0.0]), 0.79).unwrap();
        assert_close(&p, &DenseMatrix::diag(&[0.0, 1.0, 1.0]), 1e-15);

        let m = DenseMatrix::diag(&[2.0, 1.0, 0.0]);
        let p = lowrank_truncation_projector(&m, 1.0).unwrap();
        assert_close(&p, &DenseMatrix::diag(&[0.0, 0.0, 1.0]), 1e-15);
        assert_close(&p, &null_projector(&m, 1e-15).unwrap(), 1e-15);

        let p = lowrank_truncation_projector(&DenseMatrix::zeros(3, 3), 0.9).unwrap();
        assert_eq!(p, DenseMatrix::identity(3));

        assert!(lowrank_truncation_projector(&m, 0.0).is_err());
    }
}
