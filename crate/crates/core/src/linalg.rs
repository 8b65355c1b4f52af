//! Dense vectors and matrices, Cholesky solves and top-eigenvalue estimation.
//!
//! Everything here is small-dimensional (n up to a few thousand) and kept
//! deliberately free of external BLAS so that results are bitwise
//! reproducible across machines and thread counts.

use std::ops::{Deref, DerefMut, Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated by [`spd_solve`] and [`Cholesky::factor`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative change of the Rayleigh quotient that stops power iteration.
pub const POWER_TOL: f64 = 1e-10;
/// Iteration cap for power iteration.
pub const POWER_MAX_ITERS: usize = 10_000;

/// A dense real vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn from_elem(n: usize, value: f64) -> Self {
        Self(vec![value; n])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |acc, a| acc.max(a.abs()))
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &DenseVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.0 {
            *a *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> DenseVector {
        DenseVector(self.0.iter().map(|a| alpha * a).collect())
    }

    pub fn sub(&self, other: &DenseVector) -> DenseVector {
        debug_assert_eq!(self.len(), other.len());
        DenseVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &DenseVector) -> DenseVector {
        debug_assert_eq!(self.len(), other.len());
        DenseVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Squared Euclidean distance to `other`.
    pub fn dist_sq(&self, other: &DenseVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.is_finite())
    }

    pub(crate) fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected,
                found: self.len(),
            })
        }
    }
}

impl Deref for DenseVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl FromIterator<f64> for DenseVector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    /// Builds a matrix from row-major data; `data.len()` must equal `rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · v`
    pub fn matvec(&self, v: &DenseVector) -> Result<DenseVector> {
        v.check_len(self.cols)?;
        Ok((0..self.rows).map(|i| dot_slice(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`
    pub fn tr_matvec(&self, v: &DenseVector) -> Result<DenseVector> {
        v.check_len(self.rows)?;
        let mut out = DenseVector::zeros(self.cols);
        for (i, vi) in v.iter().enumerate() {
            if *vi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        Ok(out)
    }

    /// `selfᵀ · self`, exactly symmetric.
    pub fn gram(&self) -> DenseMatrix {
        let n = self.cols;
        let mut g = DenseMatrix::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for (gj, rj) in g.data[i * n + i..(i + 1) * n].iter_mut().zip(&row[i..]) {
                    *gj += ri * rj;
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i];
            }
        }
        g
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn scaled(&self, alpha: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| alpha * a).collect(),
        }
    }

    /// `self + shift · I` for a square matrix.
    pub fn add_diag(&self, shift: f64) -> DenseMatrix {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out.data[i * self.cols + i] += shift;
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, a| acc.max(a.abs()))
    }

    /// Largest `|m_ij - m_ji|`, or `None` if not square.
    pub fn asymmetry(&self) -> Option<f64> {
        if !self.is_square() {
            return None;
        }
        let n = self.rows;
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        Some(worst)
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        self.asymmetry()
            .is_some_and(|a| a <= rel_tol * self.max_abs().max(f64::MIN_POSITIVE))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// `vᵀ · self · v`
    pub fn quad_form(&self, v: &DenseVector) -> Result<f64> {
        Ok(v.dot(&self.matvec(v)?))
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_symmetric(m: &DenseMatrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: m.rows(),
            found: m.cols(),
        });
    }
    let asym = m.asymmetry().unwrap_or(0.0);
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric {
            asymmetry: asym / scale,
        });
    }
    Ok(())
}

/// Lower-triangular Cholesky factor `L` with `M = L Lᵀ`.
///
/// Factor once and reuse across iterations when the system matrix is fixed
/// (every client subproblem here has a constant `w H + σ I`).
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
    matrix: DenseMatrix,
}

impl Cholesky {
    pub fn factor(m: &DenseMatrix) -> Result<Self> {
        check_symmetric(m)?;
        let n = m.rows();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut diag = m.get(j, j);
            for k in 0..j {
                diag -= l[j * n + k] * l[j * n + k];
            }
            if diag <= 0.0 || !diag.is_finite() {
                return Err(Error::FactorizationFailure {
                    pivot: j,
                    value: diag,
                });
            }
            let ljj = diag.sqrt();
            l[j * n + j] = ljj;
            for i in (j + 1)..n {
                let mut s = m.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / ljj;
            }
        }
        Ok(Self {
            n,
            lower: l,
            matrix: m.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn substitute(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let l = &self.lower;
        let mut z = v.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= l[i * n + k] * z[k];
            }
            z[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * z[k];
            }
            z[i] = s / l[i * n + i];
        }
        z
    }

    /// Solves `M u = v` with one step of iterative refinement.
    pub fn solve(&self, v: &DenseVector) -> Result<DenseVector> {
        v.check_len(self.n)?;
        let mut u = DenseVector::from_vec(self.substitute(v));
        let resid = v.sub(&self.matrix.matvec(&u)?);
        let correction = self.substitute(&resid);
        for (a, c) in u.iter_mut().zip(correction) {
            *a += c;
        }
        Ok(u)
    }
}

/// Solves `M u = v` for symmetric positive-definite `M`.
pub fn spd_solve(m: &DenseMatrix, v: &DenseVector) -> Result<DenseVector> {
    Cholesky::factor(m)?.solve(v)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Starts from the all-ones vector. If that start is annihilated by `M`
/// while `M` is non-zero, restarts from a deterministic alternating vector.
pub fn lambda_max(m: &DenseMatrix) -> Result<f64> {
    check_symmetric(m)?;
    let n = m.rows();
    if n == 0 || m.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let starts: [Box<dyn Fn(usize) -> f64>; 2] = [
        Box::new(|_| 1.0),
        Box::new(|j| {
            if j % 2 == 0 {
                1.0 + j as f64
            } else {
                -(1.0 + j as f64)
            }
        }),
    ];
    for start in &starts {
        let mut v: DenseVector = (0..n).map(start).collect();
        let norm = v.norm();
        v.scale(1.0 / norm);
        let mut rayleigh = f64::NEG_INFINITY;
        let mut collapsed = false;
        for _ in 0..POWER_MAX_ITERS {
            let mv = m.matvec(&v)?;
            let next = v.dot(&mv);
            let mv_norm = mv.norm();
            if mv_norm <= f64::EPSILON * m.max_abs() * (n as f64) {
                collapsed = true;
                break;
            }
            if (next - rayleigh).abs() <= POWER_TOL * next.abs().max(1.0) {
                return Ok(next.max(0.0));
            }
            rayleigh = next;
            v = mv;
            v.scale(1.0 / mv_norm);
        }
        if !collapsed {
            return Err(Error::NoConvergence {
                iterations: POWER_MAX_ITERS,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: POWER_MAX_ITERS,
    })
}

/// Full eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// the columns of the returned matrix. Used where a spectral decomposition
/// is needed outright (minimum-norm solves), not in the hot loop.
pub fn symmetric_eigen(m: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    check_symmetric(m)?;
    let n = m.rows();
    let mut a = m.clone();
    let mut v = DenseMatrix::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a.get(i, j) * a.get(i, j);
            }
        }
        if off.sqrt() <= 1e-15 * a.max_abs().max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
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
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).total_cmp(&a.get(j, j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, new_col, v.get(k, old_col));
        }
    }
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DenseVector {
        DenseVector::from_vec(v.to_vec())
    }

    #[test]
    fn identity_solve() {
        let u = spd_solve(&DenseMatrix::identity(2), &dv(&[3.0, -1.0])).unwrap();
        assert_eq!(u.as_slice(), &[3.0, -1.0]);
    }

    #[test]
    fn diagonal_solve() {
        let m = DenseMatrix::from_diag(&[2.0, 4.0]);
        let u = spd_solve(&m, &dv(&[2.0, 4.0])).unwrap();
        assert_eq!(u.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn asymmetric_matrix_is_rejected() {
        let m = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(
            spd_solve(&m, &dv(&[1.0, 1.0])),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn indefinite_matrix_fails_factorization() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            spd_solve(&m, &dv(&[1.0, 1.0])),
            Err(Error::FactorizationFailure { pivot: 1, .. })
        ));
    }

    #[test]
    fn lambda_max_diagonal_and_zero() {
        let m = DenseMatrix::from_diag(&[3.0, 1.0]);
        assert!((lambda_max(&m).unwrap() - 3.0).abs() < 1e-8);
        assert_eq!(lambda_max(&DenseMatrix::zeros(4, 4)).unwrap(), 0.0);
    }

    #[test]
    fn lambda_max_start_orthogonal_to_ones() {
        // [[1,-1],[-1,1]] annihilates the all-ones start; eigenvalue is 2.
        let m = DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert!((lambda_max(&m).unwrap() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn jacobi_eigen_reconstructs() {
        let m = DenseMatrix::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.2],
            vec![0.5, 0.2, 1.0],
        ])
        .unwrap();
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        for (c, lam) in vals.iter().enumerate() {
            let col: DenseVector = (0..3).map(|k| vecs.get(k, c)).collect();
            let mv = m.matvec(&col).unwrap();
            for k in 0..3 {
                assert!((mv[k] - lam * col[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_is_exactly_symmetric() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0, 0.3], vec![-0.7, 0.1, 5.0]]).unwrap();
        let g = a.gram();
        assert_eq!(g.asymmetry(), Some(0.0));
        let direct = a.transpose().matmul(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((g.get(i, j) - direct.get(i, j)).abs() < 1e-14);
            }
        }
    }
}
