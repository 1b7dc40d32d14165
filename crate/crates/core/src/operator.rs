//! Dense complex operators on the measured system.
//!
//! [`ComplexOperator`] wraps a square `nalgebra` matrix. The row-major slice
//! kernels at the bottom of this module are what the integrators use in their
//! inner loops, where allocating a matrix per right-hand-side evaluation would
//! dominate the run time.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// A square matrix of complex amplitudes, ħ = 1.
#[derive(Clone, PartialEq)]
pub struct ComplexOperator(DMatrix<C64>);

impl ComplexOperator {
    pub fn from_matrix(m: DMatrix<C64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Dimension {
                context: "operator must be a non-empty square matrix".into(),
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        Ok(Self(m))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize, usize) -> C64) -> Self {
        Self(DMatrix::from_fn(dim, dim, f))
    }

    /// Builds an operator from row-major entries.
    pub fn from_row_major(dim: usize, entries: &[C64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::Dimension {
                context: "row-major entry count".into(),
                expected: dim * dim,
                found: entries.len(),
            });
        }
        Ok(Self(DMatrix::from_row_slice(dim, dim, entries)))
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Result<Self> {
        let dim = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Dimension {
                context: "operator row length".into(),
                expected: dim,
                found: bad.len(),
            });
        }
        let flat: Vec<C64> = rows.iter().flatten().copied().collect();
        Self::from_row_major(dim, &flat)
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, |i, j| if i == j { c(values[i], 0.0) } else { C64::default() })
    }

    /// |ket⟩⟨bra|
    pub fn outer(ket: &[C64], bra: &[C64]) -> Result<Self> {
        if ket.len() != bra.len() {
            return Err(Error::Dimension {
                context: "outer product".into(),
                expected: ket.len(),
                found: bra.len(),
            });
        }
        Ok(Self::from_fn(ket.len(), |i, j| ket[i] * bra[j].conj()))
    }

    /// |psi⟩⟨psi| after normalising psi.
    pub fn pure_state(psi: &[C64]) -> Result<Self> {
        let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidInput("state vector has zero or non-finite norm".into()));
        }
        let v: Vec<C64> = psi.iter().map(|z| z / norm).collect();
        Self::outer(&v, &v)
    }

    /// Projector on basis vector `k`.
    pub fn basis_projector(dim: usize, k: usize) -> Self {
        Self::from_fn(dim, |i, j| if i == k && j == k { c(1.0, 0.0) } else { C64::default() })
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.0[(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, z: C64) {
        self.0[(i, j)] = z;
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.adjoint())
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    /// tr(self · other), without forming the product.
    pub fn trace_product(&self, other: &Self) -> C64 {
        let n = self.dim();
        let mut acc = C64::default();
        for i in 0..n {
            for k in 0..n {
                acc += self.0[(i, k)] * other.0[(k, i)];
            }
        }
        acc
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.0.iter().all(|z| z.norm() <= tol)
    }

    pub fn hermiticity_defect(&self) -> f64 {
        self.max_abs_diff(&self.adjoint())
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_defect() <= tol
    }

    pub fn hermitian_part(&self) -> Self {
        Self((&self.0 + self.0.adjoint()) * c(0.5, 0.0))
    }

    /// Eigenvalues (ascending) and eigenvectors (columns) of the hermitian part.
    pub fn eigh(&self) -> (Vec<f64>, DMatrix<C64>) {
        let eig = SymmetricEigen::new(self.hermitian_part().0);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vectors = DMatrix::from_fn(self.dim(), self.dim(), |i, j| eig.eigenvectors[(i, order[j])]);
        (values, vectors)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.hermitian_part().0)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.hermitian_part().0)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Hermitian within `tol` and no eigenvalue below `-tol`.
    pub fn is_psd(&self, tol: f64) -> bool {
        self.is_hermitian(tol.max(1e-12)) && self.min_eigenvalue() >= -tol
    }

    /// U† A U
    pub fn to_basis(&self, u: &DMatrix<C64>) -> Self {
        Self(u.adjoint() * &self.0 * u)
    }

    /// U A U†
    pub fn from_basis(&self, u: &DMatrix<C64>) -> Self {
        Self(u * &self.0 * u.adjoint())
    }

    pub fn scale(&self, s: C64) -> Self {
        Self(&self.0 * s)
    }

    pub fn scale_re(&self, s: f64) -> Self {
        self.scale(c(s, 0.0))
    }

    /// ⟨v| A |v⟩
    pub fn expectation(&self, v: &[C64]) -> C64 {
        let v = DVector::from_column_slice(v);
        (v.adjoint() * &self.0 * &v)[(0, 0)]
    }

    pub fn to_row_major(&self) -> Vec<C64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn write_row_major(&self, out: &mut [C64]) {
        let n = self.dim();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.0[(i, j)];
            }
        }
    }

    pub fn rows(&self) -> Vec<Vec<C64>> {
        let n = self.dim();
        (0..n).map(|i| (0..n).map(|j| self.0[(i, j)]).collect()).collect()
    }
}

impl fmt::Debug for ComplexOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ComplexOperator{}", self.0)
    }
}

impl<'a> Add<&'a ComplexOperator> for &'a ComplexOperator {
    type Output = ComplexOperator;
    fn add(self, rhs: &'a ComplexOperator) -> ComplexOperator {
        ComplexOperator(&self.0 + &rhs.0)
    }
}

impl Add for ComplexOperator {
    type Output = ComplexOperator;
    fn add(self, rhs: ComplexOperator) -> ComplexOperator {
        ComplexOperator(self.0 + rhs.0)
    }
}

impl AddAssign<&ComplexOperator> for ComplexOperator {
    fn add_assign(&mut self, rhs: &ComplexOperator) {
        self.0 += &rhs.0;
    }
}

impl<'a> Sub<&'a ComplexOperator> for &'a ComplexOperator {
    type Output = ComplexOperator;
    fn sub(self, rhs: &'a ComplexOperator) -> ComplexOperator {
        ComplexOperator(&self.0 - &rhs.0)
    }
}

impl<'a> Mul<&'a ComplexOperator> for &'a ComplexOperator {
    type Output = ComplexOperator;
    fn mul(self, rhs: &'a ComplexOperator) -> ComplexOperator {
        ComplexOperator(&self.0 * &rhs.0)
    }
}

impl Mul for ComplexOperator {
    type Output = ComplexOperator;
    fn mul(self, rhs: ComplexOperator) -> ComplexOperator {
        ComplexOperator(self.0 * rhs.0)
    }
}

impl Neg for ComplexOperator {
    type Output = ComplexOperator;
    fn neg(self) -> ComplexOperator {
        ComplexOperator(-self.0)
    }
}

// Serialized as a list of rows, each entry an [re, im] pair.
impl Serialize for ComplexOperator {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<[f64; 2]>> = self
            .rows()
            .into_iter()
            .map(|r| r.into_iter().map(|z| [z.re, z.im]).collect())
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ComplexOperator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<[f64; 2]>> = Vec::deserialize(d)?;
        let rows: Vec<Vec<C64>> = rows
            .into_iter()
            .map(|r| r.into_iter().map(|[re, im]| c(re, im)).collect())
            .collect();
        ComplexOperator::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// `out += alpha * a * b` for row-major `n x n` slices.
#[inline]
pub(crate) fn gemm_acc(n: usize, alpha: C64, a: &[C64], b: &[C64], out: &mut [C64]) {
    for i in 0..n {
        for k in 0..n {
            let aik = alpha * a[i * n + k];
            if aik == C64::default() {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

/// `out += alpha * a * b†` for row-major `n x n` slices.
#[inline]
pub(crate) fn gemm_adj_acc(n: usize, alpha: C64, a: &[C64], b: &[C64], out: &mut [C64]) {
    for i in 0..n {
        for j in 0..n {
            let mut acc = C64::default();
            for k in 0..n {
                acc += a[i * n + k] * b[j * n + k].conj();
            }
            out[i * n + j] += alpha * acc;
        }
    }
}

/// Real part of the trace of a row-major `n x n` slice.
#[inline]
pub(crate) fn trace_re(n: usize, a: &[C64]) -> f64 {
    (0..n).map(|i| a[i * n + i].re).sum()
}
