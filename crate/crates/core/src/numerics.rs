//! Dense linear algebra and special functions.
//!
//! Everything here is a pure function over small dense row-major matrices
//! (order ≤ a few hundred). The inference engine only ever factors symmetric
//! positive definite systems, so the factorization entry points symmetrize
//! their input and retry with a small diagonal jitter before giving up.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerances used by the SPD kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Maximum allowed `|m[i][j] - m[j][i]|`, relative to the largest entry.
    pub symmetry: f64,
    /// Diagonal jitter levels tried in order, relative to the mean diagonal
    /// magnitude. The first entry should be 0.
    pub jitter_ladder: Vec<f64>,
}

pub const DEFAULT_SYMMETRY_TOL: f64 = 1e-10;
pub const DEFAULT_JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            symmetry: DEFAULT_SYMMETRY_TOL,
            jitter_ladder: DEFAULT_JITTER_LADDER.to_vec(),
        }
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(order: usize) -> Self {
        let mut m = Self::zeros(order, order);
        for i in 0..order {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(p)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply ({}x{})ᵀ by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Principal sub-matrix on the contiguous index range `start..start+len`.
    pub fn principal_block(&self, start: usize, len: usize) -> Matrix {
        Matrix::from_fn(len, len, |i, j| self[(start + i, start + j)])
    }

    /// `(m + mᵀ) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        debug_assert!(self.is_square());
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self[(i, j)] + self[(j, i)])
        })
    }

    pub fn symmetrize_in_place(&mut self) {
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

// ---------------------------------------------------------------------------
// Cholesky and SPD solves
// ---------------------------------------------------------------------------

fn check_square(m: &Matrix) -> Result<()> {
    if m.is_square() && m.rows() > 0 {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )))
    }
}

fn check_symmetric(m: &Matrix, tol: f64) -> Result<()> {
    let n = m.rows();
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (m[(i, j)] - m[(j, i)]).abs();
            if !(gap <= tol * scale) {
                return Err(Error::NotSymmetric { row: i, col: j, gap });
            }
        }
    }
    Ok(())
}

/// Plain Cholesky without symmetrization or jitter. Reads only the lower
/// triangle. Returns the index of the first non-positive pivot on failure.
fn cholesky_raw(m: &Matrix, jitter: f64) -> std::result::Result<Matrix, usize> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = m[(j, j)] + jitter;
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(j);
        }
        let pivot = diag.sqrt();
        l[(j, j)] = pivot;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / pivot;
        }
    }
    Ok(l)
}

/// Lower Cholesky factor `L` with `L·Lᵀ = m`, using default tolerances.
pub fn cholesky_lower(m: &Matrix) -> Result<Matrix> {
    cholesky_lower_with(m, &Tolerances::default())
}

pub fn cholesky_lower_with(m: &Matrix, tol: &Tolerances) -> Result<Matrix> {
    check_square(m)?;
    check_symmetric(m, tol.symmetry)?;
    let sym = m.symmetrized();
    let n = sym.rows();
    let scale = (0..n).map(|i| sym[(i, i)].abs()).sum::<f64>() / n as f64;
    let mut failed_at = 0;
    for &level in &tol.jitter_ladder {
        match cholesky_raw(&sym, level * scale) {
            Ok(l) => return Ok(l),
            Err(idx) => failed_at = idx,
        }
    }
    Err(Error::NotPositiveDefinite { pivot: failed_at })
}

/// Solves `L·x = b` in place for lower-triangular `L`.
pub fn forward_substitute(l: &Matrix, b: &mut [f64]) {
    let n = l.rows();
    for i in 0..n {
        let row = l.row(i);
        let s = b[i] - dot(&row[..i], &b[..i]);
        b[i] = s / row[i];
    }
}

/// Solves `Lᵀ·x = b` in place for lower-triangular `L`.
pub fn backward_substitute(l: &Matrix, b: &mut [f64]) {
    let n = l.rows();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Solves `m·X = rhs` for symmetric positive definite `m`.
pub fn solve_spd(m: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    solve_spd_with(m, rhs, &Tolerances::default())
}

pub fn solve_spd_with(m: &Matrix, rhs: &Matrix, tol: &Tolerances) -> Result<Matrix> {
    check_square(m)?;
    if rhs.rows() != m.rows() {
        return Err(Error::DimensionMismatch(format!(
            "rhs has {} rows, system has order {}",
            rhs.rows(),
            m.rows()
        )));
    }
    let l = cholesky_lower_with(m, tol)?;
    let mut out = Matrix::zeros(rhs.rows(), rhs.cols());
    let mut col = vec![0.0; rhs.rows()];
    for j in 0..rhs.cols() {
        for (i, c) in col.iter_mut().enumerate() {
            *c = rhs[(i, j)];
        }
        forward_substitute(&l, &mut col);
        backward_substitute(&l, &mut col);
        for (i, c) in col.iter().enumerate() {
            out[(i, j)] = *c;
        }
    }
    Ok(out)
}

/// Inverse of an SPD matrix via its Cholesky factor; the result is symmetric.
pub fn inverse_spd(m: &Matrix) -> Result<Matrix> {
    let mut inv = solve_spd(m, &Matrix::identity(m.rows()))?;
    inv.symmetrize_in_place();
    Ok(inv)
}

/// `ln det m` for SPD `m`.
pub fn ln_det_spd(m: &Matrix) -> Result<f64> {
    let l = cholesky_lower(m)?;
    Ok(2.0 * (0..l.rows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

const DIGAMMA_SHIFT: f64 = 10.0;

/// Digamma function `Ψ(x)` for `x > 0`.
///
/// Shifts the argument above 10 with `Ψ(x) = Ψ(x+1) - 1/x`, then sums the
/// asymptotic expansion through the `x⁻¹⁴` term.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("digamma requires x > 0, got {x}")));
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < DIGAMMA_SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli terms B_2n / (2n x^2n), Horner form in x⁻².
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    Ok(acc + x.ln() - 0.5 * inv - series)
}

/// `ln Σ exp(v_i)` with max-subtraction.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    let max = v
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
        .ok_or(Error::EmptyInput("logsumexp"))?;
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}
