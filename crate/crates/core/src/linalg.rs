//! Dense row-major matrices and the small vector kernels shared by every
//! other module: softmax, L2 normalization, entropy, probability ranking,
//! and nearest-rank percentiles.

use crate::error::{Error, Result};
use crate::parallel;
use crate::scalar::Scalar;

/// Dense matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    /// Builds a matrix from row-major data; every entry must be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries must be finite".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("rows have inconsistent lengths"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    /// Copies the given rows of `self` into a new matrix, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::invalid(format!("row index {i} out of bounds ({} rows)", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix { rows: indices.len(), cols: self.cols, data })
    }

    /// `self * other`; shapes (m x k)(k x n).
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        parallel::for_each_row_chunk(&mut out.data, n.max(1), |first_row, chunk| {
            for (offset, out_row) in chunk.chunks_mut(n.max(1)).enumerate() {
                let a_row = self.row(first_row + offset);
                for p in 0..k {
                    let a = a_row[p];
                    let b_row = other.row(p);
                    for (slot, &b) in out_row.iter_mut().zip(b_row) {
                        *slot = *slot + a * b;
                    }
                }
            }
        });
        Ok(out)
    }

    /// `self * other^T`; shapes (m x k)(n x k).
    pub fn matmul_nt(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.cols {
            return Err(Error::invalid(format!(
                "matmul_nt shape mismatch: {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, n) = (self.rows, other.rows);
        let mut out = Matrix::zeros(m, n);
        parallel::for_each_row_chunk(&mut out.data, n.max(1), |first_row, chunk| {
            for (offset, out_row) in chunk.chunks_mut(n.max(1)).enumerate() {
                let a_row = self.row(first_row + offset);
                for (slot, j) in out_row.iter_mut().zip(0..n) {
                    *slot = dot(a_row, other.row(j));
                }
            }
        });
        Ok(out)
    }

    /// `self^T * other`; shapes (k x m)(k x n).
    pub fn matmul_tn(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != other.rows {
            return Err(Error::invalid(format!(
                "matmul_tn shape mismatch: ({}x{})^T * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, n, k) = (self.cols, other.cols, self.rows);
        let mut out = Matrix::zeros(m, n);
        parallel::for_each_row_chunk(&mut out.data, n.max(1), |first_row, chunk| {
            for (offset, out_row) in chunk.chunks_mut(n.max(1)).enumerate() {
                let i = first_row + offset;
                for p in 0..k {
                    let a = self.get(p, i);
                    let b_row = other.row(p);
                    for (slot, &b) in out_row.iter_mut().zip(b_row) {
                        *slot = *slot + a * b;
                    }
                }
            }
        });
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::invalid("matrix addition shape mismatch"));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{context} contains a non-finite entry")))
        }
    }

    /// L2-normalizes every row; returns the normalized matrix and the
    /// original row norms. A zero row is a degenerate input.
    pub fn normalized_rows(&self) -> Result<(Matrix<T>, Vec<T>)> {
        let mut out = self.clone();
        let mut norms = vec![T::zero(); self.rows];
        for (r, norm_slot) in norms.iter_mut().enumerate() {
            let n = norm(self.row(r));
            if n <= T::zero() || !n.is_finite() {
                return Err(Error::degenerate(format!("row {r} has zero or non-finite norm")));
            }
            *norm_slot = n;
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        Ok((out, norms))
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Returns `v / ||v||`; a zero vector is a degenerate input.
pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = norm(v);
    if n <= T::zero() || !n.is_finite() {
        return Err(Error::degenerate("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Index of the largest entry; ties resolve to the lower index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Temperature-scaled softmax: `softmax(logits / temperature)`, computed
/// with max subtraction so large logits cannot overflow.
pub fn softmax<T: Scalar>(logits: &[T], temperature: T) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty slice"));
    }
    if temperature <= T::zero() || !temperature.is_finite() {
        return Err(Error::invalid("softmax temperature must be positive and finite"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits must be finite".into()));
    }
    let max = logits.iter().copied().fold(logits[0], T::max);
    let mut out: Vec<T> = logits.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Shannon entropy in nats of a probability vector, with `0 ln 0 = 0`.
///
/// Entries must be non-negative and sum to 1 within 1e-6.
pub fn entropy<T: Scalar>(p: &[T]) -> Result<T> {
    if p.is_empty() {
        return Err(Error::invalid("entropy of an empty distribution"));
    }
    let mut sum = T::zero();
    for &v in p {
        if !v.is_finite() || v < T::zero() {
            return Err(Error::invalid("probabilities must be finite and non-negative"));
        }
        sum += v;
    }
    if (sum - T::one()).abs() > T::from(1e-6).unwrap() {
        return Err(Error::invalid(format!("probabilities sum to {sum}, expected 1")));
    }
    let mut h = T::zero();
    for &v in p {
        if v > T::zero() {
            h -= v * v.ln();
        }
    }
    Ok(h.max(T::zero()))
}

/// Ranks the categories of a probability vector: the result maps each index
/// to its rank, where rank 1 is the most probable category. Ties resolve in
/// favor of the lower index.
pub fn category_order<T: Scalar>(p: &[T]) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..p.len()).collect();
    indices.sort_by(|&a, &b| {
        p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut ranks = vec![0; p.len()];
    for (position, &index) in indices.iter().enumerate() {
        ranks[index] = position + 1;
    }
    ranks
}

/// Nearest-rank percentile: the `ceil(q * n / 100)`-th smallest value.
/// `q` must lie in (0, 100]; the slice must be non-empty.
pub fn percentile<T: Scalar>(values: &[T], q: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::degenerate("percentile of an empty slice"));
    }
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::invalid(format!("percentile rank {q} outside (0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    let k = ((q * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[k.clamp(1, n) - 1])
}
