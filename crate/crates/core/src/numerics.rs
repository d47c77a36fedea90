//! Dense linear-algebra kernels with an embedded multiply-add counter.
//!
//! All floating point in the engine is f64. The [`OpCounter`] tracks
//! multiply-add work (one fused multiply-add counts as one unit), plus
//! exponentials and comparisons in their own buckets; every kernel that does
//! counted work takes a `&mut OpCounter` so a pipeline run can account for
//! itself exactly.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error(
        "dimension mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}"
    )]
    DimensionMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("matrix is empty")]
    EmptyMatrix,
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadShape {
        len: usize,
        rows: usize,
        cols: usize,
    },
    #[error("relative tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("singular value iteration did not converge after {sweeps} sweeps")]
    SvdNonConvergence { sweeps: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFiniteEntry { row: usize, col: usize },
}

/// Row-major dense matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadShape {
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::BadShape {
                    len: row.len(),
                    rows: r,
                    cols: c,
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> RealMatrix {
        let mut out = RealMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// New matrix from the given rows of `self`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> RealMatrix {
        let mut out = RealMatrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Index of the first non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.cols, p % self.cols))
    }
}

/// Multiply-add, exponential, and comparison counts for one pipeline run.
///
/// Counts are monotone while a run is in flight; [`OpCounter::reset`] is only
/// meant for run boundaries. One multiply-accumulate is one `multiply_adds`
/// unit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub multiply_adds: u64,
    pub exps: u64,
    pub comparisons: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add_multiply_adds(&mut self, n: u64) {
        self.multiply_adds += n;
    }

    #[inline]
    pub fn add_exps(&mut self, n: u64) {
        self.exps += n;
    }

    #[inline]
    pub fn add_comparisons(&mut self, n: u64) {
        self.comparisons += n;
    }

    pub fn snapshot(&self) -> OpCounter {
        *self
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Work threshold above which matmul rows are distributed across threads.
/// Each output element is computed by the same sequential inner loop either
/// way, so results are bit-identical regardless of thread count.
const PARALLEL_MATMUL_THRESHOLD: usize = 1 << 21;

/// `a * b`, counting `a.rows * b.cols * a.cols` multiply-adds.
pub fn matmul(
    a: &RealMatrix,
    b: &RealMatrix,
    counter: &mut OpCounter,
) -> Result<RealMatrix, NumericsError> {
    if a.cols != b.rows {
        return Err(NumericsError::DimensionMismatch {
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    counter.add_multiply_adds((a.rows * b.cols * a.cols) as u64);
    let mut out = RealMatrix::zeros(a.rows, b.cols);
    let work = a.rows * a.cols * b.cols;
    if work >= PARALLEL_MATMUL_THRESHOLD && a.rows > 1 {
        out.data
            .par_chunks_mut(b.cols)
            .enumerate()
            .for_each(|(i, out_row)| matmul_row(a.row(i), b, out_row));
    } else {
        for i in 0..a.rows {
            let (a_row, out_row) = (a.row(i), i * b.cols);
            let out_row = &mut out.data[out_row..out_row + b.cols];
            matmul_row(a_row, b, out_row);
        }
    }
    Ok(out)
}

#[inline]
fn matmul_row(a_row: &[f64], b: &RealMatrix, out_row: &mut [f64]) {
    for (k, &aik) in a_row.iter().enumerate() {
        let b_row = b.row(k);
        for (o, &bkj) in out_row.iter_mut().zip(b_row) {
            *o += aik * bkj;
        }
    }
}

/// Row-wise numerically stable softmax: subtract the row max, exponentiate,
/// normalize. Rows of `-inf` entries map to exact zeros, so masked positions
/// stay exactly zero after normalization.
pub fn stable_softmax_rows(
    m: &RealMatrix,
    counter: &mut OpCounter,
) -> Result<RealMatrix, NumericsError> {
    if m.cols == 0 {
        return Err(NumericsError::EmptyMatrix);
    }
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_row_in_place(out.row_mut(i), counter);
    }
    Ok(out)
}

pub(crate) fn softmax_row_in_place(row: &mut [f64], counter: &mut OpCounter) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    counter.add_comparisons(row.len().saturating_sub(1) as u64);
    counter.add_exps(row.len() as u64);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Singular values (descending) by one-sided Jacobi orthogonalization of the
/// taller orientation. Returns [`NumericsError::SvdNonConvergence`] if the
/// sweep limit is hit.
pub fn singular_values(m: &RealMatrix) -> Result<Vec<f64>, NumericsError> {
    if m.is_empty() {
        return Err(NumericsError::EmptyMatrix);
    }
    let work = if m.rows >= m.cols {
        m.clone()
    } else {
        m.transpose()
    };
    let (height, n) = (work.rows, work.cols);
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..height).map(|i| work.get(i, j)).collect())
        .collect();

    const MAX_SWEEPS: usize = 100;
    // Relative off-diagonal threshold. Column pairs closer to orthogonal than
    // this contribute nothing at f64 precision.
    const ORTHO_TOL: f64 = 1e-14;

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (head, tail) = cols.split_at_mut(j);
                let ci = &mut head[i];
                let cj = &mut tail[0];
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for r in 0..height {
                    alpha += ci[r] * ci[r];
                    beta += cj[r] * cj[r];
                    gamma += ci[r] * cj[r];
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..height {
                    let a = ci[r];
                    let b = cj[r];
                    ci[r] = c * a - s * b;
                    cj[r] = s * a + c * b;
                }
            }
        }
        if !rotated {
            let mut sigma: Vec<f64> = cols
                .iter()
                .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
            return Ok(sigma);
        }
    }
    Err(NumericsError::SvdNonConvergence { sweeps: MAX_SWEEPS })
}

/// Numerical rank: singular values above `rel_tol * sigma_max`.
///
/// If the Jacobi iteration fails to converge the rank falls back to Gaussian
/// elimination with partial pivoting at the same relative tolerance
/// (secondary path; it has never been observed to trigger on finite input).
pub fn matrix_rank(m: &RealMatrix, rel_tol: f64) -> Result<usize, NumericsError> {
    if m.is_empty() {
        return Err(NumericsError::EmptyMatrix);
    }
    if rel_tol.is_nan() || rel_tol <= 0.0 {
        return Err(NumericsError::InvalidTolerance(rel_tol));
    }
    match singular_values(m) {
        Ok(sigma) => {
            let max = sigma[0];
            if max <= 0.0 {
                return Ok(0);
            }
            Ok(sigma.iter().filter(|&&s| s > rel_tol * max).count())
        }
        Err(NumericsError::SvdNonConvergence { .. }) => Ok(rank_by_elimination(m, rel_tol)),
        Err(e) => Err(e),
    }
}

/// Rank via Gaussian elimination with partial pivoting; pivots are counted
/// when above `rel_tol` times the largest absolute entry of the input.
pub fn rank_by_elimination(m: &RealMatrix, rel_tol: f64) -> usize {
    let mut a: Vec<Vec<f64>> = (0..m.rows).map(|i| m.row(i).to_vec()).collect();
    let scale = m.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let threshold = rel_tol * scale;
    let mut rank = 0;
    let mut pivot_row = 0;
    for col in 0..m.cols {
        if pivot_row >= m.rows {
            break;
        }
        let mut best = pivot_row;
        for r in (pivot_row + 1)..m.rows {
            if a[r][col].abs() > a[best][col].abs() {
                best = r;
            }
        }
        if a[best][col].abs() <= threshold {
            continue;
        }
        a.swap(pivot_row, best);
        let (upper, lower) = a.split_at_mut(pivot_row + 1);
        let pivot_vals = &upper[pivot_row][col..];
        for row in lower.iter_mut() {
            let factor = row[col] / pivot_vals[0];
            if factor != 0.0 {
                for (dst, &src) in row[col..].iter_mut().zip(pivot_vals) {
                    *dst -= factor * src;
                }
            }
        }
        pivot_row += 1;
        rank += 1;
    }
    rank
}

/// Symmetric matrix of squared Euclidean distances between the rows of
/// `points`, exact zero diagonal.
pub fn pairwise_sq_dists(points: &RealMatrix) -> RealMatrix {
    let n = points.rows;
    let mut out = RealMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(points.row(i), points.row(j));
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine similarity in [-1, 1]. A zero vector on either side yields 0 by
/// convention.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}
