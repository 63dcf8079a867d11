//! Dense real-matrix primitives.
//!
//! Storage is row-major `f32`; every product and reduction accumulates in
//! `f64` so results are deterministic and accurate over long calibration
//! sums. There is no parallelism here: every reduction has a fixed order.

use crate::error::{Error, Result};

/// Row-major dense matrix of 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Wrap an existing row-major buffer. Panics if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length != rows * cols");
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
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

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * rhs` with 64-bit accumulation.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimensions");
        let n = rhs.cols;
        let mut acc = vec![0.0f64; self.rows * n];
        for i in 0..self.rows {
            let arow = self.row(i);
            let out = &mut acc[i * n..(i + 1) * n];
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue; // adding exact zeros; skip keeps zero-weight paths cheap
                }
                let a = a as f64;
                let brow = &rhs.data[k * n..(k + 1) * n];
                for (o, &b) in out.iter_mut().zip(brow) {
                    *o += a * b as f64;
                }
            }
        }
        let out = Matrix {
            rows: self.rows,
            cols: n,
            data: acc.into_iter().map(|v| v as f32).collect(),
        };
        debug_assert!(out.is_finite(), "matmul produced non-finite entries");
        out
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn add(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "elementwise add shapes");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "elementwise sub shapes");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Scale row `r` by `alpha[r]` (left-multiplication by `diag(alpha)`).
    pub fn scale_rows(&self, alpha: &[f32]) -> Matrix {
        assert_eq!(alpha.len(), self.rows, "scale_rows length");
        let mut out = self.clone();
        for (r, &a) in alpha.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= a;
            }
        }
        out
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn col_range(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "column range");
        Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn row_range(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row range");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |r, c| self.get(r, idx[c]))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(idx.len(), self.cols, |r, c| self.get(idx[r], c))
    }

    /// Horizontal concatenation `[self | rhs]`.
    pub fn concat_cols(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "concat_cols row counts");
        Matrix::from_fn(self.rows, self.cols + rhs.cols, |r, c| {
            if c < self.cols {
                self.get(r, c)
            } else {
                rhs.get(r, c - self.cols)
            }
        })
    }

    /// Vertical concatenation `[self; rhs]`.
    pub fn concat_rows(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "concat_rows column counts");
        let mut data = self.data.clone();
        data.extend_from_slice(&rhs.data);
        Matrix {
            rows: self.rows + rhs.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| {
                let v = v as f64;
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }
}

/// Symmetric positive semi-definite matrix (within numerical tolerance).
///
/// Construction symmetrizes `(C + C^T) / 2` after checking the asymmetry is
/// within `1e-5` of the matrix scale, which kills accumulated rounding drift
/// before the solver sees it.
#[derive(Debug, Clone)]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::shape(
                "SpdMatrix",
                "square",
                format!("{}x{}", m.rows(), m.cols()),
            ));
        }
        let scale = m.max_abs().max(1e-30) as f64;
        let n = m.rows();
        let mut sym = m.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let a = m.get(i, j) as f64;
                let b = m.get(j, i) as f64;
                if (a - b).abs() > 1e-5 * scale {
                    return Err(Error::InvalidConfig(format!(
                        "matrix is not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
                let avg = (0.5 * (a + b)) as f32;
                sym.set(i, j, avg);
                sym.set(j, i, avg);
            }
        }
        Ok(SpdMatrix(sym))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.0.get(i, i) as f64).sum()
    }
}

/// Solve `(A + ridge * I) X = B` by LU with partial pivoting in 64-bit.
///
/// Fails explicitly when a pivot falls below `1e-12` of the matrix scale
/// rather than returning garbage.
pub fn spd_solve(a: &SpdMatrix, ridge: f64, b: &Matrix) -> Result<Matrix> {
    if ridge < 0.0 {
        return Err(Error::InvalidConfig(format!("negative ridge {ridge}")));
    }
    let n = a.dim();
    if b.rows() != n {
        return Err(Error::shape("spd_solve", format!("{n} rows"), b.rows()));
    }

    // A + ridge*I in f64, row-major.
    let mut m = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = a.as_matrix().get(i, j) as f64;
        }
        m[i * n + i] += ridge;
    }
    let scale = m.iter().fold(0.0f64, |s, &v| s.max(v.abs()));
    let threshold = 1e-12 * scale;

    // LU factorization with partial pivoting; `perm[i]` is the source row.
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, m[r * n + col].abs()))
            .fold((col, -1.0f64), |best, cand| {
                if cand.1 > best.1 {
                    cand
                } else {
                    best
                }
            });
        if pivot_abs <= threshold {
            return Err(Error::SingularSystem {
                context: format!("spd_solve ({n}x{n}, ridge {ridge:.3e})"),
                pivot: pivot_abs,
                threshold,
            });
        }
        if pivot_row != col {
            for j in 0..n {
                m.swap(col * n + j, pivot_row * n + j);
            }
            perm.swap(col, pivot_row);
        }
        let pivot = m[col * n + col];
        for r in (col + 1)..n {
            let factor = m[r * n + col] / pivot;
            m[r * n + col] = factor;
            for j in (col + 1)..n {
                m[r * n + j] -= factor * m[col * n + j];
            }
        }
    }

    // Solve column by column.
    let ncols = b.cols();
    let mut out = Matrix::zeros(n, ncols);
    let mut y = vec![0.0f64; n];
    for c in 0..ncols {
        for i in 0..n {
            y[i] = b.get(perm[i], c) as f64;
        }
        for i in 1..n {
            let mut s = y[i];
            for j in 0..i {
                s -= m[i * n + j] * y[j];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in (i + 1)..n {
                s -= m[i * n + j] * y[j];
            }
            y[i] = s / m[i * n + i];
        }
        for (i, &solved) in y.iter().enumerate() {
            out.set(i, c, solved as f32);
        }
    }
    Ok(out)
}

/// Mean eigenvalue of an SPD matrix, computed as `trace / n`.
///
/// For SPD matrices the singular values equal the eigenvalues, so this is
/// also the mean singular value used by the ridge policy.
pub fn mean_eigenvalue(a: &SpdMatrix) -> f64 {
    a.trace() / a.dim() as f64
}

/// Row-wise softmax, stabilized by subtracting the row maximum.
pub fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut buf = vec![0.0f64; x.cols()];
    for r in 0..x.rows() {
        softmax_into(x.row(r), &mut buf);
        for (c, &v) in buf.iter().enumerate() {
            out.set(r, c, v as f32);
        }
    }
    out
}

/// Softmax of `row` written into `out` (f64, stabilized).
pub(crate) fn softmax_into(row: &[f32], out: &mut [f64]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v as f64 - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean over token rows of the cosine similarity between corresponding rows
/// of `a` and `b`. Rows where either side has norm below `1e-12` are skipped;
/// if every row is skipped the result is undefined and an error is returned.
pub fn mean_token_cosine(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mean_token_cosine",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for r in 0..a.rows() {
        let (ra, rb) = (a.row(r), b.row(r));
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for (&x, &y) in ra.iter().zip(rb) {
            let (x, y) = (x as f64, y as f64);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let (na, nb) = (na.sqrt(), nb.sqrt());
        if na < 1e-12 || nb < 1e-12 {
            continue;
        }
        sum += dot / (na * nb);
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateRows);
    }
    Ok((sum / count as f64).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn diag(values: &[f32]) -> SpdMatrix {
        let n = values.len();
        SpdMatrix::new(Matrix::from_fn(n, n, |r, c| {
            if r == c {
                values[r]
            } else {
                0.0
            }
        }))
        .unwrap()
    }

    /// Small deterministic pseudo-random stream for test fixtures.
    fn lcg_stream(seed: u64) -> impl FnMut() -> f32 {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 1.0
        }
    }

    fn random_spd(n: usize, seed: u64) -> SpdMatrix {
        let mut next = lcg_stream(seed);
        let g = Matrix::from_fn(n, n, |_, _| next());
        SpdMatrix::new(g.transpose().matmul(&g)).unwrap()
    }

    #[test]
    fn spd_solve_identity() {
        let a = diag(&[1.0, 1.0, 1.0]);
        let x = spd_solve(&a, 0.0, &Matrix::identity(3)).unwrap();
        assert_eq!(x, Matrix::identity(3));
    }

    #[test]
    fn spd_solve_diagonal_with_ridge() {
        let a = diag(&[1.0, 3.0]);
        let b = Matrix::from_vec(2, 1, vec![2.0, 8.0]);
        let x = spd_solve(&a, 1.0, &b).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-6);
        assert!((x.get(1, 0) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn spd_solve_residual_is_small() {
        let a = random_spd(8, 7);
        let mut next = lcg_stream(99);
        let b = Matrix::from_fn(8, 3, |_, _| next());
        for ridge in [0.0, 0.5] {
            let x = spd_solve(&a, ridge, &b).unwrap();
            let mut ax = a.as_matrix().matmul(&x);
            for i in 0..8 {
                for c in 0..3 {
                    ax.set(i, c, ax.get(i, c) + ridge as f32 * x.get(i, c));
                }
            }
            let residual = ax.sub(&b).frobenius_norm();
            assert!(
                residual <= 1e-4 * b.frobenius_norm(),
                "residual {residual} too large at ridge {ridge}"
            );
        }
    }

    #[test]
    fn spd_solve_rejects_singular() {
        let a = diag(&[1.0, 0.0]);
        let b = Matrix::identity(2);
        let err = spd_solve(&a, 0.0, &b).unwrap_err();
        assert!(matches!(err, Error::SingularSystem { .. }));
    }

    #[test]
    fn spd_solve_rejects_shape_mismatch() {
        let a = diag(&[1.0, 2.0]);
        let b = Matrix::zeros(3, 1);
        assert!(matches!(
            spd_solve(&a, 0.0, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mean_eigenvalue_closed_forms() {
        assert_eq!(mean_eigenvalue(&diag(&[1.0; 4])), 1.0);
        assert_eq!(mean_eigenvalue(&diag(&[2.0, 4.0, 6.0])), 4.0);
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax(&Matrix::from_vec(1, 2, vec![0.0, 0.0]));
        assert_eq!(s.row(0), &[0.5, 0.5]);

        let s = row_softmax(&Matrix::from_vec(1, 3, vec![1000.0, 1000.0, 1000.0]));
        for &v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }

        let s = row_softmax(&Matrix::from_vec(1, 2, vec![0.0, 3.0f32.ln()]));
        assert!((s.get(0, 0) - 0.25).abs() < 1e-6);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-6);
    }

    #[test]
    fn cosine_examples() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!((mean_token_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        let neg = Matrix::from_vec(2, 2, vec![-1.0, 0.0, 0.0, -1.0]);
        assert!((mean_token_cosine(&a, &neg).unwrap() + 1.0).abs() < 1e-12);

        let b = Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 0.0]);
        let expected = (1.0 / 2f64.sqrt()) / 2.0;
        assert!((mean_token_cosine(&a, &b).unwrap() - expected).abs() < 1e-7);
    }

    #[test]
    fn cosine_skips_degenerate_rows() {
        let a = Matrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 0.0]);
        let b = Matrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        assert!((mean_token_cosine(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        let zero = Matrix::zeros(2, 2);
        assert!(matches!(
            mean_token_cosine(&zero, &b),
            Err(Error::DegenerateRows)
        ));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0f32..50.0, 1..24)) {
            let m = Matrix::from_vec(1, values.len(), values);
            let s = row_softmax(&m);
            let sum: f64 = s.row(0).iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(s.row(0).iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(
            // Values on a 1/64 grid with an integer shift keep `v + shift`
            // exact in f32, so this tests the softmax, not input rounding.
            grid in proptest::collection::vec(-1280i32..1280, 2..16),
            shift in -100i32..100,
        ) {
            let values: Vec<f32> = grid.iter().map(|&k| k as f32 / 64.0).collect();
            let n = values.len();
            let base = Matrix::from_vec(1, n, values.clone());
            let shifted = Matrix::from_vec(1, n, values.iter().map(|v| v + shift as f32).collect());
            let (a, b) = (row_softmax(&base), row_softmax(&shifted));
            for c in 0..n {
                prop_assert!((a.get(0, c) - b.get(0, c)).abs() < 1e-6);
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            rows in 1usize..5,
            cols in 1usize..6,
            seed in 0u64..1000,
            scale in 0.1f32..10.0,
        ) {
            let mut next = lcg_stream(seed);
            let a = Matrix::from_fn(rows, cols, |_, _| next() + 0.01);
            let b = Matrix::from_fn(rows, cols, |_, _| next() + 0.01);
            let fwd = mean_token_cosine(&a, &b).unwrap();
            let rev = mean_token_cosine(&b, &a).unwrap();
            prop_assert!((fwd - rev).abs() < 1e-9);

            let mut scaled = a.clone();
            for v in scaled.row_mut(0) {
                *v *= scale;
            }
            let scaled_sim = mean_token_cosine(&scaled, &b).unwrap();
            prop_assert!((fwd - scaled_sim).abs() < 1e-6);
        }

        #[test]
        fn solve_multiply_back(seed in 0u64..200, n in 2usize..9, ridge in 0.0f64..2.0) {
            let a = random_spd(n, seed);
            let mut next = lcg_stream(seed.wrapping_add(1));
            let b = Matrix::from_fn(n, 2, |_, _| next());
            let x = spd_solve(&a, ridge, &b).unwrap();
            let mut ax = a.as_matrix().matmul(&x);
            for i in 0..n {
                for c in 0..2 {
                    ax.set(i, c, ax.get(i, c) + ridge as f32 * x.get(i, c));
                }
            }
            let rel = ax.sub(&b).frobenius_norm() / b.frobenius_norm().max(1e-30);
            prop_assert!(rel <= 1e-4, "relative residual {rel}");
        }

        #[test]
        fn trace_mean_matches_definition(seed in 0u64..100, n in 1usize..8) {
            let a = random_spd(n, seed);
            let direct: f64 = (0..n).map(|i| a.as_matrix().get(i, i) as f64).sum::<f64>() / n as f64;
            prop_assert_eq!(mean_eigenvalue(&a), direct);
        }
    }
}
