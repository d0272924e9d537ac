//! Dense row-major matrices and the handful of kernels the model needs.
//!
//! Every kernel assigns each output row to exactly one worker and accumulates
//! in a fixed order, so results are bit-identical for any thread count.

use rayon::prelude::*;

/// Work threshold (multiply-adds) below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Columns `[start, start + len)` as a new matrix.
    pub fn cols_slice(&self, start: usize, len: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, len);
        for r in 0..self.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&self.data[r * self.cols + start..r * self.cols + start + len]);
        }
        out
    }

    /// Writes `src` into columns `[start, start + src.cols)`.
    pub fn set_cols(&mut self, start: usize, src: &Mat) {
        debug_assert_eq!(self.rows, src.rows);
        for r in 0..self.rows {
            self.data[r * self.cols + start..r * self.cols + start + src.cols]
                .copy_from_slice(src.row(r));
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn for_rows(out: &mut [f64], cols: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    if cols == 0 {
        return;
    }
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(m, n);
    for_rows(&mut out.data, n, m * k * n, |i, row| {
        for p in 0..k {
            let s = a.data[i * k + p];
            if s != 0.0 {
                axpy(s, &b.data[p * n..(p + 1) * n], row);
            }
        }
    });
    out
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Mat::zeros(m, n);
    for_rows(&mut out.data, n, m * k * n, |i, row| {
        let ai = &a.data[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, &b.data[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimension");
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(m, n);
    for_rows(&mut out.data, n, m * k * n, |i, row| {
        for p in 0..k {
            let s = a.data[p * m + i];
            if s != 0.0 {
                axpy(s, &b.data[p * n..(p + 1) * n], row);
            }
        }
    });
    out
}
