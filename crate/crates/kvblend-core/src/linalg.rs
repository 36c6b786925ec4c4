//! Flat row-major f32 matrices and the handful of kernels the engine needs.
//!
//! All heavy loops are parallelized over output rows when the `parallel`
//! feature is enabled (the default) and fall back to plain sequential loops
//! without it. Each output element is always accumulated by one thread in
//! ascending index order, so results are bitwise identical in both modes.

use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Dense row-major matrix of f32.
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{rows}x{cols} = {} elements", rows * cols),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn push_row(&mut self, row: &[f32]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Gather the given rows into a new matrix, in the order given.
    pub fn take_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn set_row(&mut self, r: usize, row: &[f32]) {
        self.row_mut(r).copy_from_slice(row);
    }
}

/// Multiply-accumulate counter. Counts projections, attention score/value
/// products, MLP matmuls and the unembedding; normalization, rotation and
/// softmax are excluded on every code path so ratios stay comparable.
#[derive(Debug, Default)]
pub struct MacCounter(AtomicU64);

impl MacCounter {
    pub fn new() -> Self {
        MacCounter(AtomicU64::new(0))
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Run `f(row_index, out_row)` for every `cols`-wide row of `out`,
/// in parallel when the feature is on.
pub(crate) fn for_each_row<F>(out: &mut [f32], cols: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, row) in out.chunks_mut(cols).enumerate() {
            f(i, row);
        }
    }
}

/// Like [`for_each_row`] over two equally tall outputs with different widths.
pub(crate) fn for_each_row2<F>(a: &mut [f32], a_cols: usize, b: &mut [f32], b_cols: usize, f: F)
where
    F: Fn(usize, &mut [f32], &mut [f32]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        a.par_chunks_mut(a_cols)
            .zip(b.par_chunks_mut(b_cols))
            .enumerate()
            .for_each(|(i, (ra, rb))| f(i, ra, rb));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, (ra, rb)) in a.chunks_mut(a_cols).zip(b.chunks_mut(b_cols)).enumerate() {
            f(i, ra, rb);
        }
    }
}

/// x (n×k) @ w (k×m) -> n×m. Accumulates over k in ascending order per
/// output element.
pub(crate) fn matmul(x: &Matrix, w: &Matrix, macs: &MacCounter) -> Matrix {
    assert_eq!(x.cols(), w.rows(), "matmul inner dimension");
    let (n, k, m) = (x.rows(), x.cols(), w.cols());
    macs.add((n * k * m) as u64);
    let mut out = Matrix::zeros(n, m);
    for_each_row(&mut out.data, m, |i, out_row| {
        let x_row = x.row(i);
        for (kk, &a) in x_row.iter().enumerate() {
            let w_row = w.row(kk);
            for (o, &wv) in out_row.iter_mut().zip(w_row.iter()) {
                *o += a * wv;
            }
        }
    });
    out
}

/// Vector-matrix product: x (len k) @ w (k×m) -> len m.
pub(crate) fn vecmat(x: &[f32], w: &Matrix, macs: &MacCounter) -> Vec<f32> {
    assert_eq!(x.len(), w.rows(), "vecmat inner dimension");
    macs.add((x.len() * w.cols()) as u64);
    let mut out = vec![0.0f32; w.cols()];
    for (kk, &a) in x.iter().enumerate() {
        let w_row = w.row(kk);
        for (o, &wv) in out.iter_mut().zip(w_row.iter()) {
            *o += a * wv;
        }
    }
    out
}

pub(crate) const NORM_EPS: f32 = 1e-5;

/// RMS normalization of a single row, scaled by per-dimension gains.
pub(crate) fn rms_norm_row(row: &[f32], gain: &[f32], out: &mut [f32]) {
    let mut ss = 0.0f32;
    for &v in row {
        ss += v * v;
    }
    let inv = 1.0 / (ss / row.len() as f32 + NORM_EPS).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(row.iter()).zip(gain.iter()) {
        *o = v * inv * g;
    }
}

pub(crate) fn rms_norm(x: &Matrix, gain: &[f32]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let cols = x.cols();
    for_each_row(&mut out.data, cols, |i, out_row| {
        rms_norm_row(x.row(i), gain, out_row);
    });
    out
}

/// GELU (tanh approximation), elementwise.
pub(crate) fn gelu_inplace(x: &mut Matrix) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    let cols = x.cols();
    for_each_row(&mut x.data, cols, |_, row| {
        for v in row.iter_mut() {
            let u = *v;
            *v = 0.5 * u * (1.0 + (C * (u + 0.044715 * u * u * u)).tanh());
        }
    });
}

/// In-place softmax with max subtraction.
pub(crate) fn softmax_row(row: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn add_assign(x: &mut Matrix, y: &Matrix) {
    assert_eq!(x.rows(), y.rows());
    assert_eq!(x.cols(), y.cols());
    let cols = x.cols();
    for_each_row(&mut x.data, cols, |i, row| {
        for (o, &v) in row.iter_mut().zip(y.row(i).iter()) {
            *o += v;
        }
    });
}
