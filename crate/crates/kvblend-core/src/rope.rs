//! Rotary positional embedding and its on-the-fly recovery.
//!
//! K vectors are stored without positional encoding everywhere in this crate
//! ("cached once, reused anywhere"); rotation to an absolute position happens
//! inside attention scoring and in [`realign`]. Attention scores then depend
//! only on relative distance, which is what makes a chunk's cache reusable at
//! any offset.

use crate::error::{Error, Result};
use crate::linalg::{for_each_row, Matrix};

/// Per-pair rotation frequencies theta_i = theta_base^(-2i/d), i in [0, d/2).
#[derive(Debug, Clone)]
pub struct RopeParams {
    head_dim: usize,
    theta_base: f64,
    thetas: Vec<f64>,
}

impl RopeParams {
    pub fn new(head_dim: usize, theta_base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::config(
                "head_dim",
                format!("must be a positive even number, got {head_dim}"),
            ));
        }
        if !theta_base.is_finite() || theta_base <= 0.0 {
            return Err(Error::config(
                "rope_theta_base",
                format!("must be positive, got {theta_base}"),
            ));
        }
        let d = head_dim as f64;
        let thetas = (0..head_dim / 2)
            .map(|i| theta_base.powf(-2.0 * i as f64 / d))
            .collect();
        Ok(RopeParams {
            head_dim,
            theta_base,
            thetas,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }
}

/// Rotate adjacent component pairs (2i, 2i+1) by angle position * theta_i.
/// Angles and trig run in f64; components round back to f32. Norm-preserving.
pub fn rotate(vec: &[f32], position: usize, params: &RopeParams) -> Result<Vec<f32>> {
    if vec.len() != params.head_dim {
        return Err(Error::shape(
            format!("vector of length {}", params.head_dim),
            format!("length {}", vec.len()),
        ));
    }
    let mut out = vec![0.0f32; vec.len()];
    rotate_into(vec, position, params, &mut out);
    Ok(out)
}

pub(crate) fn rotate_into(vec: &[f32], position: usize, params: &RopeParams, out: &mut [f32]) {
    let m = position as f64;
    for (i, &theta) in params.thetas.iter().enumerate() {
        let angle = m * theta;
        let (sin, cos) = angle.sin_cos();
        let a = vec[2 * i] as f64;
        let b = vec[2 * i + 1] as f64;
        out[2 * i] = (a * cos - b * sin) as f32;
        out[2 * i + 1] = (a * sin + b * cos) as f32;
    }
}

/// Rotate every head-sized slice of a hidden-dim row to `position`.
pub(crate) fn rotate_hidden_row(row: &[f32], position: usize, params: &RopeParams, out: &mut [f32]) {
    debug_assert_eq!(row.len() % params.head_dim, 0);
    for (src, dst) in row
        .chunks_exact(params.head_dim)
        .zip(out.chunks_exact_mut(params.head_dim))
    {
        rotate_into(src, position, params, dst);
    }
}

/// Rotate position-free K rows (tokens × hidden, one head-dim slice per head)
/// to their target absolute positions. One elementwise pass per token.
pub fn realign(chunk_k: &Matrix, target_positions: &[usize], params: &RopeParams) -> Result<Matrix> {
    if target_positions.len() != chunk_k.rows() {
        return Err(Error::domain(format!(
            "realign: {} target positions for {} tokens",
            target_positions.len(),
            chunk_k.rows()
        )));
    }
    if !target_positions.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::domain(
            "realign: target positions must be strictly increasing".to_string(),
        ));
    }
    if !chunk_k.cols().is_multiple_of(params.head_dim) {
        return Err(Error::shape(
            format!("row length divisible by head_dim {}", params.head_dim),
            format!("{}", chunk_k.cols()),
        ));
    }
    let cols = chunk_k.cols();
    let mut out = Matrix::zeros(chunk_k.rows(), cols);
    for_each_row(out.data_mut(), cols, |i, row| {
        rotate_hidden_row(chunk_k.row(i), target_positions[i], params, row);
    });
    Ok(out)
}
