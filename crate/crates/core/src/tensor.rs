//! Dense row-major `f32` kernels.
//!
//! Storage is `f32`; every reduction (dot products, LogSumExp sums, norms)
//! accumulates in `f64` strictly left to right, so results are reproducible
//! bit for bit on a given platform.

use crate::error::{ApeError, Result};

/// Row-major matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ApeError::shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        ensure_finite(&data)?;
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ApeError::shape("ragged rows"));
        }
        Mat::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Copies columns `start..start + width` of every row (one attention head).
    pub fn col_block(&self, start: usize, width: usize) -> Result<Mat> {
        if start + width > self.cols {
            return Err(ApeError::shape(format!(
                "column block {start}..{} exceeds {} columns",
                start + width,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Ok(Mat {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    /// Writes `block` into columns starting at `start`.
    pub(crate) fn set_col_block(&mut self, start: usize, block: &Mat) {
        debug_assert_eq!(block.rows, self.rows);
        for r in 0..self.rows {
            self.row_mut(r)[start..start + block.cols].copy_from_slice(block.row(r));
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(ApeError::shape("vstack column mismatch"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Mat { rows, cols, data })
    }
}

pub(crate) fn ensure_finite(xs: &[f32]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(ApeError::Numeric(format!("non-finite value at index {i}"))),
        None => Ok(()),
    }
}

/// Left-to-right `f64` dot product.
pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = 0.0f64;
    for (a, b) in u.iter().zip(v) {
        acc += f64::from(*a) * f64::from(*b);
    }
    acc
}

/// `a · bᵀ`: `out[i][j] = Σ_k a[i][k]·b[j][k]`.
pub fn matmul_t(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(ApeError::shape(format!(
            "matmul_t needs equal inner dims, got {}x{} and {}x{} (transposed)",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut data = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            data.push(dot(ai, b.row(j)) as f32);
        }
    }
    ensure_finite(&data)?;
    Ok(Mat {
        rows: a.rows,
        cols: b.rows,
        data,
    })
}

/// Stable LogSumExp in `f64`.
pub fn logsumexp_f64(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(ApeError::invalid("logsumexp of an empty vector"));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(ApeError::Numeric("logsumexp input not finite".into()));
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for x in xs {
        sum += (x - max).exp();
    }
    Ok(max + sum.ln())
}

/// `max(x) + ln Σ exp(x − max(x))`.
pub fn logsumexp_row(x: &[f32]) -> Result<f32> {
    let xs: Vec<f64> = x.iter().map(|v| f64::from(*v)).collect();
    logsumexp_f64(&xs).map(|v| v as f32)
}

/// `softmax(x / T)` computed through max subtraction.
pub fn softmax_row(x: &[f32], temperature: f32) -> Result<Vec<f32>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(ApeError::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let t = f64::from(temperature);
    let scaled: Vec<f64> = x.iter().map(|v| f64::from(*v) / t).collect();
    let lse = logsumexp_f64(&scaled)?;
    Ok(scaled.iter().map(|v| (v - lse).exp() as f32).collect())
}

pub fn l2_norm(u: &[f32]) -> f32 {
    dot(u, u).sqrt() as f32
}

/// Cosine similarity; rejects zero-norm inputs.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(ApeError::shape(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(ApeError::invalid("cosine of a zero-norm vector"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0) as f32)
}

/// Which key columns each query row may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum RowMask {
    Full,
    /// Row `r` sees columns `0..=r + offset`.
    Causal { offset: usize },
    Explicit {
        rows: usize,
        cols: usize,
        visible: Vec<bool>,
    },
}

impl RowMask {
    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        match self {
            RowMask::Full => true,
            RowMask::Causal { offset } => col <= row + offset,
            RowMask::Explicit { cols, visible, .. } => visible[row * cols + col],
        }
    }

    /// Checks the mask against a `rows x cols` logit block; every row needs a visible column.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        match self {
            RowMask::Full | RowMask::Causal { .. } => {
                if cols == 0 && rows > 0 {
                    return Err(ApeError::invalid("attention over zero keys"));
                }
            }
            RowMask::Explicit {
                rows: mr,
                cols: mc,
                visible,
            } => {
                if *mr != rows || *mc != cols || visible.len() != rows * cols {
                    return Err(ApeError::shape(format!(
                        "mask is {mr}x{mc}, logits are {rows}x{cols}"
                    )));
                }
                for r in 0..rows {
                    if !visible[r * cols..(r + 1) * cols].iter().any(|v| *v) {
                        return Err(ApeError::invalid(format!("query row {r} is fully masked")));
                    }
                }
            }
        }
        Ok(())
    }
}
