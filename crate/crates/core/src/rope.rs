//! Rotary position embedding and position assignment for the encoding modes.
//!
//! Pairs are interleaved: dims `(2i, 2i+1)` rotate together by
//! `position · base^(−2i/head_dim)` radians. Angles and the rotation itself
//! are evaluated in `f64` before rounding to `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{ApeError, Result};
use crate::tensor::Mat;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub head_dim: usize,
    pub base: f64,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        let p = RopeParams { head_dim, base };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(ApeError::invalid(format!(
                "rope head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if self.base <= 1.0 || !self.base.is_finite() {
            return Err(ApeError::invalid(format!("rope base must exceed 1, got {}", self.base)));
        }
        Ok(())
    }

    fn inv_freq(&self, pair: usize) -> f64 {
        self.base.powf(-(2.0 * pair as f64) / self.head_dim as f64)
    }
}

/// Rotates one head-sized vector in place.
pub fn rotate_in_place(x: &mut [f32], position: usize, params: &RopeParams) {
    if position == 0 {
        return;
    }
    for pair in 0..params.head_dim / 2 {
        let angle = position as f64 * params.inv_freq(pair);
        let (sin, cos) = angle.sin_cos();
        let a = f64::from(x[2 * pair]);
        let b = f64::from(x[2 * pair + 1]);
        x[2 * pair] = (a * cos - b * sin) as f32;
        x[2 * pair + 1] = (a * sin + b * cos) as f32;
    }
}

/// Applies RoPE to every row of `x` (`x.cols == head_dim`) at the given positions.
pub fn apply_rope(x: &Mat, positions: &[usize], params: &RopeParams) -> Result<Mat> {
    params.validate()?;
    if x.cols() != params.head_dim {
        return Err(ApeError::shape(format!(
            "rope expects {} columns, got {}",
            params.head_dim,
            x.cols()
        )));
    }
    if positions.len() != x.rows() {
        return Err(ApeError::shape(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    let mut out = x.clone();
    for (r, &p) in positions.iter().enumerate() {
        rotate_in_place(out.row_mut(r), p, params);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Contexts are laid end to end after the prefix.
    Sequential,
    /// Every context re-uses the same position range right after the prefix.
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionPlan {
    pub prefix_start: usize,
    pub context_starts: Vec<usize>,
    pub query_start: usize,
}

/// Assigns start positions. In parallel layout the query starts after the
/// longest context so it never overlaps any context position.
pub fn plan_positions(
    layout: Layout,
    prefix_len: usize,
    context_lens: &[usize],
    _query_len: usize,
) -> PositionPlan {
    match layout {
        Layout::Parallel => PositionPlan {
            prefix_start: 0,
            context_starts: vec![prefix_len; context_lens.len()],
            query_start: prefix_len + context_lens.iter().copied().max().unwrap_or(0),
        },
        Layout::Sequential => {
            let mut starts = Vec::with_capacity(context_lens.len());
            let mut at = prefix_len;
            for l in context_lens {
                starts.push(at);
                at += l;
            }
            PositionPlan {
                prefix_start: 0,
                context_starts: starts,
                query_start: at,
            }
        }
    }
}
