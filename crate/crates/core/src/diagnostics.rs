//! KV-state statistics on the toy model: cross-sample similarity, magnitude
//! and query–key profiles, the initial-key rotation experiment, and
//! LogSumExp as a function of temperature.
//!
//! A token's state is the full hidden-width vector (all heads concatenated,
//! keys after RoPE). Profiles report per-position mean and population
//! standard deviation; samples of unequal length are truncated to the
//! shortest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{ApeConfig, AttentionMode};
use crate::error::{ApeError, Result};
use crate::kv_store::{KvSegment, Role};
use crate::model::Model;
use crate::rope::Layout;
use crate::tensor::{cosine, dot, l2_norm, logsumexp_f64, Mat};
use crate::tuner::{encode_sequential, l2_distance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ProfileReport {
    /// Builds a report from one value list per position.
    pub fn from_columns(layer: usize, columns: &[Vec<f64>]) -> Self {
        let mut mean = Vec::with_capacity(columns.len());
        let mut std = Vec::with_capacity(columns.len());
        for col in columns {
            let n = col.len().max(1) as f64;
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(var.sqrt());
        }
        ProfileReport { layer, mean, std }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// CSV rows `layer,position,mean,std` without header.
    pub fn csv_rows(&self) -> Vec<String> {
        self.mean
            .iter()
            .zip(&self.std)
            .enumerate()
            .map(|(p, (m, s))| format!("{},{p},{m},{s}", self.layer))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    Key,
    Value,
}

/// Per-position state vectors: `states[position] = hidden-width vector`.
pub type SampleStates = Vec<Vec<f32>>;

fn check_layer(model: &Model, layer: usize) -> Result<()> {
    if layer >= model.spec().n_layers {
        return Err(ApeError::invalid(format!(
            "layer {layer} out of range for a {}-layer model",
            model.spec().n_layers
        )));
    }
    Ok(())
}

fn rows_of(m: &Mat) -> SampleStates {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Key or value states of one sample at `layer`, encoded standalone from position 0.
pub fn sample_states(model: &Model, sample: &[u8], layer: usize, kind: StateKind) -> Result<SampleStates> {
    check_layer(model, layer)?;
    let traces = model.layer_states(sample)?;
    let t = &traces[layer];
    Ok(rows_of(match kind {
        StateKind::Key => &t.k,
        StateKind::Value => &t.v,
    }))
}

fn min_len(samples: &[SampleStates]) -> Result<usize> {
    let n = samples.iter().map(Vec::len).min().unwrap_or(0);
    if n == 0 {
        return Err(ApeError::invalid("empty sample"));
    }
    Ok(n)
}

/// Mean pairwise cosine across samples at each position.
pub fn similarity_profile_from_states(layer: usize, samples: &[SampleStates]) -> Result<ProfileReport> {
    if samples.len() < 2 {
        return Err(ApeError::invalid("similarity profile needs at least two samples"));
    }
    let n = min_len(samples)?;
    let mut columns = Vec::with_capacity(n);
    for p in 0..n {
        let mut col = Vec::new();
        for i in 0..samples.len() {
            for j in i + 1..samples.len() {
                col.push(f64::from(cosine(&samples[i][p], &samples[j][p])?));
            }
        }
        columns.push(col);
    }
    Ok(ProfileReport::from_columns(layer, &columns))
}

/// Cosine of the position-0 state against the state at each position.
pub fn initial_vs_rest_from_states(layer: usize, samples: &[SampleStates]) -> Result<ProfileReport> {
    if samples.is_empty() {
        return Err(ApeError::invalid("no samples"));
    }
    let n = min_len(samples)?;
    let mut columns = vec![Vec::with_capacity(samples.len()); n];
    for s in samples {
        for (p, col) in columns.iter_mut().enumerate() {
            col.push(f64::from(cosine(&s[0], &s[p])?));
        }
    }
    Ok(ProfileReport::from_columns(layer, &columns))
}

/// L2 norm of the state at each position.
pub fn magnitude_from_states(layer: usize, samples: &[SampleStates]) -> Result<ProfileReport> {
    if samples.is_empty() {
        return Err(ApeError::invalid("no samples"));
    }
    let n = min_len(samples)?;
    let mut columns = vec![Vec::with_capacity(samples.len()); n];
    for s in samples {
        for (p, col) in columns.iter_mut().enumerate() {
            col.push(f64::from(l2_norm(&s[p])));
        }
    }
    Ok(ProfileReport::from_columns(layer, &columns))
}

fn collect_states(model: &Model, samples: &[Vec<u8>], layer: usize, kind: StateKind) -> Result<Vec<SampleStates>> {
    samples
        .iter()
        .map(|s| sample_states(model, s, layer, kind))
        .collect()
}

pub fn key_similarity_profile(model: &Model, samples: &[Vec<u8>], layer: usize) -> Result<ProfileReport> {
    if samples.len() < 2 {
        return Err(ApeError::invalid("similarity profile needs at least two samples"));
    }
    similarity_profile_from_states(layer, &collect_states(model, samples, layer, StateKind::Key)?)
}

pub fn initial_vs_rest_similarity(
    model: &Model,
    samples: &[Vec<u8>],
    layer: usize,
    kind: StateKind,
) -> Result<ProfileReport> {
    initial_vs_rest_from_states(layer, &collect_states(model, samples, layer, kind)?)
}

pub fn magnitude_profile(
    model: &Model,
    samples: &[Vec<u8>],
    layer: usize,
    kind: StateKind,
) -> Result<ProfileReport> {
    magnitude_from_states(layer, &collect_states(model, samples, layer, kind)?)
}

/// Dot products of the last token's query against every key of the sample
/// (summed over heads, unscaled).
pub fn qk_product_profile(model: &Model, sample: &[u8], layer: usize) -> Result<Vec<f64>> {
    check_layer(model, layer)?;
    if sample.is_empty() {
        return Err(ApeError::invalid("empty sample"));
    }
    let traces = model.layer_states(sample)?;
    let t = &traces[layer];
    let last = t.q.row(t.q.rows() - 1);
    Ok((0..t.k.rows()).map(|p| dot(last, t.k.row(p))).collect())
}

/// Per-row `LSE(Q·Kᵀ / (T·√d))` for each temperature: `out[t][row]`.
pub fn lse_vs_temperature(q: &Mat, k: &Mat, t_grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    if q.cols() != k.cols() {
        return Err(ApeError::shape("query and key widths differ"));
    }
    if k.rows() == 0 {
        return Err(ApeError::invalid("no keys"));
    }
    if t_grid.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(ApeError::invalid("temperatures must lie in (0, 1]"));
    }
    let sqrt_d = (q.cols() as f64).sqrt();
    let raw: Vec<Vec<f64>> = (0..q.rows())
        .map(|r| (0..k.rows()).map(|c| dot(q.row(r), k.row(c)) / sqrt_d).collect())
        .collect();
    t_grid
        .iter()
        .map(|t| {
            raw.iter()
                .map(|row| {
                    let scaled: Vec<f64> = row.iter().map(|z| z / t).collect();
                    logsumexp_f64(&scaled)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisMode {
    /// One rotation plane for every context.
    Shared,
    /// An independent rotation plane per context.
    PerContext,
}

impl AxisMode {
    pub fn label(self) -> &'static str {
        match self {
            AxisMode::Shared => "shared",
            AxisMode::PerContext => "per-context",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationRow {
    pub degree: f64,
    pub axis_mode: AxisMode,
    pub divergence: f64,
}

/// Orthonormal pair spanning a random plane in `dim`-space.
#[derive(Debug, Clone)]
pub struct RotationPlane {
    u: Vec<f64>,
    w: Vec<f64>,
}

impl RotationPlane {
    pub fn random(rng: &mut impl Rng, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(ApeError::invalid("rotation needs at least two dimensions"));
        }
        let mut draw = || -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
        let normalise = |v: &mut Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
        };
        let mut u = draw();
        normalise(&mut u);
        let mut w = draw();
        let proj: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
        w.iter_mut().zip(&u).for_each(|(x, ui)| *x -= proj * ui);
        normalise(&mut w);
        Ok(RotationPlane { u, w })
    }

    /// Rotates `x` by `radians` within the plane; the orthogonal complement is untouched.
    pub fn rotate(&self, x: &mut [f32], radians: f64) {
        let a: f64 = x.iter().zip(&self.u).map(|(v, u)| f64::from(*v) * u).sum();
        let b: f64 = x.iter().zip(&self.w).map(|(v, w)| f64::from(*v) * w).sum();
        let (sin, cos) = radians.sin_cos();
        let da = (cos - 1.0) * a - sin * b;
        let db = sin * a + (cos - 1.0) * b;
        for ((v, u), w) in x.iter_mut().zip(&self.u).zip(&self.w) {
            *v = (f64::from(*v) + da * u + db * w) as f32;
        }
    }
}

fn rotate_initial_keys(seg: &mut KvSegment, plane: &RotationPlane, radians: f64) {
    if seg.seq_len == 0 {
        return;
    }
    for l in 0..seg.layers {
        for h in 0..seg.heads {
            plane.rotate(seg.key_mut(l, h, 0), radians);
        }
    }
}

/// Rotates the first key state of every context (all layers and heads) by
/// each angle and reports the L2 divergence of the final-row logits from the
/// unrotated run.
pub fn rotation_experiment(
    model: &Model,
    contexts: &[Vec<u8>],
    query: &[u8],
    degrees: &[f64],
    axis_mode: AxisMode,
    layout: Layout,
    seed: u64,
) -> Result<Vec<RotationRow>> {
    if let Some(d) = degrees.iter().find(|d| !(0.0..=360.0).contains(*d)) {
        return Err(ApeError::invalid(format!("rotation degree {d} outside [0, 360]")));
    }
    if contexts.is_empty() {
        return Err(ApeError::invalid("rotation experiment needs contexts"));
    }
    let (mode, base) = match layout {
        Layout::Parallel => (
            AttentionMode::Parallel,
            contexts
                .iter()
                .map(|c| model.encode_segment(c, Role::Context, None, 0))
                .collect::<Result<Vec<_>>>()?,
        ),
        Layout::Sequential => {
            let empty = model.encode_segment(&[], Role::Prefix, None, 0)?;
            (AttentionMode::Sequential, encode_sequential(model, &empty, contexts)?)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes: Vec<RotationPlane> = match axis_mode {
        AxisMode::Shared => {
            let p = RotationPlane::random(&mut rng, model.spec().head_dim)?;
            vec![p; contexts.len()]
        }
        AxisMode::PerContext => (0..contexts.len())
            .map(|_| RotationPlane::random(&mut rng, model.spec().head_dim))
            .collect::<Result<_>>()?,
    };
    let cfg = ApeConfig::default();
    let final_logits = |caches: &[KvSegment]| -> Result<Vec<f32>> {
        let out = model.decode_with_cache(query, None, caches, mode, &cfg, 0)?;
        Ok(out.prefill_logits.last().cloned().unwrap_or_default())
    };
    let reference = final_logits(&base)?;
    degrees
        .iter()
        .map(|&degree| {
            let radians = degree.to_radians();
            let mut caches = base.clone();
            for (seg, plane) in caches.iter_mut().zip(&planes) {
                rotate_initial_keys(seg, plane, radians);
            }
            Ok(RotationRow {
                degree,
                axis_mode,
                divergence: l2_distance(&final_logits(&caches)?, &reference),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_states_have_unit_similarity() {
        let s: SampleStates = vec![vec![1.0, 2.0], vec![-0.5, 0.3]];
        let r = similarity_profile_from_states(0, &[s.clone(), s.clone(), s]).unwrap();
        for (m, sd) in r.mean.iter().zip(&r.std) {
            assert!((m - 1.0).abs() < 1e-7);
            assert!(*sd < 1e-7);
        }
    }

    #[test]
    fn opposite_states_have_negative_similarity() {
        let a: SampleStates = vec![vec![1.0, 2.0]];
        let b: SampleStates = vec![vec![-1.0, -2.0]];
        let r = similarity_profile_from_states(0, &[a, b]).unwrap();
        assert!((r.mean[0] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn zero_state_has_zero_magnitude() {
        let s: SampleStates = vec![vec![0.0; 4], vec![3.0, 4.0, 0.0, 0.0]];
        let r = magnitude_from_states(1, &[s]).unwrap();
        assert_eq!(r.mean, vec![0.0, 5.0]);
        assert_eq!(r.csv_rows()[1], "1,1,5,0");
    }

    #[test]
    fn truncates_to_shortest() {
        let a: SampleStates = vec![vec![1.0], vec![2.0], vec![3.0]];
        let b: SampleStates = vec![vec![1.0], vec![2.0]];
        assert_eq!(magnitude_from_states(0, &[a, b]).unwrap().len(), 2);
    }

    #[test]
    fn lse_constant_and_zero_logits() {
        let k = Mat::new(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let q = Mat::new(1, 2, vec![2.0, 0.0]).unwrap();
        let grid = [1.0, 0.5, 0.25];
        let curve = lse_vs_temperature(&q, &k, &grid).unwrap();
        let c = 2.0 / 2f64.sqrt();
        for (t, row) in grid.iter().zip(&curve) {
            assert!((row[0] - (c / t + 3f64.ln())).abs() < 1e-12);
        }
        let zero = Mat::new(1, 2, vec![0.0, 0.0]).unwrap();
        for row in lse_vs_temperature(&zero, &k, &grid).unwrap() {
            assert!((row[0] - 3f64.ln()).abs() < 1e-12);
        }
        assert!(lse_vs_temperature(&q, &k, &[0.0]).is_err());
    }

    #[test]
    fn plane_rotation_preserves_norm_and_full_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plane = RotationPlane::random(&mut rng, 8).unwrap();
        let x: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        let mut y = x.clone();
        plane.rotate(&mut y, 1.1);
        assert!((l2_norm(&x) - l2_norm(&y)).abs() < 1e-5);
        let mut z = x.clone();
        plane.rotate(&mut z, 0.0);
        assert_eq!(z, x);
        let mut full = x.clone();
        plane.rotate(&mut full, std::f64::consts::TAU);
        for (a, b) in full.iter().zip(&x) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
