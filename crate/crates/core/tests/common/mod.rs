//! Reference implementations used by the integration and acceptance tests.
//! Everything here is computed directly in f64 from the definitions, without
//! calling the library routine under test.

#![allow(dead_code)]

use std::collections::BTreeSet;

use ape_core::cache_sim::Workload;
use ape_core::Mat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Mat {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * scale)
        .collect();
    Mat::new(rows, cols, data).unwrap()
}

pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

pub fn norm64(a: &[f32]) -> f64 {
    dot64(a, a).sqrt()
}

pub fn cosine64(a: &[f32], b: &[f32]) -> f64 {
    dot64(a, b) / (norm64(a) * norm64(b))
}

/// `max |got - want| / max(max |want|, 1e-6)`.
pub fn rel_err(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0f64, |m, w| m.max(w.abs())).max(1e-6);
    let diff = got
        .iter()
        .zip(want)
        .fold(0.0f64, |m, (g, w)| m.max((f64::from(*g) - w).abs()));
    diff / scale
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((f64::from(*x) - f64::from(*y)).abs()))
}

/// Softmax attention written out per row. `visible(r, c)` selects keys.
pub fn naive_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    temperature: f64,
    visible: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let scale = 1.0 / ((q.cols() as f64).sqrt() * temperature);
    let mut out = Vec::with_capacity(q.rows() * v.cols());
    for r in 0..q.rows() {
        let cols: Vec<usize> = (0..k.rows()).filter(|c| visible(r, *c)).collect();
        let logits: Vec<f64> = cols.iter().map(|c| dot64(q.row(r), k.row(*c)) * scale).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for d in 0..v.cols() {
            out.push(cols.iter().zip(&w).map(|(c, wi)| wi * f64::from(v.get(*c, d))).sum::<f64>() / z);
        }
    }
    out
}

/// One APE problem for a single head: prefix keys, context keys, and the
/// query block's own keys (query rows are the last `q.rows()` of them).
pub struct ApeProblem {
    pub q: Mat,
    pub prefix: Option<(Mat, Mat)>,
    pub contexts: Vec<(Mat, Mat)>,
    pub own: (Mat, Mat),
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum OracleScaling {
    /// One sum over every context token, raised to `S`.
    Aggregate,
    /// Each context's sum raised to `S` separately.
    PerContext,
}

/// APE output from the closed-form weights:
///
/// prefix / own key j:   exp(z_j) / Z
/// context i, key j:     exp(z_j / T) · A^(S-1) / Z
/// Z = Σ_prefix exp(z) + Σ A^S + Σ_own exp(z)
///
/// where `A` is either the sum of `exp(z/T)` over all context keys
/// (aggregate) or over context `i` alone (per-context). Own keys are causal.
pub fn ape_oracle(p: &ApeProblem, temperature: f64, scale: f64, mode: OracleScaling) -> Vec<f64> {
    let d = p.q.cols();
    let inv = 1.0 / (d as f64).sqrt();
    let own_len = p.own.0.rows();
    let q_rows = p.q.rows();
    let mut out = Vec::new();
    for r in 0..q_rows {
        let qr = p.q.row(r);
        let exps = |k: &Mat, t: f64| -> Vec<f64> {
            (0..k.rows()).map(|c| (dot64(qr, k.row(c)) * inv / t).exp()).collect()
        };
        let prefix_e = p.prefix.as_ref().map_or_else(Vec::new, |(k, _)| exps(k, 1.0));
        let ctx_e: Vec<Vec<f64>> = p.contexts.iter().map(|(k, _)| exps(k, temperature)).collect();
        let visible = own_len - q_rows + r + 1;
        let own_e: Vec<f64> = exps(&p.own.0, 1.0).into_iter().take(visible).collect();

        let sums: Vec<f64> = match mode {
            OracleScaling::Aggregate => vec![ctx_e.iter().flatten().sum::<f64>(); ctx_e.len()],
            OracleScaling::PerContext => ctx_e.iter().map(|e| e.iter().sum()).collect(),
        };
        let ctx_mass: f64 = match mode {
            OracleScaling::Aggregate => sums[0].powf(scale),
            OracleScaling::PerContext => sums.iter().map(|a| a.powf(scale)).sum(),
        };
        let z = prefix_e.iter().sum::<f64>() + ctx_mass + own_e.iter().sum::<f64>();

        let mut acc = vec![0.0f64; p.own.1.cols()];
        let mut add = |w: f64, v: &[f32]| {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += w * f64::from(*x);
            }
        };
        if let Some((_, v)) = &p.prefix {
            for (j, e) in prefix_e.iter().enumerate() {
                add(e / z, v.row(j));
            }
        }
        for ((e, (_, v)), a) in ctx_e.iter().zip(&p.contexts).zip(&sums) {
            let factor = a.powf(scale - 1.0);
            for (j, ej) in e.iter().enumerate() {
                add(ej * factor / z, v.row(j));
            }
        }
        for (j, e) in own_e.iter().enumerate() {
            add(e / z, p.own.1.row(j));
        }
        out.extend(acc);
    }
    out
}

/// Log-softmax of `logits` at `index`, shifted by the max.
pub fn log_softmax64(logits: &[f32], index: usize) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(f64::from(*v)));
    let z: f64 = logits.iter().map(|v| (f64::from(*v) - m).exp()).sum();
    f64::from(logits[index]) - m - z.ln()
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Best prefix-cache hit count by trying every subset of the query-prefix
/// trie nodes. Returns `(hits, total)`.
pub fn brute_force_prefix_hits(w: &Workload) -> (u64, u64) {
    let mut nodes: BTreeSet<Vec<usize>> = BTreeSet::new();
    for q in &w.queries {
        for d in 1..=q.len() {
            nodes.insert(q[..d].to_vec());
        }
    }
    let nodes: Vec<Vec<usize>> = nodes.into_iter().collect();
    assert!(nodes.len() <= 20, "too many trie nodes for brute force");
    let total: u64 = w.queries.iter().flatten().map(|c| w.context_lens[*c]).sum();
    let mut best = 0;
    for mask in 0u64..(1 << nodes.len()) {
        let chosen: BTreeSet<&Vec<usize>> = nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, n)| n)
            .collect();
        let closed = chosen
            .iter()
            .all(|n| n.len() == 1 || chosen.contains(&n[..n.len() - 1].to_vec()));
        if !closed {
            continue;
        }
        let storage: u64 = chosen.iter().map(|n| w.context_lens[*n.last().unwrap()]).sum();
        if storage > w.budget {
            continue;
        }
        let mut hits = 0;
        for q in &w.queries {
            for d in 1..=q.len() {
                if !chosen.contains(&q[..d].to_vec()) {
                    break;
                }
                hits += w.context_lens[q[d - 1]];
            }
        }
        best = best.max(hits);
    }
    (best, total)
}

pub fn random_text(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<u8> {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz     .,";
    let n = rng.random_range(min..=max);
    (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}
