//! Partial attention, LogSumExp merging, and the three encoding modes.
//!
//! Every mode is expressed as a merge of per-segment [`PartialAttention`]s:
//! a segment's softmax-normalised output plus the per-row LogSumExp of its
//! logits. Softmax over the concatenation of all keys equals the softmax over
//! segment LSEs applied to the segment outputs, so sequential attention is a
//! plain merge, and APE only rescales the context LSE before merging.

use serde::{Deserialize, Serialize};

use crate::error::{ApeError, Result};
use crate::tensor::{dot, logsumexp_f64, Mat, RowMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingMode {
    /// One LSE over all context tokens is scaled by `S` (contexts act as one block).
    Aggregate,
    /// Each context's LSE is scaled by `S` on its own.
    PerContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Sequential,
    Parallel,
    Ape,
}

impl AttentionMode {
    pub fn layout(self) -> crate::rope::Layout {
        match self {
            AttentionMode::Sequential => crate::rope::Layout::Sequential,
            AttentionMode::Parallel | AttentionMode::Ape => crate::rope::Layout::Parallel,
        }
    }
}

/// Temperature, scaling factor and shared prefix applied to parallel contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApeConfig {
    pub temperature: f64,
    pub scale: f64,
    pub scaling_mode: ScalingMode,
    #[serde(default)]
    pub prefix_tokens: Vec<u8>,
}

impl Default for ApeConfig {
    fn default() -> Self {
        ApeConfig {
            temperature: 1.0,
            scale: 1.0,
            scaling_mode: ScalingMode::Aggregate,
            prefix_tokens: Vec::new(),
        }
    }
}

impl ApeConfig {
    pub fn new(temperature: f64, scale: f64, scaling_mode: ScalingMode) -> Result<Self> {
        let cfg = ApeConfig {
            temperature,
            scale,
            scaling_mode,
            prefix_tokens: Vec::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_prefix(mut self, prefix: impl Into<Vec<u8>>) -> Self {
        self.prefix_tokens = prefix.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| v > 0.0 && v <= 1.0;
        if !in_range(self.temperature) {
            return Err(ApeError::invalid(format!(
                "temperature must lie in (0, 1], got {}",
                self.temperature
            )));
        }
        if !in_range(self.scale) {
            return Err(ApeError::invalid(format!(
                "scale must lie in (0, 1], got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Softmax-normalised output of one key segment plus its per-row LogSumExp.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAttention {
    pub out: Mat,
    pub lse: Vec<f64>,
}

impl PartialAttention {
    pub fn rows(&self) -> usize {
        self.out.rows()
    }
}

/// `Softmax(Q·Kᵀ / (T·√d))·V` restricted to visible columns, with its LSE.
pub fn partial_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    mask: &RowMask,
    temperature: f64,
) -> Result<PartialAttention> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(ApeError::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if q.cols() != k.cols() {
        return Err(ApeError::shape(format!(
            "query dim {} vs key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(ApeError::shape(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    mask.validate(q.rows(), k.rows())?;

    let scale = 1.0 / (temperature * (q.cols() as f64).sqrt());
    let mut out = Vec::with_capacity(q.rows() * v.cols());
    let mut lse = Vec::with_capacity(q.rows());
    let mut logits = Vec::with_capacity(k.rows());
    let mut acc = vec![0.0f64; v.cols()];

    for r in 0..q.rows() {
        let qr = q.row(r);
        logits.clear();
        let mut max = f64::NEG_INFINITY;
        for c in 0..k.rows() {
            if mask.is_visible(r, c) {
                let z = dot(qr, k.row(c)) * scale;
                max = max.max(z);
                logits.push((c, z));
            }
        }
        if logits.is_empty() {
            return Err(ApeError::invalid(format!("query row {r} is fully masked")));
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut sum = 0.0f64;
        for &(c, z) in &logits {
            let w = (z - max).exp();
            sum += w;
            for (a, x) in acc.iter_mut().zip(v.row(c)) {
                *a += w * f64::from(*x);
            }
        }
        out.extend(acc.iter().map(|a| (a / sum) as f32));
        lse.push(max + sum.ln());
    }
    if lse.iter().any(|x| !x.is_finite()) {
        return Err(ApeError::Numeric("non-finite LogSumExp".into()));
    }
    Ok(PartialAttention {
        out: Mat::new(q.rows(), v.cols(), out)?,
        lse,
    })
}

/// Standard masked softmax attention, scaled by `1/√d`.
pub fn attend_full(q: &Mat, k: &Mat, v: &Mat, mask: &RowMask) -> Result<Mat> {
    partial_attention(q, k, v, mask, 1.0).map(|p| p.out)
}

/// Adjustment applied to a partial's LSE before merging.
#[derive(Debug, Clone, PartialEq)]
pub enum LseAdjust {
    None,
    /// `lse ← s · lse`
    Scale(f64),
    /// `lse[r] ← lse[r] + offset[r]`
    Offset(Vec<f64>),
}

impl LseAdjust {
    fn apply(&self, row: usize, lse: f64) -> f64 {
        match self {
            LseAdjust::None => lse,
            LseAdjust::Scale(s) => s * lse,
            LseAdjust::Offset(o) => lse + o[row],
        }
    }
}

fn check_mergeable<'a>(
    mut shapes: impl Iterator<Item = (&'a PartialAttention, &'a LseAdjust)>,
) -> Result<(usize, usize)> {
    let Some((first, adj)) = shapes.next() else {
        return Err(ApeError::invalid("merge of zero partials"));
    };
    let dims = (first.out.rows(), first.out.cols());
    let check = |p: &PartialAttention, a: &LseAdjust| -> Result<()> {
        if (p.out.rows(), p.out.cols()) != dims || p.lse.len() != dims.0 {
            return Err(ApeError::shape(format!(
                "partial is {}x{} with {} lse rows, expected {}x{}",
                p.out.rows(),
                p.out.cols(),
                p.lse.len(),
                dims.0,
                dims.1
            )));
        }
        if let LseAdjust::Offset(o) = a {
            if o.len() != dims.0 {
                return Err(ApeError::shape("lse offset length differs from row count"));
            }
        }
        Ok(())
    };
    check(first, adj)?;
    for (p, a) in shapes {
        check(p, a)?;
    }
    Ok(dims)
}

/// Merges partials into one partial: per row the weights are the softmax of
/// the adjusted LSEs, and the merged LSE is their LogSumExp.
pub fn merge_partials(parts: &[(&PartialAttention, LseAdjust)]) -> Result<PartialAttention> {
    let (rows, cols) = check_mergeable(parts.iter().map(|(p, a)| (*p, a)))?;
    let mut out = Vec::with_capacity(rows * cols);
    let mut lse = Vec::with_capacity(rows);
    let mut adjusted = vec![0.0f64; parts.len()];
    let mut acc = vec![0.0f64; cols];
    for r in 0..rows {
        for (slot, (p, a)) in adjusted.iter_mut().zip(parts) {
            *slot = a.apply(r, p.lse[r]);
        }
        let total = logsumexp_f64(&adjusted)?;
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (l, (p, _)) in adjusted.iter().zip(parts) {
            let w = (l - total).exp();
            for (a, x) in acc.iter_mut().zip(p.out.row(r)) {
                *a += w * f64::from(*x);
            }
        }
        out.extend(acc.iter().map(|a| *a as f32));
        lse.push(total);
    }
    Ok(PartialAttention {
        out: Mat::new(rows, cols, out)?,
        lse,
    })
}

/// Merged attention output; see [`merge_partials`].
pub fn merge(parts: &[(&PartialAttention, LseAdjust)]) -> Result<Mat> {
    merge_partials(parts).map(|p| p.out)
}

/// Streaming form of [`merge_partials`]: keeps a running max-LSE per row and
/// rescales the accumulated sums whenever the max grows.
#[derive(Debug, Clone)]
pub struct MergeAccumulator {
    rows: usize,
    cols: usize,
    max_lse: Vec<f64>,
    weight_sum: Vec<f64>,
    out_sum: Vec<f64>,
}

impl MergeAccumulator {
    pub fn new(rows: usize, cols: usize) -> Self {
        MergeAccumulator {
            rows,
            cols,
            max_lse: vec![f64::NEG_INFINITY; rows],
            weight_sum: vec![0.0; rows],
            out_sum: vec![0.0; rows * cols],
        }
    }

    pub fn push(&mut self, part: &PartialAttention, adjust: &LseAdjust) -> Result<()> {
        if part.out.rows() != self.rows || part.out.cols() != self.cols || part.lse.len() != self.rows
        {
            return Err(ApeError::shape("partial does not match accumulator shape"));
        }
        if let LseAdjust::Offset(o) = adjust {
            if o.len() != self.rows {
                return Err(ApeError::shape("lse offset length differs from row count"));
            }
        }
        for r in 0..self.rows {
            let l = adjust.apply(r, part.lse[r]);
            if !l.is_finite() {
                return Err(ApeError::Numeric("non-finite adjusted LSE".into()));
            }
            let new_max = self.max_lse[r].max(l);
            let carry = (self.max_lse[r] - new_max).exp();
            let w = (l - new_max).exp();
            self.weight_sum[r] = self.weight_sum[r] * carry + w;
            let acc = &mut self.out_sum[r * self.cols..(r + 1) * self.cols];
            for (a, x) in acc.iter_mut().zip(part.out.row(r)) {
                *a = *a * carry + w * f64::from(*x);
            }
            self.max_lse[r] = new_max;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<PartialAttention> {
        if self.weight_sum.contains(&0.0) {
            return Err(ApeError::invalid("accumulator finished before any partial was pushed"));
        }
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let s = self.weight_sum[r];
            out.extend(
                self.out_sum[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .map(|a| (a / s) as f32),
            );
        }
        let lse = self
            .max_lse
            .iter()
            .zip(&self.weight_sum)
            .map(|(m, s)| m + s.ln())
            .collect();
        Ok(PartialAttention {
            out: Mat::new(self.rows, self.cols, out)?,
            lse,
        })
    }
}

/// One head's keys/values for a segment, with the position of its first token.
#[derive(Debug, Clone, Copy)]
pub struct HeadKv<'a> {
    pub keys: &'a Mat,
    pub values: &'a Mat,
    pub position_offset: usize,
}

impl HeadKv<'_> {
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }
}

/// The key/value segments a block of query rows attends over, for one head.
///
/// `own` holds the query/generated tokens themselves; the query rows are its
/// last `q.rows()` entries and attend to it causally.
#[derive(Debug, Clone)]
pub struct HeadInputs<'a> {
    pub prefix: Option<HeadKv<'a>>,
    pub contexts: Vec<HeadKv<'a>>,
    pub own: HeadKv<'a>,
}

impl HeadInputs<'_> {
    fn prefix_len(&self) -> usize {
        self.prefix.map_or(0, |p| p.len())
    }

    fn own_mask(&self, q_rows: usize) -> Result<RowMask> {
        if self.own.len() < q_rows {
            return Err(ApeError::shape(format!(
                "{} query rows but only {} own keys",
                q_rows,
                self.own.len()
            )));
        }
        Ok(RowMask::Causal {
            offset: self.own.len() - q_rows,
        })
    }

    fn check_prefix(&self) -> Result<()> {
        if let Some(p) = self.prefix {
            if p.position_offset != 0 {
                return Err(ApeError::invalid("prefix must start at position 0"));
            }
        }
        Ok(())
    }

    /// Contexts laid end to end after the prefix; query tokens follow.
    pub fn check_sequential(&self) -> Result<()> {
        self.check_prefix()?;
        let mut at = self.prefix_len();
        for (i, c) in self.contexts.iter().enumerate() {
            if c.position_offset != at {
                return Err(ApeError::invalid(format!(
                    "sequential layout: context {i} starts at {}, expected {at}",
                    c.position_offset
                )));
            }
            at += c.len();
        }
        if self.own.position_offset != at {
            return Err(ApeError::invalid(format!(
                "sequential layout: query starts at {}, expected {at}",
                self.own.position_offset
            )));
        }
        Ok(())
    }

    /// Every context re-uses the range right after the prefix; the query
    /// starts after the longest context.
    pub fn check_parallel(&self) -> Result<()> {
        self.check_prefix()?;
        let start = self.prefix_len();
        for (i, c) in self.contexts.iter().enumerate() {
            if c.position_offset != start {
                return Err(ApeError::invalid(format!(
                    "parallel layout: context {i} starts at {}, expected {start}",
                    c.position_offset
                )));
            }
        }
        let expected = start + self.contexts.iter().map(HeadKv::len).max().unwrap_or(0);
        if self.own.position_offset != expected {
            return Err(ApeError::invalid(format!(
                "parallel layout: query starts at {}, expected {expected}",
                self.own.position_offset
            )));
        }
        Ok(())
    }

    fn prefix_partial(&self, q: &Mat) -> Result<Option<PartialAttention>> {
        match self.prefix {
            Some(p) if !p.is_empty() => {
                partial_attention(q, p.keys, p.values, &RowMask::Full, 1.0).map(Some)
            }
            _ => Ok(None),
        }
    }

    fn own_partial(&self, q: &Mat) -> Result<PartialAttention> {
        partial_attention(q, self.own.keys, self.own.values, &self.own_mask(q.rows())?, 1.0)
    }

    fn context_partials(&self, q: &Mat, temperature: f64) -> Result<Vec<PartialAttention>> {
        self.contexts
            .iter()
            .filter(|c| !c.is_empty())
            .map(|c| partial_attention(q, c.keys, c.values, &RowMask::Full, temperature))
            .collect()
    }
}

fn plain_merge(
    prefix: Option<&PartialAttention>,
    contexts: &[PartialAttention],
    own: &PartialAttention,
) -> Result<Mat> {
    let mut parts: Vec<(&PartialAttention, LseAdjust)> = Vec::with_capacity(contexts.len() + 2);
    if let Some(p) = prefix {
        parts.push((p, LseAdjust::None));
    }
    parts.extend(contexts.iter().map(|c| (c, LseAdjust::None)));
    parts.push((own, LseAdjust::None));
    merge(&parts)
}

/// Causal attention over prefix, sequentially laid out contexts and own tokens.
pub fn sequential_attention(q: &Mat, inputs: &HeadInputs<'_>) -> Result<Mat> {
    inputs.check_sequential()?;
    let prefix = inputs.prefix_partial(q)?;
    let contexts = inputs.context_partials(q, 1.0)?;
    let own = inputs.own_partial(q)?;
    plain_merge(prefix.as_ref(), &contexts, &own)
}

/// Uncorrected parallel encoding (T = 1, S = 1) over position-reused contexts.
pub fn parallel_attention(q: &Mat, inputs: &HeadInputs<'_>) -> Result<Mat> {
    inputs.check_parallel()?;
    let prefix = inputs.prefix_partial(q)?;
    let contexts = inputs.context_partials(q, 1.0)?;
    let own = inputs.own_partial(q)?;
    plain_merge(prefix.as_ref(), &contexts, &own)
}

/// Merges prefix, context and own partials under an [`ApeConfig`].
///
/// Context partials must already carry the temperature; prefix and own
/// partials use temperature 1.
pub fn ape_merge(
    prefix: Option<&PartialAttention>,
    contexts: &[PartialAttention],
    own: &PartialAttention,
    cfg: &ApeConfig,
) -> Result<Mat> {
    cfg.validate()?;
    if contexts.is_empty() {
        return Err(ApeError::invalid("APE attention needs at least one context"));
    }
    let mut parts: Vec<(&PartialAttention, LseAdjust)> = Vec::with_capacity(contexts.len() + 2);
    if let Some(p) = prefix {
        parts.push((p, LseAdjust::None));
    }
    let aggregate;
    match cfg.scaling_mode {
        ScalingMode::Aggregate => {
            let ctx: Vec<_> = contexts.iter().map(|c| (c, LseAdjust::None)).collect();
            aggregate = merge_partials(&ctx)?;
            parts.push((&aggregate, LseAdjust::Scale(cfg.scale)));
        }
        ScalingMode::PerContext => {
            parts.extend(contexts.iter().map(|c| (c, LseAdjust::Scale(cfg.scale))));
        }
    }
    parts.push((own, LseAdjust::None));
    merge(&parts)
}

/// APE attention computed hierarchically: one partial per segment, then merged.
pub fn ape_attention(q: &Mat, inputs: &HeadInputs<'_>, cfg: &ApeConfig) -> Result<Mat> {
    cfg.validate()?;
    inputs.check_parallel()?;
    let prefix = inputs.prefix_partial(q)?;
    let contexts = inputs.context_partials(q, cfg.temperature)?;
    let own = inputs.own_partial(q)?;
    ape_merge(prefix.as_ref(), &contexts, &own, cfg)
}

/// Aggregate-mode APE in two attention passes: one over all context keys at
/// temperature `T`, one over prefix and own keys, then one scaled merge.
pub fn ape_attention_two_pass(q: &Mat, inputs: &HeadInputs<'_>, cfg: &ApeConfig) -> Result<Mat> {
    cfg.validate()?;
    if cfg.scaling_mode != ScalingMode::Aggregate {
        return Err(ApeError::invalid(
            "the two-pass path implements aggregate scaling only",
        ));
    }
    inputs.check_parallel()?;
    let live: Vec<&HeadKv<'_>> = inputs.contexts.iter().filter(|c| !c.is_empty()).collect();
    if live.is_empty() {
        return Err(ApeError::invalid("APE attention needs at least one context"));
    }
    let ctx_k = Mat::vstack(&live.iter().map(|c| c.keys).collect::<Vec<_>>())?;
    let ctx_v = Mat::vstack(&live.iter().map(|c| c.values).collect::<Vec<_>>())?;
    let context = partial_attention(q, &ctx_k, &ctx_v, &RowMask::Full, cfg.temperature)?;

    let (other_k, other_v, offset) = match inputs.prefix {
        Some(p) if !p.is_empty() => (
            Mat::vstack(&[p.keys, inputs.own.keys])?,
            Mat::vstack(&[p.values, inputs.own.values])?,
            p.len(),
        ),
        _ => (inputs.own.keys.clone(), inputs.own.values.clone(), 0),
    };
    if inputs.own.len() < q.rows() {
        return Err(ApeError::shape("fewer own keys than query rows"));
    }
    let mask = RowMask::Causal {
        offset: offset + inputs.own.len() - q.rows(),
    };
    let other = partial_attention(q, &other_k, &other_v, &mask, 1.0)?;
    merge(&[
        (&context, LseAdjust::Scale(cfg.scale)),
        (&other, LseAdjust::None),
    ])
}

/// Explicit per-key APE attention weights, in key order
/// `[prefix, context 1, …, context N, own]`. Masked own keys get weight 0.
pub fn ape_weights_flat(q: &Mat, inputs: &HeadInputs<'_>, cfg: &ApeConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    inputs.check_parallel()?;
    if inputs.contexts.iter().all(HeadKv::is_empty) {
        return Err(ApeError::invalid("APE attention needs at least one context"));
    }
    let d = q.cols();
    let plain = 1.0 / (d as f64).sqrt();
    let tempered = plain / cfg.temperature;
    let own_mask = inputs.own_mask(q.rows())?;
    let s = cfg.scale;

    let mut weights = Vec::with_capacity(q.rows());
    for r in 0..q.rows() {
        let qr = q.row(r);
        let logits = |m: &Mat, f: f64| -> Vec<f64> { (0..m.rows()).map(|c| dot(qr, m.row(c)) * f).collect() };
        let prefix: Vec<f64> = inputs.prefix.map_or_else(Vec::new, |p| logits(p.keys, plain));
        let ctx: Vec<Vec<f64>> = inputs.contexts.iter().map(|c| logits(c.keys, tempered)).collect();
        let own_all = logits(inputs.own.keys, plain);
        let own: Vec<f64> = own_all
            .iter()
            .enumerate()
            .filter(|(c, _)| own_mask.is_visible(r, *c))
            .map(|(_, z)| *z)
            .collect();

        // Log of each context's contribution to the denominator, and the
        // log-factor multiplying that context's exp(z/T) terms.
        let (ctx_terms, ctx_factor): (Vec<f64>, Vec<f64>) = match cfg.scaling_mode {
            ScalingMode::Aggregate => {
                let all: Vec<f64> = ctx.iter().flatten().copied().collect();
                let l = logsumexp_f64(&all)?;
                (vec![s * l], vec![(s - 1.0) * l; ctx.len()])
            }
            ScalingMode::PerContext => {
                let mut terms = Vec::new();
                let mut factors = Vec::new();
                for z in &ctx {
                    if z.is_empty() {
                        factors.push(0.0);
                        continue;
                    }
                    let l = logsumexp_f64(z)?;
                    terms.push(s * l);
                    factors.push((s - 1.0) * l);
                }
                (terms, factors)
            }
        };
        let mut denom_terms = prefix.clone();
        denom_terms.extend(&ctx_terms);
        denom_terms.extend(&own);
        let log_z = logsumexp_f64(&denom_terms)?;

        let mut row = Vec::new();
        row.extend(prefix.iter().map(|z| (z - log_z).exp()));
        for (z, f) in ctx.iter().zip(&ctx_factor) {
            row.extend(z.iter().map(|zj| (zj + f - log_z).exp()));
        }
        row.extend(own_all.iter().enumerate().map(|(c, z)| {
            if own_mask.is_visible(r, c) {
                (z - log_z).exp()
            } else {
                0.0
            }
        }));
        weights.push(row);
    }
    Ok(weights)
}

/// APE attention from explicit per-key weights (reference path).
pub fn ape_attention_flat(q: &Mat, inputs: &HeadInputs<'_>, cfg: &ApeConfig) -> Result<Mat> {
    let weights = ape_weights_flat(q, inputs, cfg)?;
    let mut values: Vec<&Mat> = Vec::new();
    if let Some(p) = inputs.prefix {
        values.push(p.values);
    }
    values.extend(inputs.contexts.iter().map(|c| c.values));
    values.push(inputs.own.values);
    let v = Mat::vstack(&values)?;
    let mut out = Vec::with_capacity(q.rows() * v.cols());
    for w in &weights {
        let mut acc = vec![0.0f64; v.cols()];
        for (c, wc) in w.iter().enumerate() {
            for (a, x) in acc.iter_mut().zip(v.row(c)) {
                *a += wc * f64::from(*x);
            }
        }
        out.extend(acc.iter().map(|a| *a as f32));
    }
    Mat::new(q.rows(), v.cols(), out)
}

/// Dispatches on the mode: sequential, uncorrected parallel, or hierarchical APE.
pub fn attend_mode(
    q: &Mat,
    inputs: &HeadInputs<'_>,
    mode: AttentionMode,
    cfg: &ApeConfig,
) -> Result<Mat> {
    match mode {
        AttentionMode::Sequential => sequential_attention(q, inputs),
        AttentionMode::Parallel => parallel_attention(q, inputs),
        AttentionMode::Ape => ape_attention(q, inputs, cfg),
    }
}

/// Model dimensions that enter the attention cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopDims {
    pub n_layers: u64,
    pub n_heads: u64,
    pub head_dim: u64,
}

impl FlopDims {
    /// MACs per (query, key) pair: `QKᵀ` and `A·V` over every head and layer.
    pub fn macs_per_pair(&self) -> u128 {
        2 * u128::from(self.n_layers) * u128::from(self.n_heads) * u128::from(self.head_dim)
    }
}

/// Attention multiply-accumulate count of a prefill, split by who attends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    /// Prefix and context tokens attending during encoding (zero when precached).
    pub context_encode: u128,
    /// Query tokens attending to prefix and contexts.
    pub query_to_context: u128,
    /// Query tokens attending to each other.
    pub query_to_query: u128,
}

impl FlopCount {
    pub fn total(&self) -> u128 {
        self.context_encode + self.query_to_context + self.query_to_query
    }
}

/// Analytic attention MACs of a prefill, counting dense (unmasked) pairs.
///
/// Sequential encoding attends over the whole concatenation, so its cost is
/// `(p + Σl + q)²` pairs; its KV states depend on which contexts were
/// retrieved and in what order, so `precached` does not apply to it. Parallel
/// and APE cost `q·(p + Σl + q)` pairs when contexts are precached, plus
/// `p² + Σ l_i·(p + l_i)` pairs when they must be encoded first.
pub fn flop_count(
    mode: AttentionMode,
    precached: bool,
    prefix_len: u64,
    context_lens: &[u64],
    query_len: u64,
    dims: FlopDims,
) -> FlopCount {
    let p = u128::from(prefix_len);
    let l: u128 = context_lens.iter().map(|x| u128::from(*x)).sum();
    let q = u128::from(query_len);
    let c = dims.macs_per_pair();
    match mode {
        AttentionMode::Sequential => FlopCount {
            context_encode: (p + l) * (p + l + q) * c,
            query_to_context: q * (p + l) * c,
            query_to_query: q * q * c,
        },
        AttentionMode::Parallel | AttentionMode::Ape => {
            let encode = if precached {
                0
            } else {
                p * p
                    + context_lens
                        .iter()
                        .map(|li| u128::from(*li) * (p + u128::from(*li)))
                        .sum::<u128>()
            };
            FlopCount {
                context_encode: encode * c,
                query_to_context: q * (p + l) * c,
                query_to_query: q * q * c,
            }
        }
    }
}
