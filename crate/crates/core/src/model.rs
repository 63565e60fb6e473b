//! Deterministic seeded decoder-only transformer used both to encode contexts
//! into KV caches and to decode queries against them.
//!
//! Pre-norm blocks (RMS norm), multi-head attention with interleaved RoPE,
//! SiLU-gated MLP, untied embedding and output matrices, no biases, byte
//! vocabulary. Weights are drawn from a ChaCha8 stream seeded by
//! [`ToyModelSpec::seed`], in the order listed in [`Model::checksum`].

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{attend_mode, AttentionMode, ApeConfig, HeadInputs, HeadKv};
use crate::error::{ApeError, Result};
use crate::kv_store::{KvSegment, Role};
use crate::rope::{plan_positions, rotate_in_place, RopeParams, DEFAULT_ROPE_BASE};
use crate::tensor::{dot, matmul_t, Mat};

const RMS_EPS: f64 = 1e-6;

/// Per-layer, per-head key and value matrices of one segment.
type HeadMats = Vec<Vec<(Mat, Mat)>>;
/// Per-head attention callback: layer, head, q, k, v.
type AttendFn<'a> = dyn FnMut(usize, usize, &Mat, &Mat, &Mat) -> Result<Mat> + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    pub seed: u64,
    pub init_std: f32,
    pub rope_base: f64,
    /// Highest position (exclusive) any token may occupy.
    pub max_positions: usize,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        ToyModelSpec {
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            ffn_mult: 4,
            vocab: 256,
            seed: 42,
            init_std: 0.02,
            rope_base: DEFAULT_ROPE_BASE,
            max_positions: 4096,
        }
    }
}

impl ToyModelSpec {
    pub fn hidden(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 || self.ffn_mult == 0 {
            return Err(ApeError::invalid("layer, head, head_dim and ffn_mult counts must be ≥ 1"));
        }
        if self.vocab != 256 {
            return Err(ApeError::invalid(format!(
                "vocabulary is byte-level (256), got {}",
                self.vocab
            )));
        }
        if self.init_std <= 0.0 || !self.init_std.is_finite() {
            return Err(ApeError::invalid("init_std must be positive"));
        }
        if self.max_positions == 0 {
            return Err(ApeError::invalid("max_positions must be ≥ 1"));
        }
        RopeParams::new(self.head_dim, self.rope_base)?;
        Ok(())
    }

    /// `2·V·h + L·(4h² + 3·h·f + 2h) + h` with `f = ffn_mult·h`.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden();
        let f = self.ffn_mult * h;
        2 * self.vocab * h + self.n_layers * (4 * h * h + 3 * h * f + 2 * h) + h
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    attn_norm: Vec<f32>,
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    mlp_norm: Vec<f32>,
    w_gate: Mat,
    w_up: Mat,
    w_down: Mat,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ToyModelSpec,
    rope: RopeParams,
    embed: Mat,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f32>,
    lm_head: Mat,
    checksum: u64,
}

/// Post-RoPE query/key and value states of one layer, full hidden width.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
}

struct BlockOutput {
    hidden: Mat,
    traces: Vec<LayerTrace>,
}

fn gaussian(rng: &mut ChaCha8Rng, dist: &Normal<f32>, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Mat::new(rows, cols, data).expect("gaussian samples are finite")
}

fn rms_norm(x: &Mat, gain: &[f32]) -> Mat {
    let mut data = Vec::with_capacity(x.rows() * x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let inv = 1.0 / (dot(row, row) / row.len() as f64 + RMS_EPS).sqrt();
        data.extend(row.iter().zip(gain).map(|(v, g)| (f64::from(*v) * inv) as f32 * g));
    }
    Mat::new(x.rows(), x.cols(), data).expect("normalised rows are finite")
}

fn add_in_place(x: &mut Mat, delta: &Mat) -> Result<()> {
    let data: Vec<f32> = x.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect();
    *x = Mat::new(x.rows(), x.cols(), data)?;
    Ok(())
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Token ids for greedy decoding: lowest id wins ties.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn new(spec: ToyModelSpec) -> Result<Self> {
        spec.validate()?;
        let h = spec.hidden();
        let f = spec.ffn_mult * h;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let dist = Normal::new(0.0f32, spec.init_std)
            .map_err(|e| ApeError::invalid(format!("init_std: {e}")))?;
        let embed = gaussian(&mut rng, &dist, spec.vocab, h);
        let layers = (0..spec.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; h],
                wq: gaussian(&mut rng, &dist, h, h),
                wk: gaussian(&mut rng, &dist, h, h),
                wv: gaussian(&mut rng, &dist, h, h),
                wo: gaussian(&mut rng, &dist, h, h),
                mlp_norm: vec![1.0; h],
                w_gate: gaussian(&mut rng, &dist, f, h),
                w_up: gaussian(&mut rng, &dist, f, h),
                w_down: gaussian(&mut rng, &dist, h, f),
            })
            .collect();
        let lm_head = gaussian(&mut rng, &dist, spec.vocab, h);
        let rope = RopeParams::new(spec.head_dim, spec.rope_base)?;
        let mut model = Model {
            spec,
            rope,
            embed,
            layers,
            final_norm: vec![1.0; h],
            lm_head,
            checksum: 0,
        };
        model.checksum = model.compute_checksum();
        Ok(model)
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    fn parameter_slices(&self) -> Vec<&[f32]> {
        let mut parts: Vec<&[f32]> = vec![self.embed.data()];
        for l in &self.layers {
            parts.extend([
                l.attn_norm.as_slice(),
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                l.mlp_norm.as_slice(),
                l.w_gate.data(),
                l.w_up.data(),
                l.w_down.data(),
            ]);
        }
        parts.push(&self.final_norm);
        parts.push(self.lm_head.data());
        parts
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_slices().iter().map(|s| s.len()).sum()
    }

    fn compute_checksum(&self) -> u64 {
        let mut h = FnvHasher::default();
        for part in self.parameter_slices() {
            for x in part {
                h.write(&x.to_le_bytes());
            }
        }
        h.finish()
    }

    /// FNV-1a-64 over all parameters as little-endian `f32`, in the order
    /// embedding; per layer attn_norm, wq, wk, wv, wo, mlp_norm, w_gate,
    /// w_up, w_down; final_norm; lm_head.
    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    fn check_positions(&self, start: usize, len: usize) -> Result<()> {
        if start + len > self.spec.max_positions {
            return Err(ApeError::invalid(format!(
                "positions {start}..{} exceed the configured maximum {}",
                start + len,
                self.spec.max_positions
            )));
        }
        Ok(())
    }

    fn embed_tokens(&self, tokens: &[u8]) -> Result<Mat> {
        let rows: Vec<Vec<f32>> = tokens
            .iter()
            .map(|t| self.embed.row(usize::from(*t)).to_vec())
            .collect();
        if rows.is_empty() {
            return Ok(Mat::zeros(0, self.spec.hidden()));
        }
        Mat::from_rows(&rows)
    }

    fn rope_heads(&self, x: &Mat, start: usize) -> Result<Mat> {
        let hd = self.spec.head_dim;
        let mut data = x.data().to_vec();
        for r in 0..x.rows() {
            let row = &mut data[r * x.cols()..(r + 1) * x.cols()];
            for head in row.chunks_mut(hd) {
                rotate_in_place(head, start + r, &self.rope);
            }
        }
        Mat::new(x.rows(), x.cols(), data)
    }

    /// Runs `tokens` at positions `start..` through every layer. `attend`
    /// receives `(layer, head, q, k_new, v_new)` and returns that head's
    /// attention output.
    fn forward_block(
        &self,
        tokens: &[u8],
        start: usize,
        attend: &mut AttendFn<'_>,
    ) -> Result<BlockOutput> {
        self.check_positions(start, tokens.len())?;
        let hd = self.spec.head_dim;
        let mut x = self.embed_tokens(tokens)?;
        let mut traces = Vec::with_capacity(self.layers.len());
        for (li, lw) in self.layers.iter().enumerate() {
            let normed = rms_norm(&x, &lw.attn_norm);
            let q = self.rope_heads(&matmul_t(&normed, &lw.wq)?, start)?;
            let k = self.rope_heads(&matmul_t(&normed, &lw.wk)?, start)?;
            let v = matmul_t(&normed, &lw.wv)?;
            let mut heads_out = Mat::zeros(x.rows(), x.cols());
            for h in 0..self.spec.n_heads {
                let qh = q.col_block(h * hd, hd)?;
                let kh = k.col_block(h * hd, hd)?;
                let vh = v.col_block(h * hd, hd)?;
                let oh = attend(li, h, &qh, &kh, &vh)?;
                heads_out.set_col_block(h * hd, &oh);
            }
            add_in_place(&mut x, &matmul_t(&heads_out, &lw.wo)?)?;

            let normed = rms_norm(&x, &lw.mlp_norm);
            let gate = matmul_t(&normed, &lw.w_gate)?;
            let up = matmul_t(&normed, &lw.w_up)?;
            let act: Vec<f32> = gate
                .data()
                .iter()
                .zip(up.data())
                .map(|(g, u)| silu(*g) * u)
                .collect();
            let act = Mat::new(gate.rows(), gate.cols(), act)?;
            add_in_place(&mut x, &matmul_t(&act, &lw.w_down)?)?;
            traces.push(LayerTrace { q, k, v });
        }
        Ok(BlockOutput { hidden: x, traces })
    }

    fn logits(&self, hidden: &Mat) -> Result<Vec<Vec<f32>>> {
        let normed = rms_norm(hidden, &self.final_norm);
        let logits = matmul_t(&normed, &self.lm_head)?;
        Ok((0..logits.rows()).map(|r| logits.row(r).to_vec()).collect())
    }

    fn segment_from_traces(&self, traces: &[LayerTrace], role: Role, offset: usize) -> Result<KvSegment> {
        let hd = self.spec.head_dim;
        let per_layer = traces
            .iter()
            .map(|t| -> Result<(Vec<Mat>, Vec<Mat>)> {
                let ks = (0..self.spec.n_heads)
                    .map(|h| t.k.col_block(h * hd, hd))
                    .collect::<Result<_>>()?;
                let vs = (0..self.spec.n_heads)
                    .map(|h| t.v.col_block(h * hd, hd))
                    .collect::<Result<_>>()?;
                Ok((ks, vs))
            })
            .collect::<Result<Vec<_>>>()?;
        KvSegment::from_layer_blocks(self.spec.n_heads, hd, role, offset, per_layer)
    }

    fn empty_segment(&self, role: Role, offset: usize) -> KvSegment {
        KvSegment::empty(self.spec.n_layers, self.spec.n_heads, self.spec.head_dim, role, offset)
    }

    fn check_geometry(&self, seg: &KvSegment) -> Result<()> {
        seg.validate()?;
        if seg.layers != self.spec.n_layers
            || seg.heads != self.spec.n_heads
            || seg.head_dim != self.spec.head_dim
        {
            return Err(ApeError::shape(format!(
                "segment geometry {}x{}x{} does not match model {}x{}x{}",
                seg.layers,
                seg.heads,
                seg.head_dim,
                self.spec.n_layers,
                self.spec.n_heads,
                self.spec.head_dim
            )));
        }
        Ok(())
    }

    /// Encodes a token block into KV states. Tokens attend to the whole of
    /// `prefix_kv` and causally to each other; `position_start` must equal the
    /// prefix length (0 without one).
    ///
    /// For sequential caches pass the prefix concatenated with all earlier
    /// contexts as `prefix_kv`.
    pub fn encode_segment(
        &self,
        tokens: &[u8],
        role: Role,
        prefix_kv: Option<&KvSegment>,
        position_start: usize,
    ) -> Result<KvSegment> {
        if tokens.is_empty() && role == Role::Context {
            return Err(ApeError::invalid("context token sequences must be nonempty"));
        }
        let prefix = match prefix_kv {
            Some(p) if p.seq_len > 0 => {
                self.check_geometry(p)?;
                if p.position_offset != 0 {
                    return Err(ApeError::invalid("prefix KV must start at position 0"));
                }
                Some(p)
            }
            _ => None,
        };
        let prefix_len = prefix.map_or(0, |p| p.seq_len);
        if position_start != prefix_len {
            return Err(ApeError::invalid(format!(
                "segment must start right after its {prefix_len}-token prefix, got position {position_start}"
            )));
        }
        if tokens.is_empty() {
            return Ok(self.empty_segment(role, position_start));
        }
        let prefix_heads = self.head_mats(prefix)?;
        let cfg = ApeConfig::default();
        let out = self.forward_block(tokens, position_start, &mut |l, h, q, k, v| {
            let inputs = HeadInputs {
                prefix: prefix_heads
                    .as_ref()
                    .map(|ph| head_kv(&ph[l][h], 0)),
                contexts: Vec::new(),
                own: HeadKv {
                    keys: k,
                    values: v,
                    position_offset: position_start,
                },
            };
            attend_mode(q, &inputs, AttentionMode::Sequential, &cfg)
        })?;
        self.segment_from_traces(&out.traces, role, position_start)
    }

    fn head_mats(&self, seg: Option<&KvSegment>) -> Result<Option<HeadMats>> {
        seg.map(|s| {
            (0..s.layers)
                .map(|l| {
                    (0..s.heads)
                        .map(|h| Ok((s.head_keys(l, h)?, s.head_values(l, h)?)))
                        .collect()
                })
                .collect()
        })
        .transpose()
    }

    /// Per-layer post-RoPE q/k/v of a standalone sequence starting at position 0.
    pub fn layer_states(&self, tokens: &[u8]) -> Result<Vec<LayerTrace>> {
        if tokens.is_empty() {
            return Err(ApeError::invalid("empty sample"));
        }
        let cfg = ApeConfig::default();
        let out = self.forward_block(tokens, 0, &mut |_, _, q, k, v| {
            let inputs = HeadInputs {
                prefix: None,
                contexts: Vec::new(),
                own: HeadKv {
                    keys: k,
                    values: v,
                    position_offset: 0,
                },
            };
            attend_mode(q, &inputs, AttentionMode::Sequential, &cfg)
        })?;
        Ok(out.traces)
    }

    /// Opens a decoding session over cached prefix and context segments.
    pub fn session<'a>(
        &'a self,
        prefix: Option<&'a KvSegment>,
        contexts: &'a [KvSegment],
        mode: AttentionMode,
        cfg: &'a ApeConfig,
    ) -> Result<DecodeSession<'a>> {
        DecodeSession::new(self, prefix, contexts, mode, cfg)
    }

    /// Greedy decoding of `query` against the cached segments.
    pub fn decode_with_cache(
        &self,
        query: &[u8],
        prefix: Option<&KvSegment>,
        contexts: &[KvSegment],
        mode: AttentionMode,
        cfg: &ApeConfig,
        max_new: usize,
    ) -> Result<DecodeOutput> {
        if query.is_empty() {
            return Err(ApeError::invalid("query must be nonempty"));
        }
        let mut session = self.session(prefix, contexts, mode, cfg)?;
        let prefill_logits = session.feed(query)?;
        let mut generated = Vec::with_capacity(max_new);
        let mut step_logits = Vec::new();
        let mut last = prefill_logits.last().cloned().unwrap_or_default();
        for i in 0..max_new {
            let token = argmax(&last) as u8;
            generated.push(token);
            if i + 1 < max_new {
                last = session.feed(&[token])?.pop().unwrap_or_default();
                step_logits.push(last.clone());
            }
        }
        Ok(DecodeOutput {
            generated,
            prefill_logits,
            step_logits,
        })
    }
}

fn head_kv(pair: &(Mat, Mat), offset: usize) -> HeadKv<'_> {
    HeadKv {
        keys: &pair.0,
        values: &pair.1,
        position_offset: offset,
    }
}

/// Result of [`Model::decode_with_cache`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeOutput {
    pub generated: Vec<u8>,
    /// One logit row per query token.
    pub prefill_logits: Vec<Vec<f32>>,
    /// Logits after feeding each generated token except the last.
    pub step_logits: Vec<Vec<f32>>,
}

impl DecodeOutput {
    /// Logit rows that produced each generated token.
    pub fn decision_logits(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.prefill_logits.last().into_iter().chain(&self.step_logits)
    }
}

/// Incremental decoder state: cached segments plus the growing own-token KV.
pub struct DecodeSession<'a> {
    model: &'a Model,
    mode: AttentionMode,
    cfg: &'a ApeConfig,
    prefix_heads: Option<HeadMats>,
    context_heads: Vec<(usize, HeadMats)>,
    own: KvSegment,
}

impl<'a> DecodeSession<'a> {
    fn new(
        model: &'a Model,
        prefix: Option<&'a KvSegment>,
        contexts: &'a [KvSegment],
        mode: AttentionMode,
        cfg: &'a ApeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let prefix = prefix.filter(|p| p.seq_len > 0);
        if let Some(p) = prefix {
            model.check_geometry(p)?;
            if p.role != Role::Prefix || p.position_offset != 0 {
                return Err(ApeError::invalid("prefix cache must have role prefix at position 0"));
            }
        }
        for c in contexts {
            model.check_geometry(c)?;
            if c.role != Role::Context {
                return Err(ApeError::invalid("context caches must have role context"));
            }
        }
        if contexts.is_empty() && mode != AttentionMode::Sequential {
            return Err(ApeError::invalid(format!(
                "{mode:?} mode needs at least one context cache"
            )));
        }
        let prefix_len = prefix.map_or(0, |p| p.seq_len);
        let lens: Vec<usize> = contexts.iter().map(|c| c.seq_len).collect();
        let plan = plan_positions(mode.layout(), prefix_len, &lens, 0);
        for (i, (c, start)) in contexts.iter().zip(&plan.context_starts).enumerate() {
            if c.position_offset != *start {
                return Err(ApeError::invalid(format!(
                    "{mode:?} mode expects context {i} at position {start}, cache was encoded at {}",
                    c.position_offset
                )));
            }
        }
        let prefix_heads = model.head_mats(prefix)?;
        let context_heads = contexts
            .iter()
            .map(|c| Ok((c.position_offset, model.head_mats(Some(c))?.unwrap_or_default())))
            .collect::<Result<_>>()?;
        Ok(DecodeSession {
            model,
            mode,
            cfg,
            prefix_heads,
            context_heads,
            own: model.empty_segment(Role::Query, plan.query_start),
        })
    }

    /// Position the next fed token will occupy.
    pub fn next_position(&self) -> usize {
        self.own.position_offset + self.own.seq_len
    }

    /// Feeds tokens and returns one logit row per token.
    pub fn feed(&mut self, tokens: &[u8]) -> Result<Vec<Vec<f32>>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let own_prev = self.model.head_mats(Some(&self.own))?.unwrap_or_default();
        let own_offset = self.own.position_offset;
        let (mode, cfg) = (self.mode, self.cfg);
        let prefix_heads = &self.prefix_heads;
        let context_heads = &self.context_heads;
        let out = self
            .model
            .forward_block(tokens, self.next_position(), &mut |l, h, q, k, v| {
                let (own_k, own_v) = match own_prev.get(l) {
                    Some(layer) if layer[h].0.rows() > 0 => (
                        Mat::vstack(&[&layer[h].0, k])?,
                        Mat::vstack(&[&layer[h].1, v])?,
                    ),
                    _ => (k.clone(), v.clone()),
                };
                let inputs = HeadInputs {
                    prefix: prefix_heads.as_ref().map(|ph| head_kv(&ph[l][h], 0)),
                    contexts: context_heads
                        .iter()
                        .map(|(offset, heads)| head_kv(&heads[l][h], *offset))
                        .collect(),
                    own: HeadKv {
                        keys: &own_k,
                        values: &own_v,
                        position_offset: own_offset,
                    },
                };
                attend_mode(q, &inputs, mode, cfg)
            })?;
        let new_kv = self
            .model
            .segment_from_traces(&out.traces, Role::Query, self.next_position())?;
        self.own.append(&new_kv)?;
        self.model.logits(&out.hidden)
    }
}
