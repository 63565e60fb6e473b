//! Pre-cached KV segments: content addressing, an ordered in-memory store,
//! and the `APEKV1` on-disk format.
//!
//! File layout (little-endian):
//!
//! | bytes            | content                                                  |
//! |------------------|----------------------------------------------------------|
//! | 6                | magic `APEKV1`                                           |
//! | 4                | `u32` version (1)                                        |
//! | 4                | `u32` byte length of the JSON metadata                   |
//! | n                | UTF-8 JSON metadata                                      |
//! | 4·L·H·S·D        | keys, `f32`, `[layer][head][pos][dim]`                   |
//! | 4·L·H·S·D        | values, same order                                       |
//! | 8                | `u64` FNV-1a-64 of every preceding byte                  |
//!
//! Metadata keys, in order: `layers`, `heads`, `head_dim`, `seq_len`, `role`,
//! `position_offset`, `model_checksum`, `token_len`, `id`. The two 64-bit
//! hashes are 16-digit lowercase hex strings.

use std::collections::HashMap;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{ApeError, Result};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 6] = b"APEKV1";
pub const FORMAT_VERSION: u32 = 1;
pub const FILE_EXTENSION: &str = "apekv";

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Content id of a cached context: FNV-1a-64 over
/// `tokens ‖ model_checksum (8 LE bytes) ‖ position_offset (8 LE bytes)`.
pub fn content_id(tokens: &[u8], model_checksum: u64, position_offset: u64) -> u64 {
    let mut h = FnvHasher::default();
    h.write(tokens);
    h.write(&model_checksum.to_le_bytes());
    h.write(&position_offset.to_le_bytes());
    h.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prefix,
    Context,
    Query,
}

/// Per-layer, per-head key and value states of a contiguous token block.
#[derive(Debug, Clone, PartialEq)]
pub struct KvSegment {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    pub role: Role,
    pub position_offset: usize,
    /// `[layer][head][pos][dim]`
    pub keys: Vec<f32>,
    /// `[layer][head][pos][dim]`
    pub values: Vec<f32>,
}

impl KvSegment {
    pub fn empty(layers: usize, heads: usize, head_dim: usize, role: Role, position_offset: usize) -> Self {
        KvSegment {
            layers,
            heads,
            head_dim,
            seq_len: 0,
            role,
            position_offset,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn expected_len(&self) -> usize {
        self.layers * self.heads * self.seq_len * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.expected_len();
        if self.keys.len() != n || self.values.len() != n {
            return Err(ApeError::shape(format!(
                "segment {}x{}x{}x{} needs {n} keys and values, has {} and {}",
                self.layers,
                self.heads,
                self.seq_len,
                self.head_dim,
                self.keys.len(),
                self.values.len()
            )));
        }
        Ok(())
    }

    pub fn same_geometry(&self, other: &KvSegment) -> bool {
        self.layers == other.layers && self.heads == other.heads && self.head_dim == other.head_dim
    }

    fn block(&self, layer: usize, head: usize) -> std::ops::Range<usize> {
        let len = self.seq_len * self.head_dim;
        let start = (layer * self.heads + head) * len;
        start..start + len
    }

    pub fn head_keys(&self, layer: usize, head: usize) -> Result<Mat> {
        Mat::new(self.seq_len, self.head_dim, self.keys[self.block(layer, head)].to_vec())
    }

    pub fn head_values(&self, layer: usize, head: usize) -> Result<Mat> {
        Mat::new(self.seq_len, self.head_dim, self.values[self.block(layer, head)].to_vec())
    }

    pub fn key_mut(&mut self, layer: usize, head: usize, pos: usize) -> &mut [f32] {
        let start = self.block(layer, head).start + pos * self.head_dim;
        &mut self.keys[start..start + self.head_dim]
    }

    pub fn key(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        let start = self.block(layer, head).start + pos * self.head_dim;
        &self.keys[start..start + self.head_dim]
    }

    pub fn value(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        let start = self.block(layer, head).start + pos * self.head_dim;
        &self.values[start..start + self.head_dim]
    }

    /// Builds a segment from per-layer lists of per-head `(seq_len x head_dim)` blocks.
    pub(crate) fn from_layer_blocks(
        heads: usize,
        head_dim: usize,
        role: Role,
        position_offset: usize,
        per_layer: Vec<(Vec<Mat>, Vec<Mat>)>,
    ) -> Result<Self> {
        let layers = per_layer.len();
        let seq_len = per_layer
            .first()
            .and_then(|(k, _)| k.first())
            .map_or(0, Mat::rows);
        let mut keys = Vec::with_capacity(layers * heads * seq_len * head_dim);
        let mut values = Vec::with_capacity(keys.capacity());
        for (ks, vs) in &per_layer {
            for (k, v) in ks.iter().zip(vs) {
                keys.extend_from_slice(k.data());
                values.extend_from_slice(v.data());
            }
        }
        let seg = KvSegment {
            layers,
            heads,
            head_dim,
            seq_len,
            role,
            position_offset,
            keys,
            values,
        };
        seg.validate()?;
        Ok(seg)
    }

    /// Concatenates segments along the position axis. The result starts at the
    /// first part's offset and takes its role.
    pub fn concat(parts: &[&KvSegment], role: Role) -> Result<KvSegment> {
        let Some(first) = parts.first() else {
            return Err(ApeError::invalid("concat of zero segments"));
        };
        if parts.iter().any(|p| !p.same_geometry(first)) {
            return Err(ApeError::shape("concat of segments with different geometry"));
        }
        let seq_len: usize = parts.iter().map(|p| p.seq_len).sum();
        let mut keys = Vec::with_capacity(first.layers * first.heads * seq_len * first.head_dim);
        let mut values = Vec::with_capacity(keys.capacity());
        for l in 0..first.layers {
            for h in 0..first.heads {
                for p in parts {
                    keys.extend_from_slice(&p.keys[p.block(l, h)]);
                    values.extend_from_slice(&p.values[p.block(l, h)]);
                }
            }
        }
        Ok(KvSegment {
            layers: first.layers,
            heads: first.heads,
            head_dim: first.head_dim,
            seq_len,
            role,
            position_offset: first.position_offset,
            keys,
            values,
        })
    }

    /// Appends another segment's tokens (same geometry) after this one's.
    pub fn append(&mut self, other: &KvSegment) -> Result<()> {
        let role = self.role;
        let offset = self.position_offset;
        let mut joined = KvSegment::concat(&[self, other], role)?;
        joined.position_offset = offset;
        *self = joined;
        Ok(())
    }
}

/// A persisted, content-addressed context cache.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextCacheEntry {
    pub id: u64,
    pub model_checksum: u64,
    pub token_len: usize,
    pub segment: KvSegment,
}

impl ContextCacheEntry {
    pub fn new(tokens: &[u8], model_checksum: u64, segment: KvSegment) -> Result<Self> {
        segment.validate()?;
        if segment.seq_len != tokens.len() {
            return Err(ApeError::shape(format!(
                "{} tokens for a {}-position segment",
                tokens.len(),
                segment.seq_len
            )));
        }
        Ok(ContextCacheEntry {
            id: content_id(tokens, model_checksum, segment.position_offset as u64),
            model_checksum,
            token_len: tokens.len(),
            segment,
        })
    }

    pub fn file_name(&self) -> String {
        format!("{:016x}.{FILE_EXTENSION}", self.id)
    }
}

/// Ordered map of cache entries. Entries are immutable once stored; `swap`
/// reorders ids without touching KV data.
#[derive(Debug, Default, Clone)]
pub struct KvStore {
    entries: HashMap<u64, Arc<ContextCacheEntry>>,
    order: Vec<u64>,
}

impl KvStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Ids in logical order.
    pub fn ids(&self) -> &[u64] {
        &self.order
    }

    /// Inserts or overwrites an entry; new ids go to the end of the order.
    pub fn put(&mut self, entry: ContextCacheEntry) -> u64 {
        let id = entry.id;
        if self.entries.insert(id, Arc::new(entry)).is_none() {
            self.order.push(id);
        }
        id
    }

    pub fn get(&self, id: u64) -> Result<Arc<ContextCacheEntry>> {
        self.entries
            .get(&id)
            .cloned()
            .ok_or_else(|| ApeError::NotFound(format!("cache entry {id:016x}")))
    }

    pub fn delete(&mut self, id: u64) -> Result<Arc<ContextCacheEntry>> {
        let entry = self
            .entries
            .remove(&id)
            .ok_or_else(|| ApeError::NotFound(format!("cache entry {id:016x}")))?;
        self.order.retain(|x| *x != id);
        Ok(entry)
    }

    fn position(&self, id: u64) -> Result<usize> {
        self.order
            .iter()
            .position(|x| *x == id)
            .ok_or_else(|| ApeError::NotFound(format!("cache entry {id:016x}")))
    }

    pub fn swap(&mut self, a: u64, b: u64) -> Result<()> {
        let (i, j) = (self.position(a)?, self.position(b)?);
        self.order.swap(i, j);
        Ok(())
    }

    /// Replaces the entry under `id` in place; the new entry must have the
    /// same geometry. The slot keeps its position under the new entry's id.
    pub fn replace(&mut self, id: u64, new_entry: ContextCacheEntry) -> Result<()> {
        let i = self.position(id)?;
        let old = &self.entries[&id];
        if !old.segment.same_geometry(&new_entry.segment) {
            return Err(ApeError::shape(format!(
                "replacement geometry {}x{}x{} differs from {}x{}x{}",
                new_entry.segment.layers,
                new_entry.segment.heads,
                new_entry.segment.head_dim,
                old.segment.layers,
                old.segment.heads,
                old.segment.head_dim
            )));
        }
        let new_id = new_entry.id;
        if new_id != id && self.entries.contains_key(&new_id) {
            return Err(ApeError::invalid(format!(
                "replacement id {new_id:016x} is already stored"
            )));
        }
        self.entries.remove(&id);
        self.entries.insert(new_id, Arc::new(new_entry));
        self.order[i] = new_id;
        Ok(())
    }

    /// Entries in logical order.
    pub fn ordered(&self) -> Vec<Arc<ContextCacheEntry>> {
        self.order.iter().map(|id| self.entries[id].clone()).collect()
    }

    /// Writes every entry to `<dir>/<id-hex>.apekv`.
    pub fn save_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        self.ordered()
            .iter()
            .map(|e| {
                let path = dir.join(e.file_name());
                persist(e, &path)?;
                Ok(path)
            })
            .collect()
    }

    /// Loads every `*.apekv` file in `dir`, ordered by file name.
    pub fn load_dir(dir: &Path) -> Result<KvStore> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == FILE_EXTENSION))
            .collect();
        paths.sort();
        let mut store = KvStore::new();
        for p in paths {
            store.put(load(&p)?);
        }
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileMeta {
    layers: usize,
    heads: usize,
    head_dim: usize,
    seq_len: usize,
    role: Role,
    position_offset: usize,
    model_checksum: String,
    token_len: usize,
    id: String,
}

fn parse_hex(s: &str, what: &str) -> Result<u64> {
    u64::from_str_radix(s, 16).map_err(|_| ApeError::Format(format!("bad {what} hex {s:?}")))
}

/// Serialises an entry to the `APEKV1` byte layout.
pub fn encode_entry(entry: &ContextCacheEntry) -> Result<Vec<u8>> {
    let seg = &entry.segment;
    seg.validate()?;
    let meta = FileMeta {
        layers: seg.layers,
        heads: seg.heads,
        head_dim: seg.head_dim,
        seq_len: seg.seq_len,
        role: seg.role,
        position_offset: seg.position_offset,
        model_checksum: format!("{:016x}", entry.model_checksum),
        token_len: entry.token_len,
        id: format!("{:016x}", entry.id),
    };
    let json = serde_json::to_vec(&meta)?;
    let meta_len = u32::try_from(json.len())
        .map_err(|_| ApeError::Overflow("metadata longer than u32::MAX".into()))?;
    let mut buf = Vec::with_capacity(6 + 8 + json.len() + 8 * seg.keys.len() + 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&meta_len.to_le_bytes());
    buf.extend_from_slice(&json);
    for x in seg.keys.iter().chain(&seg.values) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    Ok(buf)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(ApeError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses the `APEKV1` byte layout.
pub fn decode_entry(bytes: &[u8]) -> Result<ContextCacheEntry> {
    if bytes.len() < MAGIC.len() {
        return Err(ApeError::Truncated {
            expected: MAGIC.len(),
            found: bytes.len(),
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(ApeError::BadMagic);
    }
    let version = read_u32(bytes, 6)?;
    if version != FORMAT_VERSION {
        return Err(ApeError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = read_u32(bytes, 10)? as usize;
    let meta_end = 14 + meta_len;
    let meta_bytes = bytes.get(14..meta_end).ok_or(ApeError::Truncated {
        expected: meta_end,
        found: bytes.len(),
    })?;
    let meta: FileMeta = serde_json::from_slice(meta_bytes)?;
    let n = meta
        .layers
        .checked_mul(meta.heads)
        .and_then(|x| x.checked_mul(meta.seq_len))
        .and_then(|x| x.checked_mul(meta.head_dim))
        .ok_or_else(|| ApeError::Format("segment shape overflows".into()))?;
    let payload_end = n
        .checked_mul(8)
        .and_then(|x| x.checked_add(meta_end))
        .ok_or_else(|| ApeError::Format("segment shape overflows".into()))?;
    let expected = payload_end + 8;
    if bytes.len() < expected {
        return Err(ApeError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(ApeError::Format(format!(
            "{} trailing bytes after checksum",
            bytes.len() - expected
        )));
    }
    let stored = u64::from_le_bytes(bytes[payload_end..].try_into().expect("8 bytes"));
    let computed = fnv1a64(&bytes[..payload_end]);
    if stored != computed {
        return Err(ApeError::ChecksumMismatch { stored, computed });
    }
    let floats: Vec<f32> = bytes[meta_end..payload_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (keys, values) = floats.split_at(n);
    Ok(ContextCacheEntry {
        id: parse_hex(&meta.id, "id")?,
        model_checksum: parse_hex(&meta.model_checksum, "model_checksum")?,
        token_len: meta.token_len,
        segment: KvSegment {
            layers: meta.layers,
            heads: meta.heads,
            head_dim: meta.head_dim,
            seq_len: meta.seq_len,
            role: meta.role,
            position_offset: meta.position_offset,
            keys: keys.to_vec(),
            values: values.to_vec(),
        },
    })
}

pub fn persist(entry: &ContextCacheEntry, path: &Path) -> Result<()> {
    fs::write(path, encode_entry(entry)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ContextCacheEntry> {
    decode_entry(&fs::read(path)?)
}

/// How the permutation-cache estimate counts cached chunk states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PermutationCounting {
    /// Each chunk cached once per ordered set of distinct predecessors:
    /// `Σ_{k=1..n} P(n, k)` chunk states.
    OrderedPredecessors,
    /// Every full ordering of all chunks stored separately: `n!·n` chunk states.
    FullSequences,
}

/// KV bytes of one token: keys and values for every layer and KV head.
pub fn kv_bytes_per_token(layers: u64, kv_heads: u64, head_dim: u64, bytes_per_elem: u64) -> u128 {
    2 * u128::from(layers) * u128::from(kv_heads) * u128::from(head_dim) * u128::from(bytes_per_elem)
}

/// Memory needed to cache every order-dependent KV state of `chunks` chunks.
pub fn estimate_permutation_cache(
    chunks: u64,
    tokens_per_chunk: u64,
    layers: u64,
    kv_heads: u64,
    head_dim: u64,
    bytes_per_elem: u64,
    counting: PermutationCounting,
) -> Result<u128> {
    if [chunks, tokens_per_chunk, layers, kv_heads, head_dim, bytes_per_elem].contains(&0) {
        return Err(ApeError::invalid("all counts must be at least 1"));
    }
    let overflow = || ApeError::Overflow("permutation cache size exceeds 128 bits".into());
    let n = u128::from(chunks);
    let states = match counting {
        PermutationCounting::OrderedPredecessors => {
            let mut total = 0u128;
            let mut perm = 1u128;
            for k in 0..n {
                perm = perm.checked_mul(n - k).ok_or_else(overflow)?;
                total = total.checked_add(perm).ok_or_else(overflow)?;
            }
            total
        }
        PermutationCounting::FullSequences => {
            let mut fact = 1u128;
            for k in 2..=n {
                fact = fact.checked_mul(k).ok_or_else(overflow)?;
            }
            fact.checked_mul(n).ok_or_else(overflow)?
        }
    };
    states
        .checked_mul(u128::from(tokens_per_chunk))
        .and_then(|x| x.checked_mul(kv_bytes_per_token(layers, kv_heads, head_dim, bytes_per_elem)))
        .ok_or_else(overflow)
}
