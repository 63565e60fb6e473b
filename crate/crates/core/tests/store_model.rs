mod common;

use std::collections::HashSet;

use ape_core::kv_store::{self, content_id, fnv1a64, ContextCacheEntry};
use ape_core::model::argmax;
use ape_core::{ApeConfig, ApeError, AttentionMode, KvSegment, KvStore, Model, Role, ScalingMode, ToyModelSpec};
use common::random_text;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> Model {
    Model::new(ToyModelSpec {
        n_layers: 2,
        n_heads: 2,
        head_dim: 8,
        ..ToyModelSpec::default()
    })
    .unwrap()
}

fn segment_strategy() -> impl Strategy<Value = (KvSegment, Vec<u8>)> {
    (1usize..4, 1usize..4, 1usize..10, 0usize..8, 0usize..3, 0usize..100_000).prop_flat_map(
        |(layers, heads, head_dim, seq_len, role, offset)| {
            let n = layers * heads * head_dim * seq_len;
            (
                prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), n),
                prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), n),
                prop::collection::vec(any::<u8>(), seq_len),
            )
                .prop_map(move |(keys, values, tokens)| {
                    (
                        KvSegment {
                            layers,
                            heads,
                            head_dim,
                            seq_len,
                            role: [Role::Prefix, Role::Context, Role::Query][role],
                            position_offset: offset,
                            keys,
                            values,
                        },
                        tokens,
                    )
                })
        },
    )
}

fn bits(x: &[f32]) -> Vec<u32> {
    x.iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn persist_roundtrip_is_bit_exact((seg, tokens) in segment_strategy(), checksum in any::<u64>()) {
        let entry = ContextCacheEntry::new(&tokens, checksum, seg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(entry.file_name());
        kv_store::persist(&entry, &path).unwrap();
        let back = kv_store::load(&path).unwrap();
        prop_assert_eq!(back.id, entry.id);
        prop_assert_eq!(back.model_checksum, checksum);
        prop_assert_eq!(back.segment.role, entry.segment.role);
        prop_assert_eq!(back.segment.position_offset, entry.segment.position_offset);
        prop_assert_eq!(bits(&back.segment.keys), bits(&entry.segment.keys));
        prop_assert_eq!(bits(&back.segment.values), bits(&entry.segment.values));
    }

    #[test]
    fn any_single_byte_flip_is_rejected((seg, tokens) in segment_strategy(), pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let entry = ContextCacheEntry::new(&tokens, 7, seg).unwrap();
        let mut bytes = kv_store::encode_entry(&entry).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(kv_store::decode_entry(&bytes).is_err());
    }
}

#[test]
fn content_ids_distinct_on_corpus() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut texts = HashSet::new();
    while texts.len() < 2000 {
        texts.insert(random_text(&mut rng, 1, 24));
    }
    let mut ids = HashSet::new();
    for t in &texts {
        for offset in [0u64, 2, 12] {
            assert!(ids.insert(content_id(t, 0xABCD, offset)), "collision");
        }
    }
}

#[test]
fn content_id_follows_recipe() {
    let model = Model::new(ToyModelSpec::default()).unwrap();
    let tokens = b"\n\nabc";
    let seg = model.encode_segment(tokens, Role::Context, None, 0).unwrap();
    let entry = ContextCacheEntry::new(tokens, model.checksum(), seg).unwrap();
    let mut recipe = tokens.to_vec();
    recipe.extend_from_slice(&model.checksum().to_le_bytes());
    recipe.extend_from_slice(&0u64.to_le_bytes());

    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in &recipe {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    assert_eq!(entry.id, h);
    assert_eq!(fnv1a64(&recipe), h);
    let again = ContextCacheEntry::new(
        tokens,
        model.checksum(),
        Model::new(ToyModelSpec::default())
            .unwrap()
            .encode_segment(tokens, Role::Context, None, 0)
            .unwrap(),
    )
    .unwrap();
    assert_eq!(again.id, entry.id);
    assert_eq!(again.segment, entry.segment);
}

#[test]
fn store_mutations_and_decode_after_swap() {
    let model = small();
    let prefix = model.encode_segment(b"\n\n", Role::Prefix, None, 0).unwrap();
    let texts: [&[u8]; 3] = [b"first doc", b"second", b"the third one"];
    let mut store = KvStore::new();
    let ids: Vec<u64> = texts
        .iter()
        .map(|t| {
            let seg = model.encode_segment(t, Role::Context, Some(&prefix), 2).unwrap();
            store.put(ContextCacheEntry::new(t, model.checksum(), seg).unwrap())
        })
        .collect();
    let snapshot: Vec<Vec<f32>> = store.ordered().iter().map(|e| e.segment.keys.clone()).collect();

    let cfg = ApeConfig::new(0.7, 0.8, ScalingMode::Aggregate).unwrap();
    let decode = |store: &KvStore| {
        let segs: Vec<KvSegment> = store.ordered().iter().map(|e| e.segment.clone()).collect();
        model
            .decode_with_cache(b"Q:", Some(&prefix), &segs, AttentionMode::Ape, &cfg, 5)
            .unwrap()
    };
    let before = decode(&store);
    store.swap(ids[0], ids[2]).unwrap();
    assert_eq!(store.ids(), &[ids[2], ids[1], ids[0]]);
    let after = decode(&store);
    assert_eq!(before.generated, after.generated);

    for (id, keys) in ids.iter().zip(&snapshot) {
        assert_eq!(&store.get(*id).unwrap().segment.keys, keys);
    }

    // One prefix cache serves every context.
    let shared = ContextCacheEntry::new(b"\n\n", model.checksum(), prefix.clone()).unwrap();
    store.put(shared.clone());
    store.put(shared.clone());
    assert_eq!(store.len(), 4);

    store.delete(ids[1]).unwrap();
    assert!(matches!(store.get(ids[1]), Err(ApeError::NotFound(_))));

    let dir = tempfile::tempdir().unwrap();
    store.save_dir(dir.path()).unwrap();
    let loaded = KvStore::load_dir(dir.path()).unwrap();
    assert_eq!(loaded.len(), store.len());
    for id in store.ids() {
        assert_eq!(*loaded.get(*id).unwrap(), *store.get(*id).unwrap());
    }
}

#[test]
fn replace_rejects_other_geometry() {
    let a = small();
    let b = Model::new(ToyModelSpec {
        n_layers: 1,
        n_heads: 2,
        head_dim: 8,
        ..ToyModelSpec::default()
    })
    .unwrap();
    let mut store = KvStore::new();
    let sa = a.encode_segment(b"abc", Role::Context, None, 0).unwrap();
    let id = store.put(ContextCacheEntry::new(b"abc", a.checksum(), sa).unwrap());
    let sb = b.encode_segment(b"abd", Role::Context, None, 0).unwrap();
    assert!(store.replace(id, ContextCacheEntry::new(b"abd", b.checksum(), sb).unwrap()).is_err());
    let sa2 = a.encode_segment(b"abd", Role::Context, None, 0).unwrap();
    let new = ContextCacheEntry::new(b"abd", a.checksum(), sa2).unwrap();
    let new_id = new.id;
    store.replace(id, new).unwrap();
    assert_eq!(store.ids(), &[new_id]);
}

#[test]
fn permutation_estimate_matches_formula() {
    let per_token = kv_store::kv_bytes_per_token(32, 8, 128, 2);
    assert_eq!(per_token, 131_072);
    let one = kv_store::estimate_permutation_cache(1, 256, 32, 8, 128, 2, kv_store::PermutationCounting::OrderedPredecessors).unwrap();
    assert_eq!(one, 256 * 131_072);
    let mut sum: u128 = 0;
    for k in 1..=10u128 {
        sum += (10 - k + 1..=10).product::<u128>();
    }
    let ten = kv_store::estimate_permutation_cache(10, 256, 32, 8, 128, 2, kv_store::PermutationCounting::OrderedPredecessors).unwrap();
    assert_eq!(ten, sum * 256 * 131_072);
    let ratio = ten as f64 / 22e15;
    assert!(ratio > 0.01 && ratio < 0.1, "ratio {ratio}");
}

#[test]
fn model_is_deterministic_and_seeded() {
    let spec = ToyModelSpec {
        n_layers: 2,
        n_heads: 2,
        head_dim: 8,
        ..ToyModelSpec::default()
    };
    let a = Model::new(spec.clone()).unwrap();
    let b = Model::new(spec.clone()).unwrap();
    let c = Model::new(ToyModelSpec { seed: 43, ..spec.clone() }).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());

    let h = 16;
    let f = 4 * h;
    let closed_form = 2 * 256 * h + 2 * (4 * h * h + 3 * h * f + 2 * h) + h;
    assert_eq!(a.parameter_count(), closed_form);

    let s1 = a.encode_segment(b"hello world", Role::Context, None, 0).unwrap();
    let s2 = a.encode_segment(b"hello world", Role::Context, None, 0).unwrap();
    assert_eq!(bits(&s1.keys), bits(&s2.keys));
}

#[test]
fn equal_contexts_get_identical_parallel_keys() {
    let m = small();
    let prefix = m.encode_segment(b"\n\n", Role::Prefix, None, 0).unwrap();
    let a = m.encode_segment(b"same text", Role::Context, Some(&prefix), 2).unwrap();
    let b = m.encode_segment(b"same text", Role::Context, Some(&prefix), 2).unwrap();
    assert_eq!(bits(&a.keys), bits(&b.keys));
}

#[test]
fn zero_new_tokens_returns_prefill_only() {
    let m = small();
    let ctx = m.encode_segment(b"abc", Role::Context, None, 0).unwrap();
    let out = m
        .decode_with_cache(b"xyz", None, &[ctx], AttentionMode::Ape, &ApeConfig::default(), 0)
        .unwrap();
    assert!(out.generated.is_empty());
    assert_eq!(out.prefill_logits.len(), 3);
    assert!(out.step_logits.is_empty());
}

#[test]
fn logits_finite_for_all_bytes() {
    let m = small();
    let all: Vec<u8> = (0..=255u8).collect();
    let ctx = m.encode_segment(&all, Role::Context, None, 0).unwrap();
    let out = m
        .decode_with_cache(&all, None, &[ctx], AttentionMode::Sequential, &ApeConfig::default(), 2)
        .unwrap();
    assert!(out.prefill_logits.iter().flatten().all(|x| x.is_finite()));
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0; 4]), 0);
}

#[test]
fn sequential_decode_rejects_parallel_positions() {
    let m = small();
    let a = m.encode_segment(b"aaa", Role::Context, None, 0).unwrap();
    let b = m.encode_segment(b"bbb", Role::Context, None, 0).unwrap();
    let r = m.decode_with_cache(b"q", None, &[a, b], AttentionMode::Sequential, &ApeConfig::default(), 1);
    assert!(r.is_err());
}
