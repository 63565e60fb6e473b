mod common;

use ape_core::attention::{
    ape_attention, ape_attention_flat, ape_attention_two_pass, ape_weights_flat, attend_full, merge,
    merge_partials, partial_attention, sequential_attention, HeadInputs, HeadKv, LseAdjust, MergeAccumulator,
};
use ape_core::{ApeConfig, Mat, RowMask, ScalingMode};
use common::{naive_attention, random_mat, rel_err};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Case {
    q: Mat,
    prefix: (Mat, Mat),
    contexts: Vec<(Mat, Mat)>,
    own: (Mat, Mat),
}

fn case(seed: u64, n_ctx: usize, d: usize, prefix_len: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pair = |l: usize| (random_mat(&mut rng, l, d, 1.0), random_mat(&mut rng, l, d, 1.0));
    let prefix = pair(prefix_len);
    let contexts = (0..n_ctx).map(|i| pair(2 + (i * 3 + seed as usize) % 7)).collect();
    let own = pair(3);
    let q = random_mat(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xFF), 2, d, 1.0);
    Case {
        q,
        prefix,
        contexts,
        own,
    }
}

fn inputs<'a>(c: &'a Case, order: &[usize]) -> HeadInputs<'a> {
    let p = c.prefix.0.rows();
    let max = c.contexts.iter().map(|x| x.0.rows()).max().unwrap_or(0);
    HeadInputs {
        prefix: (p > 0).then_some(HeadKv {
            keys: &c.prefix.0,
            values: &c.prefix.1,
            position_offset: 0,
        }),
        contexts: order
            .iter()
            .map(|i| HeadKv {
                keys: &c.contexts[*i].0,
                values: &c.contexts[*i].1,
                position_offset: p,
            })
            .collect(),
        own: HeadKv {
            keys: &c.own.0,
            values: &c.own.1,
            position_offset: p + max,
        },
    }
}

fn to64(m: &Mat) -> Vec<f64> {
    m.data().iter().map(|x| f64::from(*x)).collect()
}

fn grid_value() -> impl Strategy<Value = f64> {
    (1u32..=10).prop_map(|k| f64::from(k) / 10.0)
}

proptest! {
    #[test]
    fn merge_matches_monolithic(seed in any::<u64>(), cuts in prop::collection::vec(1usize..6, 1..6), d in prop::sample::select(vec![4usize, 8, 16])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: usize = cuts.iter().sum();
        let q = random_mat(&mut rng, 3, d, 1.5);
        let k = random_mat(&mut rng, total, d, 1.0);
        let v = random_mat(&mut rng, total, d, 1.0);
        let mut parts = Vec::new();
        let mut at = 0;
        for c in &cuts {
            let rows: Vec<Vec<f32>> = (at..at + c).map(|r| k.row(r).to_vec()).collect();
            let vrows: Vec<Vec<f32>> = (at..at + c).map(|r| v.row(r).to_vec()).collect();
            let ks = Mat::from_rows(&rows).unwrap();
            let vs = Mat::from_rows(&vrows).unwrap();
            parts.push(partial_attention(&q, &ks, &vs, &RowMask::Full, 1.0).unwrap());
            at += c;
        }
        let merged = merge(&parts.iter().map(|p| (p, LseAdjust::None)).collect::<Vec<_>>()).unwrap();
        let full = attend_full(&q, &k, &v, &RowMask::Full).unwrap();
        prop_assert!(rel_err(merged.data(), &to64(&full)) < 1e-5);

        let mut acc = MergeAccumulator::new(3, d);
        for p in &parts {
            acc.push(p, &LseAdjust::None).unwrap();
        }
        prop_assert!(rel_err(acc.finish().unwrap().out.data(), &to64(&full)) < 1e-5);
    }

    #[test]
    fn ape_is_order_invariant(seed in any::<u64>(), t in grid_value(), s in grid_value(), per in any::<bool>()) {
        let c = case(seed, 3, 8, 2);
        let mode = if per { ScalingMode::PerContext } else { ScalingMode::Aggregate };
        let cfg = ApeConfig::new(t, s, mode).unwrap();
        let base = ape_attention(&c.q, &inputs(&c, &[0, 1, 2]), &cfg).unwrap();
        for order in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let other = ape_attention(&c.q, &inputs(&c, &order), &cfg).unwrap();
            prop_assert!(rel_err(other.data(), &to64(&base)) < 1e-6);
        }
    }

    #[test]
    fn scaling_modes_coincide_for_one_context_or_unit_scale(seed in any::<u64>(), t in grid_value(), s in grid_value(), n in 1usize..4) {
        let c = case(seed, n, 8, 1);
        let order: Vec<usize> = (0..n).collect();
        let x = inputs(&c, &order);
        let scale = if n == 1 { s } else { 1.0 };
        let agg = ape_attention(&c.q, &x, &ApeConfig::new(t, scale, ScalingMode::Aggregate).unwrap()).unwrap();
        let per = ape_attention(&c.q, &x, &ApeConfig::new(t, scale, ScalingMode::PerContext).unwrap()).unwrap();
        prop_assert!(rel_err(per.data(), &to64(&agg)) < 1e-6);
    }

    #[test]
    fn three_paths_agree_and_weights_sum_to_one(seed in any::<u64>(), t in grid_value(), s in grid_value(), n in 1usize..5, p in 0usize..3) {
        let c = case(seed, n, 16, p);
        let order: Vec<usize> = (0..n).collect();
        let x = inputs(&c, &order);
        let cfg = ApeConfig::new(t, s, ScalingMode::Aggregate).unwrap();
        let two = ape_attention_two_pass(&c.q, &x, &cfg).unwrap();
        let flat = ape_attention_flat(&c.q, &x, &cfg).unwrap();
        let hier = ape_attention(&c.q, &x, &cfg).unwrap();
        prop_assert!(rel_err(two.data(), &to64(&flat)) < 1e-5);
        prop_assert!(rel_err(hier.data(), &to64(&flat)) < 1e-5);
        for row in ape_weights_flat(&c.q, &x, &cfg).unwrap() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scale_contracts_lse(lse in -200.0f64..200.0, s in grid_value()) {
        let part = ape_core::PartialAttention { out: Mat::zeros(1, 2), lse: vec![lse] };
        let merged = merge_partials(&[(&part, LseAdjust::Scale(s))]).unwrap();
        prop_assert!(merged.lse[0].abs() <= lse.abs());
    }
}

#[test]
fn equal_logits_average_values() {
    let q = Mat::new(1, 2, vec![1.0, 0.0]).unwrap();
    let k = Mat::new(2, 2, vec![0.5, 1.0, 0.5, -1.0]).unwrap();
    let v = Mat::new(2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
    let out = attend_full(&q, &k, &v, &RowMask::Full).unwrap();
    assert!((out.get(0, 0) - 3.0).abs() < 1e-6);
    assert!((out.get(0, 1) - 5.0).abs() < 1e-6);

    let a = partial_attention(&q, &Mat::new(1, 2, vec![0.5, 1.0]).unwrap(), &Mat::new(1, 2, vec![1.0, 3.0]).unwrap(), &RowMask::Full, 1.0).unwrap();
    let b = partial_attention(&q, &Mat::new(1, 2, vec![0.5, -1.0]).unwrap(), &Mat::new(1, 2, vec![5.0, 7.0]).unwrap(), &RowMask::Full, 1.0).unwrap();
    let m = merge(&[(&a, LseAdjust::None), (&b, LseAdjust::None)]).unwrap();
    assert_eq!(m.data(), out.data());
}

#[test]
fn lse_offset_of_ln3_gives_three_to_one() {
    let a = ape_core::PartialAttention {
        out: Mat::new(1, 1, vec![1.0]).unwrap(),
        lse: vec![3f64.ln()],
    };
    let b = ape_core::PartialAttention {
        out: Mat::new(1, 1, vec![0.0]).unwrap(),
        lse: vec![0.0],
    };
    let m = merge(&[(&a, LseAdjust::None), (&b, LseAdjust::None)]).unwrap();
    assert!((m.get(0, 0) - 0.75).abs() < 1e-7);
}

#[test]
fn seeded_attention_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = random_mat(&mut rng, 6, 4, 1.0);
    let k = random_mat(&mut rng, 6, 4, 1.0);
    let v = random_mat(&mut rng, 6, 4, 1.0);
    let mask = RowMask::Causal { offset: 0 };
    let got = attend_full(&q, &k, &v, &mask).unwrap();
    let want = naive_attention(&q, &k, &v, 1.0, |r, c| c <= r);
    assert!(rel_err(got.data(), &want) < 1e-6);
}

#[test]
fn sequential_with_two_contexts_matches_concatenation() {
    let c = case(11, 2, 8, 2);
    let (p, l0, l1) = (2, c.contexts[0].0.rows(), c.contexts[1].0.rows());
    let x = HeadInputs {
        prefix: Some(HeadKv {
            keys: &c.prefix.0,
            values: &c.prefix.1,
            position_offset: 0,
        }),
        contexts: vec![
            HeadKv {
                keys: &c.contexts[0].0,
                values: &c.contexts[0].1,
                position_offset: p,
            },
            HeadKv {
                keys: &c.contexts[1].0,
                values: &c.contexts[1].1,
                position_offset: p + l0,
            },
        ],
        own: HeadKv {
            keys: &c.own.0,
            values: &c.own.1,
            position_offset: p + l0 + l1,
        },
    };
    let got = sequential_attention(&c.q, &x).unwrap();
    let k = Mat::vstack(&[&c.prefix.0, &c.contexts[0].0, &c.contexts[1].0, &c.own.0]).unwrap();
    let v = Mat::vstack(&[&c.prefix.1, &c.contexts[0].1, &c.contexts[1].1, &c.own.1]).unwrap();
    let total = k.rows();
    let want = attend_full(&c.q, &k, &v, &RowMask::Causal { offset: total - c.q.rows() }).unwrap();
    assert!(rel_err(got.data(), &to64(&want)) < 1e-5);
}

#[test]
fn ape_rejects_empty_context_list() {
    let c = case(3, 0, 8, 2);
    let x = inputs(&c, &[]);
    assert!(ape_attention(&c.q, &x, &ApeConfig::default()).is_err());
    assert!(ape_attention_two_pass(&c.q, &x, &ApeConfig::default()).is_err());
}
