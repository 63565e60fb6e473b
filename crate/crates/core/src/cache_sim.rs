//! Hit-rate comparison of prefix-chain caching and position-reused (APE)
//! context caching when each query retrieves a subset of contexts.
//!
//! Storage and hits are counted in context-length units (1 per context by
//! default). A prefix layout is a prefix-closed set of ordered context chains
//! (a trie); each trie node stores one context's KV under one ordered
//! predecessor chain and costs that context's length. A query hits the nodes
//! along the longest stored prefix of its ordered context tuple. An APE cache
//! stores each context once and serves it wherever it appears.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ApeError, Result};

/// Largest context count accepted by the exhaustive layout search.
pub const MAX_EXHAUSTIVE_CONTEXTS: usize = 6;

/// Reference hit rate quoted for the four-context example (5/12).
pub const REFERENCE_PREFIX_RATE: f64 = 0.417;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub n_contexts: usize,
    pub retrieve_k: usize,
    /// Ordered context ids (`0..n_contexts`) retrieved by each query.
    pub queries: Vec<Vec<usize>>,
    pub budget: u64,
    pub context_lens: Vec<u64>,
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

impl Workload {
    /// Every size-`k` subset of `n` unit-length contexts, in ascending order.
    pub fn all_subsets(n_contexts: usize, retrieve_k: usize, budget: u64) -> Result<Self> {
        let w = Workload {
            n_contexts,
            retrieve_k,
            queries: subsets(n_contexts, retrieve_k),
            budget,
            context_lens: vec![1; n_contexts],
        };
        w.validate()?;
        Ok(w)
    }

    /// Shuffles the retrieval order inside every query.
    pub fn shuffled(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for q in &mut self.queries {
            q.shuffle(&mut rng);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrieve_k > self.n_contexts {
            return Err(ApeError::invalid(format!(
                "cannot retrieve {} of {} contexts",
                self.retrieve_k, self.n_contexts
            )));
        }
        if self.context_lens.len() != self.n_contexts {
            return Err(ApeError::invalid("one length per context required"));
        }
        for q in &self.queries {
            if q.len() != self.retrieve_k {
                return Err(ApeError::invalid(format!(
                    "query {q:?} does not retrieve {} contexts",
                    self.retrieve_k
                )));
            }
            let distinct: BTreeSet<_> = q.iter().collect();
            if distinct.len() != q.len() || q.iter().any(|c| *c >= self.n_contexts) {
                return Err(ApeError::invalid(format!("query {q:?} has bad context ids")));
            }
        }
        Ok(())
    }

    fn total_units(&self) -> u64 {
        self.queries
            .iter()
            .flatten()
            .map(|c| self.context_lens[*c])
            .sum()
    }
}

/// Exact hit ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitRate {
    pub hits: u64,
    pub total: u64,
}

impl HitRate {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// APE cache hit rate. With `budget ≥ Σ lengths` every context is cached;
/// otherwise the subset of contexts maximising hits within the budget is
/// cached (exhaustively for up to 16 contexts, greedily beyond).
pub fn ape_hit_rate(w: &Workload) -> Result<HitRate> {
    w.validate()?;
    let cached = ape_cached_contexts(w);
    let hits = w
        .queries
        .iter()
        .flatten()
        .filter(|c| cached.contains(c))
        .map(|c| w.context_lens[*c])
        .sum();
    Ok(HitRate {
        hits,
        total: w.total_units(),
    })
}

/// Contexts an APE cache would hold under the workload's budget.
pub fn ape_cached_contexts(w: &Workload) -> BTreeSet<usize> {
    let n = w.n_contexts;
    let mut occurrences = vec![0u64; n];
    for c in w.queries.iter().flatten() {
        occurrences[*c] += 1;
    }
    let value = |c: usize| occurrences[c] * w.context_lens[c];
    if w.context_lens.iter().sum::<u64>() <= w.budget {
        return (0..n).collect();
    }
    if n <= 16 {
        let mut best = (0u64, 0u32);
        for mask in 0u32..(1 << n) {
            let (cost, val) = (0..n)
                .filter(|c| mask & (1 << c) != 0)
                .fold((0u64, 0u64), |(cost, val), c| (cost + w.context_lens[c], val + value(c)));
            if cost <= w.budget && val > best.0 {
                best = (val, mask);
            }
        }
        return (0..n).filter(|c| best.1 & (1 << c) != 0).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| occurrences[*b].cmp(&occurrences[*a]).then(a.cmp(b)));
    let mut used = 0;
    let mut cached = BTreeSet::new();
    for c in order {
        if used + w.context_lens[c] <= w.budget {
            used += w.context_lens[c];
            cached.insert(c);
        }
    }
    cached
}

/// A prefix-cache layout: the stored chains, closed under prefixes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixLayout {
    pub chains: Vec<Vec<usize>>,
}

impl PrefixLayout {
    pub fn new(chains: Vec<Vec<usize>>) -> Self {
        PrefixLayout { chains }
    }

    /// Every trie node (nonempty prefix of some chain).
    pub fn nodes(&self) -> BTreeSet<Vec<usize>> {
        let mut nodes = BTreeSet::new();
        for chain in &self.chains {
            for d in 1..=chain.len() {
                nodes.insert(chain[..d].to_vec());
            }
        }
        nodes
    }

    pub fn storage(&self, w: &Workload) -> u64 {
        self.nodes()
            .iter()
            .map(|n| w.context_lens[*n.last().expect("nonempty node")])
            .sum()
    }

    fn from_nodes(nodes: &BTreeSet<Vec<usize>>) -> Self {
        let chains = nodes
            .iter()
            .filter(|n| !nodes.iter().any(|m| m.len() > n.len() && m.starts_with(n)))
            .cloned()
            .collect();
        PrefixLayout { chains }
    }
}

fn prefix_hits(w: &Workload, nodes: &BTreeSet<Vec<usize>>) -> u64 {
    let mut hits = 0;
    for q in &w.queries {
        for d in 1..=q.len() {
            if !nodes.contains(&q[..d]) {
                break;
            }
            hits += w.context_lens[q[d - 1]];
        }
    }
    hits
}

/// Prefix-cache hit rate of a layout; rejects layouts over budget.
pub fn prefix_hit_rate(w: &Workload, layout: &PrefixLayout) -> Result<HitRate> {
    w.validate()?;
    if layout.chains.iter().flatten().any(|c| *c >= w.n_contexts) {
        return Err(ApeError::invalid("layout references unknown contexts"));
    }
    let storage = layout.storage(w);
    if storage > w.budget {
        return Err(ApeError::invalid(format!(
            "layout needs {storage} units, budget is {}",
            w.budget
        )));
    }
    Ok(HitRate {
        hits: prefix_hits(w, &layout.nodes()),
        total: w.total_units(),
    })
}

/// Trie of all query prefixes with per-node cost and hit value.
struct CandidateTrie {
    nodes: Vec<Vec<usize>>,
    parent: Vec<Option<usize>>,
    cost: Vec<u64>,
    value: Vec<u64>,
}

impl CandidateTrie {
    fn build(w: &Workload) -> Self {
        let mut counts: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
        for q in &w.queries {
            for d in 1..=q.len() {
                *counts.entry(q[..d].to_vec()).or_default() += 1;
            }
        }
        // BTreeMap order puts every prefix before its extensions.
        let nodes: Vec<Vec<usize>> = counts.keys().cloned().collect();
        let index: BTreeMap<&Vec<usize>, usize> = nodes.iter().enumerate().map(|(i, n)| (n, i)).collect();
        let parent = nodes
            .iter()
            .map(|n| (n.len() > 1).then(|| index[&n[..n.len() - 1].to_vec()]))
            .collect();
        let cost = nodes.iter().map(|n| w.context_lens[*n.last().unwrap()]).collect();
        let value = nodes
            .iter()
            .map(|n| counts[n] * w.context_lens[*n.last().unwrap()])
            .collect();
        CandidateTrie {
            nodes,
            parent,
            cost,
            value,
        }
    }
}

struct Search<'a> {
    trie: &'a CandidateTrie,
    budget: u64,
    suffix_value: Vec<u64>,
    chosen: Vec<bool>,
    best_value: u64,
    best: Vec<bool>,
}

impl Search<'_> {
    fn run(&mut self, i: usize, cost: u64, value: u64) {
        if value > self.best_value {
            self.best_value = value;
            self.best = self.chosen.clone();
        }
        if i == self.trie.nodes.len() || value + self.suffix_value[i] <= self.best_value {
            return;
        }
        let parent_ok = self.trie.parent[i].is_none_or(|p| self.chosen[p]);
        if parent_ok && cost + self.trie.cost[i] <= self.budget {
            self.chosen[i] = true;
            self.run(i + 1, cost + self.trie.cost[i], value + self.trie.value[i]);
            self.chosen[i] = false;
        }
        self.run(i + 1, cost, value);
    }
}

/// Exhaustive search over prefix-closed layouts within budget (branch and
/// bound over the trie of query prefixes). Up to
/// [`MAX_EXHAUSTIVE_CONTEXTS`] contexts; use [`greedy_prefix_layout`] beyond.
pub fn best_prefix_layout(w: &Workload) -> Result<(PrefixLayout, HitRate)> {
    w.validate()?;
    if w.n_contexts > MAX_EXHAUSTIVE_CONTEXTS {
        return Err(ApeError::invalid(format!(
            "exhaustive layout search supports at most {MAX_EXHAUSTIVE_CONTEXTS} contexts, got {}; use greedy_prefix_layout",
            w.n_contexts
        )));
    }
    let trie = CandidateTrie::build(w);
    let n = trie.nodes.len();
    let mut suffix_value = vec![0u64; n + 1];
    for i in (0..n).rev() {
        suffix_value[i] = suffix_value[i + 1] + trie.value[i];
    }
    let mut search = Search {
        trie: &trie,
        budget: w.budget,
        suffix_value,
        chosen: vec![false; n],
        best_value: 0,
        best: vec![false; n],
    };
    search.run(0, 0, 0);
    let nodes: BTreeSet<Vec<usize>> = trie
        .nodes
        .iter()
        .zip(&search.best)
        .filter(|(_, c)| **c)
        .map(|(n, _)| n.clone())
        .collect();
    let layout = PrefixLayout::from_nodes(&nodes);
    let rate = prefix_hit_rate(w, &layout)?;
    Ok((layout, rate))
}

/// Greedy layout: repeatedly adds the affordable frontier node with the
/// highest value per unit cost.
pub fn greedy_prefix_layout(w: &Workload) -> Result<(PrefixLayout, HitRate)> {
    w.validate()?;
    let trie = CandidateTrie::build(w);
    let mut chosen = vec![false; trie.nodes.len()];
    let mut used = 0;
    loop {
        let pick = (0..trie.nodes.len())
            .filter(|&i| !chosen[i])
            .filter(|&i| trie.parent[i].is_none_or(|p| chosen[p]))
            .filter(|&i| used + trie.cost[i] <= w.budget)
            .max_by(|&a, &b| {
                let ra = trie.value[a] as f64 / trie.cost[a].max(1) as f64;
                let rb = trie.value[b] as f64 / trie.cost[b].max(1) as f64;
                ra.total_cmp(&rb).then(b.cmp(&a))
            });
        match pick {
            Some(i) => {
                chosen[i] = true;
                used += trie.cost[i];
            }
            None => break,
        }
    }
    let nodes = trie
        .nodes
        .iter()
        .zip(&chosen)
        .filter(|(_, c)| **c)
        .map(|(n, _)| n.clone())
        .collect();
    let layout = PrefixLayout::from_nodes(&nodes);
    let rate = prefix_hit_rate(w, &layout)?;
    Ok((layout, rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    pub workload: Workload,
    pub ape_rate: f64,
    pub best_prefix_rate: f64,
    pub best_layout: PrefixLayout,
    pub ape_hits: HitRate,
    pub best_prefix_hits: HitRate,
    pub reference_prefix_rate: f64,
    pub note: String,
}

pub fn report(w: &Workload) -> Result<CacheReport> {
    let ape = ape_hit_rate(w)?;
    let (layout, prefix) = if w.n_contexts <= MAX_EXHAUSTIVE_CONTEXTS {
        best_prefix_layout(w)?
    } else {
        greedy_prefix_layout(w)?
    };
    Ok(CacheReport {
        workload: w.clone(),
        ape_rate: ape.fraction(),
        best_prefix_rate: prefix.fraction(),
        best_layout: layout,
        ape_hits: ape,
        best_prefix_hits: prefix,
        reference_prefix_rate: REFERENCE_PREFIX_RATE,
        note: "prefix rate is the optimum over prefix-closed layouts within budget, counting \
               one storage unit per (context, predecessor chain) node; the reference value \
               assumes an unstated layout and accounting"
            .into(),
    })
}
