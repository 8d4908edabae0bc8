//! Independent reference implementations shared by the property tests and
//! the acceptance suite. Each one is written the slow, obvious way.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ufrec::config::Config;
use ufrec::data::{build_sequences, k_core_filter, split_leave_one_out, RawInteraction, SplitDataset, SplitOrder};
use ufrec::item_enhancer::{boosted_decay, time_decay};
use ufrec::partition::{Partition, PartitionMode};
use ufrec::synth::{generate, SynthConfig};

/// k-core by deleting one offending user or item at a time until none is left.
pub fn kcore_oracle(rows: &[RawInteraction], k_user: usize, k_item: usize) -> Vec<RawInteraction> {
    let mut live: Vec<RawInteraction> = rows.to_vec();
    loop {
        let mut users: BTreeMap<&str, usize> = BTreeMap::new();
        let mut items: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &live {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let bad_user = users.iter().find(|(_, &c)| c < k_user).map(|(u, _)| u.to_string());
        let bad_item = items.iter().find(|(_, &c)| c < k_item).map(|(i, _)| i.to_string());
        match (bad_user, bad_item) {
            (Some(u), _) => live.retain(|r| r.user != u),
            (None, Some(i)) => live.retain(|r| r.item != i),
            (None, None) => return live,
        }
    }
}

/// Population variance of consecutive gaps, straight from the definition.
pub fn variance_oracle(ts: &[i64]) -> f64 {
    if ts.len() < 2 {
        return 0.0;
    }
    let gaps: Vec<f64> = ts.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / gaps.len() as f64
}

/// Tries every prefix length and keeps the first one with the smallest
/// imbalance between the two sides.
pub fn balanced_oracle(counts_in_order: &[usize]) -> usize {
    let mut best: Option<(i64, usize)> = None;
    for p in 1..counts_in_order.len() {
        let head: i64 = counts_in_order[..p].iter().map(|&c| c as i64).sum();
        let tail: i64 = counts_in_order[p..].iter().map(|&c| c as i64).sum();
        let gap = (head - tail).abs();
        if best.map_or(true, |(g, _)| gap < g) {
            best = Some((gap, p));
        }
    }
    best.map_or(1, |(_, p)| p)
}

/// 1-based rank of the positive after sorting every score descending, with
/// the positive placed behind any negative that ties it.
pub fn sorted_rank(positive: f64, negatives: &[f64]) -> usize {
    let mut all: Vec<(f64, bool)> = negatives.iter().map(|&s| (s, false)).collect();
    all.push((positive, true));
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.iter().position(|e| e.1).unwrap() + 1
}

/// `(ndcg, hr, mrr)` at `k` from a rank, written out by hand.
pub fn metrics_oracle(rank: usize, k: usize) -> (f64, f64, f64) {
    if rank > k {
        (0.0, 0.0, 0.0)
    } else {
        (1.0 / ((rank + 1) as f64).log2(), 1.0, 1.0 / rank as f64)
    }
}

/// Top-`limit` neighbors per item recomputed from raw histories: gaps between
/// first occurrences, Jaccard of user sets, min–max popularity.
pub fn candidate_oracle(
    histories: &[(Vec<usize>, Vec<i64>)],
    num_items: usize,
    theta: f64,
    gamma: f64,
    pop_sim: bool,
    limit: usize,
) -> Vec<Vec<(usize, f64)>> {
    let mut firsts: Vec<HashMap<usize, i64>> = Vec::new();
    let mut count = vec![0usize; num_items + 1];
    let mut users_of: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_items + 1];
    for (u, (items, times)) in histories.iter().enumerate() {
        let mut f = HashMap::new();
        for (&i, &t) in items.iter().zip(times) {
            count[i] += 1;
            users_of[i].insert(u);
            f.entry(i).or_insert(t);
        }
        firsts.push(f);
    }
    let max = *count[1..].iter().max().unwrap() as f64;
    let min = *count[1..].iter().min().unwrap() as f64;
    let pop = |i: usize| if max == min { 1.0 } else { (count[i] as f64 - min) / (max - min) };
    let mut out = vec![Vec::new(); num_items + 1];
    for c in 1..=num_items {
        let mut scored = Vec::new();
        for j in 1..=num_items {
            if j == c {
                continue;
            }
            let gaps: Vec<f64> = firsts
                .iter()
                .filter_map(|f| Some(((f.get(&c)? - f.get(&j)?).abs()) as f64 / 86_400.0))
                .collect();
            if gaps.is_empty() {
                continue;
            }
            let t = gaps.iter().sum::<f64>() / gaps.len() as f64;
            let inter = users_of[c].intersection(&users_of[j]).count() as f64;
            let union = users_of[c].union(&users_of[j]).count() as f64;
            let s = if pop_sim {
                time_decay(t) + boosted_decay(t, pop(j), theta, gamma) + boosted_decay(t, inter / union, theta, gamma)
            } else {
                time_decay(t)
            };
            scored.push((j, s));
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(limit);
        out[c] = scored;
    }
    out
}

/// True when `retained` is strictly increasing and picks out `derived` from `original`.
pub fn is_indexed_subsequence(original: &[usize], derived: &[usize], retained: &[usize]) -> bool {
    retained.len() == derived.len()
        && retained.windows(2).all(|w| w[0] < w[1])
        && retained.iter().zip(derived).all(|(&r, &d)| r < original.len() && original[r] == d)
}

pub fn split_from_rows(rows: &[RawInteraction], k_user: usize, k_item: usize) -> SplitDataset {
    let kept = k_core_filter(rows, k_user, k_item);
    let seqs = build_sequences(&kept).expect("sequences");
    split_leave_one_out(&seqs.sequences, seqs.num_items(), SplitOrder::ValidLast)
}

/// The desk-scale synthetic corpus: about 400 users over a few hundred items.
pub fn desk_corpus(seed: u64) -> SynthConfig {
    SynthConfig {
        users: 400,
        items: 300,
        seed,
        ..SynthConfig::default()
    }
}

pub fn desk_config(seed: u64) -> Config {
    Config {
        dim: 16,
        max_len: 20,
        epochs: 30,
        patience: 10,
        batch_size: 64,
        train_negatives: 20,
        enhance_start: 3,
        refine_start: 10,
        seed,
        ..Config::default()
    }
}

pub fn desk_data(seed: u64, cfg: &Config) -> (SplitDataset, Partition) {
    let corpus = generate(&desk_corpus(seed)).expect("corpus");
    let data = split_from_rows(&corpus.interactions, cfg.k_user, cfg.k_item);
    let labels = Partition::from_split(&data, cfg.uniform_ratio, cfg.frequent_ratio, PartitionMode::Ratio).expect("labels");
    (data, labels)
}

/// Small corpus with a deterministic successor per item, meant to be memorised.
pub fn overfit_config(seed: u64) -> Config {
    Config {
        k_user: 1,
        k_item: 1,
        dim: 32,
        max_len: 30,
        epochs: 200,
        patience: 30,
        batch_size: 64,
        lr: 0.01,
        train_negatives: 100,
        enhance_start: 5,
        refine_start: 20,
        seed,
        ..Config::default()
    }
}

pub fn overfit_data(seed: u64, cfg: &Config) -> (SplitDataset, Partition) {
    let corpus = generate(&SynthConfig::overfit(seed)).expect("corpus");
    let data = split_from_rows(&corpus.interactions, cfg.k_user, cfg.k_item);
    let labels = Partition::from_split(&data, cfg.uniform_ratio, cfg.frequent_ratio, PartitionMode::Ratio).expect("labels");
    (data, labels)
}
