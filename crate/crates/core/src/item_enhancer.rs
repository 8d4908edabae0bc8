//! Neighbor-based enhancement of item embeddings.
//!
//! Items that co-occur in user histories are scored by a mix of temporal
//! proximity, popularity and user-set overlap. A frequent item's embedding,
//! concatenated with an attention pool of sampled neighbors, trains a transfer
//! map back to the item embedding; a frozen copy of that map later pulls
//! less-frequent embeddings towards what their neighborhoods predict.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use ufrec_tensor::{Graph, ParameterStore, Tensor, Var};

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::model::{self, FROZEN_B, FROZEN_W, ITEM_EMB, TRANSFER_B, TRANSFER_W};

pub const NEIGHBORS_FILE: &str = "neighbors.json";
const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStat {
    /// Mean absolute gap between first occurrences, in days.
    pub gap_days: f64,
    /// Users whose history holds both items.
    pub shared_users: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceStats {
    pub num_items: usize,
    /// Keyed by `(low id, high id)`.
    pub pairs: BTreeMap<(usize, usize), PairStat>,
    /// Distinct users per item (index 0 unused).
    pub item_users: Vec<usize>,
    /// Min–max normalized interaction count per item (index 0 unused).
    pub popularity: Vec<f64>,
}

impl CooccurrenceStats {
    pub fn pair(&self, a: usize, b: usize) -> Option<&PairStat> {
        self.pairs.get(&(a.min(b), a.max(b)))
    }

    /// Jaccard overlap of the two items' user sets.
    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        match self.pair(a, b) {
            None => 0.0,
            Some(p) => {
                let union = self.item_users[a] + self.item_users[b] - p.shared_users;
                p.shared_users as f64 / union as f64
            }
        }
    }

    /// Median co-occurrence gap; 1 day when the median is zero or no pair exists.
    pub fn median_gap(&self) -> f64 {
        let mut gaps: Vec<f64> = self.pairs.values().map(|p| p.gap_days).collect();
        if gaps.is_empty() {
            return 1.0;
        }
        gaps.sort_by(f64::total_cmp);
        let n = gaps.len();
        let m = if n % 2 == 1 {
            gaps[n / 2]
        } else {
            0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
        };
        if m > 0.0 {
            m
        } else {
            log::warn!("median co-occurrence gap is zero; using 1 day");
            1.0
        }
    }
}

/// Co-occurrence statistics over per-user training histories.
pub fn build_cooccurrence_stats(histories: &[(Vec<usize>, Vec<i64>)], num_items: usize) -> CooccurrenceStats {
    let mut acc: HashMap<(usize, usize), (f64, usize)> = HashMap::new();
    let mut item_users = vec![0usize; num_items + 1];
    let mut counts = vec![0usize; num_items + 1];
    for (items, times) in histories {
        let mut first: BTreeMap<usize, i64> = BTreeMap::new();
        for (&i, &t) in items.iter().zip(times) {
            counts[i] += 1;
            first.entry(i).or_insert(t);
        }
        let firsts: Vec<(usize, i64)> = first.into_iter().collect();
        for (a, &(i, ti)) in firsts.iter().enumerate() {
            item_users[i] += 1;
            for &(j, tj) in &firsts[a + 1..] {
                let e = acc.entry((i, j)).or_insert((0.0, 0));
                e.0 += (ti - tj).abs() as f64 / SECONDS_PER_DAY;
                e.1 += 1;
            }
        }
    }
    let pairs = acc
        .into_iter()
        .map(|(k, (sum, n))| {
            (
                k,
                PairStat {
                    gap_days: sum / n as f64,
                    shared_users: n,
                },
            )
        })
        .collect();
    let real = &counts[1..];
    let max = real.iter().copied().max().unwrap_or(0) as f64;
    let min = real.iter().copied().min().unwrap_or(0) as f64;
    let popularity = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| match i {
            0 => 0.0,
            _ if max == min => 1.0,
            _ => (c as f64 - min) / (max - min),
        })
        .collect();
    CooccurrenceStats {
        num_items,
        pairs,
        item_users,
        popularity,
    }
}

pub fn stats_from_split(data: &SplitDataset) -> CooccurrenceStats {
    let histories: Vec<(Vec<usize>, Vec<i64>)> =
        data.users.iter().map(|u| (u.train.clone(), u.train_times.clone())).collect();
    build_cooccurrence_stats(&histories, data.num_items)
}

/// Temporal-proximity term `1 / (1 + ln(1 + T))`.
pub fn time_decay(t: f64) -> f64 {
    1.0 / (1.0 + t.ln_1p())
}

/// `(T+Θ)·exp(−(T+Θ)/(Γx))`, zero when `x = 0`.
pub fn boosted_decay(t: f64, x: f64, theta: f64, gamma: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let a = t + theta;
    a * (-a / (gamma * x)).exp()
}

pub fn neighbor_score(t: f64, popularity: f64, similarity: f64, theta: f64, gamma: f64) -> f64 {
    time_decay(t) + boosted_decay(t, popularity, theta, gamma) + boosted_decay(t, similarity, theta, gamma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParams {
    pub theta: f64,
    pub gamma: f64,
    /// When false only the temporal term is used.
    pub pop_sim: bool,
}

impl ScoreParams {
    pub fn resolve(stats: &CooccurrenceStats, theta: Option<f64>, gamma: Option<f64>, pop_sim: bool) -> Self {
        let theta = theta.unwrap_or_else(|| stats.median_gap());
        Self {
            theta,
            gamma: gamma.unwrap_or(2.0 * theta),
            pop_sim,
        }
    }

    pub fn score(&self, stats: &CooccurrenceStats, center: usize, other: usize) -> Option<f64> {
        let p = stats.pair(center, other)?;
        Some(if self.pop_sim {
            neighbor_score(
                p.gap_days,
                stats.popularity[other],
                stats.similarity(center, other),
                self.theta,
                self.gamma,
            )
        } else {
            time_decay(p.gap_days)
        })
    }
}

/// Top-`limit` co-occurring partners per item, by descending score then id.
/// `sets[i]` belongs to item `i`; index 0 is empty.
pub fn build_candidate_sets(stats: &CooccurrenceStats, params: &ScoreParams, limit: usize) -> Vec<Vec<(usize, f64)>> {
    let mut partners: Vec<Vec<usize>> = vec![Vec::new(); stats.num_items + 1];
    for &(a, b) in stats.pairs.keys() {
        partners[a].push(b);
        partners[b].push(a);
    }
    partners
        .iter()
        .enumerate()
        .map(|(c, js)| {
            if c == 0 {
                return Vec::new();
            }
            let mut scored: Vec<(usize, f64)> = js
                .iter()
                .map(|&j| (j, params.score(stats, c, j).expect("pair exists")))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.truncate(limit);
            scored
        })
        .collect()
}

pub fn write_candidate_sets(path: &Path, sets: &[Vec<(usize, f64)>]) -> Result<()> {
    let map: BTreeMap<usize, &Vec<(usize, f64)>> = sets
        .iter()
        .enumerate()
        .filter(|(i, s)| *i > 0 && !s.is_empty())
        .collect();
    fs::write(path, serde_json::to_string(&map)?).map_err(|e| Error::io(path, e))
}

/// `k` uniform draws: distinct when the set is large enough, with replacement otherwise.
pub fn sample_neighbors<R: Rng + ?Sized>(set: &[(usize, f64)], k: usize, rng: &mut R) -> Option<Vec<usize>> {
    if set.is_empty() {
        return None;
    }
    if set.len() >= k {
        let picks = rand::seq::index::sample(rng, set.len(), k);
        Some(picks.iter().map(|i| set[i].0).collect())
    } else {
        Some((0..k).map(|_| set[rng.gen_range(0..set.len())].0).collect())
    }
}

/// Returns `(m_c, m_c ∥ m_n)` where `m_n` is the attention pool of the neighbors.
pub fn enhanced_representation(g: &mut Graph, center: usize, neighbors: &[usize]) -> Result<(Var, Var)> {
    let table = g.param_by_name(ITEM_EMB)?;
    let m_c = g.gather_rows(table, &[center])?;
    let nb = g.gather_rows(table, neighbors)?;
    let logits = g.matmul_nt(m_c, nb)?;
    let alpha = g.softmax(logits, None)?;
    let m_n = g.matmul(alpha, nb)?;
    let joined = g.concat_cols(&[m_c, m_n])?;
    Ok((m_c, joined))
}

/// One item's contribution to an enhancement loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemTask {
    pub item: usize,
    pub neighbors: Vec<usize>,
    /// Curriculum weight (frequent items) or refinement weight (less-frequent items).
    pub weight: f64,
    pub frequent: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ItemTerms {
    /// Mean weighted reconstruction error of frequent items under the trainable map.
    pub frequent: Option<Var>,
    /// Mean weighted error of less-frequent items under the frozen map.
    pub less_frequent: Option<Var>,
}

pub fn item_losses(g: &mut Graph, tasks: &[ItemTask]) -> Result<ItemTerms> {
    let mut terms = ItemTerms::default();
    for frequent in [true, false] {
        let group: Vec<&ItemTask> = tasks.iter().filter(|t| t.frequent == frequent).collect();
        if group.is_empty() {
            continue;
        }
        if !frequent && !g.store().contains(FROZEN_W) {
            return Err(Error::SnapshotMissing);
        }
        let scale = 1.0 / group.len() as f64;
        let mut total: Option<Var> = None;
        for t in group {
            let (m_c, joined) = enhanced_representation(g, t.item, &t.neighbors)?;
            let pred = model::transfer(g, joined, !frequent)?;
            let diff = g.sub(m_c, pred)?;
            let sq = g.sum_sq(diff);
            let term = g.scale(sq, t.weight * scale);
            total = Some(match total {
                None => term,
                Some(prev) => g.add(prev, term)?,
            });
        }
        if frequent {
            terms.frequent = total;
        } else {
            terms.less_frequent = total;
        }
    }
    Ok(terms)
}

/// Copies the transfer map into its frozen, non-trainable counterpart.
pub fn capture_snapshot(store: &mut ParameterStore) -> Result<()> {
    for (src, dst) in [(TRANSFER_W, FROZEN_W), (TRANSFER_B, FROZEN_B)] {
        let value: Tensor = store.by_name(src)?.clone();
        if store.contains(dst) {
            let id = store.id(dst)?;
            *store.get_mut(id) = value;
        } else {
            store.insert(dst, value, false)?;
        }
    }
    Ok(())
}

/// `frozen ← decay·frozen + (1−decay)·current`.
pub fn ema_update(store: &mut ParameterStore, decay: f64) -> Result<()> {
    if !store.contains(FROZEN_W) {
        return Err(Error::SnapshotMissing);
    }
    for (src, dst) in [(TRANSFER_W, FROZEN_W), (TRANSFER_B, FROZEN_B)] {
        let current = store.by_name(src)?.data().to_vec();
        let id = store.id(dst)?;
        for (f, c) in store.get_mut(id).data_mut().iter_mut().zip(current) {
            *f = decay * *f + (1.0 - decay) * c;
        }
    }
    Ok(())
}
