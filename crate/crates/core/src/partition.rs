//! Uniformity labels for users (interval-variance ranking) and frequency
//! labels for items (interaction-count ranking).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::error::{Error, Result};

pub const PARTITION_FILE: &str = "partition.json";

/// Population variance of consecutive gaps, in seconds².
pub fn interval_variance(timestamps: &[i64]) -> f64 {
    if timestamps.len() < 2 {
        log::warn!("sequence with {} timestamps has no intervals; variance taken as 0", timestamps.len());
        return 0.0;
    }
    let gaps: Vec<f64> = timestamps.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    #[default]
    Ratio,
    /// Prefix of the variance ordering whose interaction count is closest to half.
    Balanced,
}

impl std::str::FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(Self::Ratio),
            "balanced" => Ok(Self::Balanced),
            other => Err(Error::Config(format!("partition mode `{other}` (expected ratio|balanced)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceStat {
    pub user: usize,
    pub variance: f64,
    pub interactions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserLabel {
    pub user: usize,
    pub variance: f64,
    /// 1-based position in the ascending-variance order.
    pub rank: usize,
    pub uniform: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformityIndex {
    /// Sorted by user id.
    pub users: Vec<UserLabel>,
    pub v_max: f64,
    pub v_min: f64,
}

impl UniformityIndex {
    pub fn get(&self, user: usize) -> Option<&UserLabel> {
        self.users
            .binary_search_by_key(&user, |l| l.user)
            .ok()
            .map(|i| &self.users[i])
    }

    pub fn num_uniform(&self) -> usize {
        self.users.iter().filter(|l| l.uniform).count()
    }
}

/// Number of labels taken from the head of a ranking of `n` entries:
/// `ratio·n` rounded to the nearest integer, so that 0.67 of 3 is 2.
pub fn head_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round().max(0.0) as usize).min(n)
}

/// Ascending-variance order with ties broken by user id.
fn variance_order(stats: &[SequenceStat]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| {
        stats[a]
            .variance
            .total_cmp(&stats[b].variance)
            .then(stats[a].user.cmp(&stats[b].user))
    });
    order
}

/// Prefix length `p ∈ [1, n−1]` minimizing `|2·cum(p) − total|`; the first minimum wins.
pub fn balanced_prefix(counts_in_order: &[usize]) -> usize {
    let total: usize = counts_in_order.iter().sum();
    let mut best = (usize::MAX, 1);
    let mut cum = 0usize;
    for p in 1..counts_in_order.len() {
        cum += counts_in_order[p - 1];
        let gap = (2 * cum).abs_diff(total);
        if gap < best.0 {
            best = (gap, p);
        }
    }
    best.1
}

pub fn partition_sequences(stats: &[SequenceStat], ratio: f64, mode: PartitionMode) -> Result<UniformityIndex> {
    if stats.len() < 2 {
        return Err(Error::InvalidInput("partitioning needs at least 2 sequences".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("uniform ratio {ratio} outside (0,1)")));
    }
    let order = variance_order(stats);
    let uniform_count = match mode {
        PartitionMode::Ratio => head_count(ratio, stats.len()),
        PartitionMode::Balanced => {
            let counts: Vec<usize> = order.iter().map(|&i| stats[i].interactions).collect();
            balanced_prefix(&counts)
        }
    };
    let mut users: Vec<UserLabel> = order
        .iter()
        .enumerate()
        .map(|(pos, &i)| UserLabel {
            user: stats[i].user,
            variance: stats[i].variance,
            rank: pos + 1,
            uniform: pos < uniform_count,
        })
        .collect();
    users.sort_by_key(|l| l.user);
    let v_max = stats.iter().map(|s| s.variance).fold(f64::NEG_INFINITY, f64::max);
    let v_min = stats.iter().map(|s| s.variance).fold(f64::INFINITY, f64::min);
    Ok(UniformityIndex { users, v_max, v_min })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemLabel {
    pub item: usize,
    pub count: usize,
    pub rank: usize,
    pub frequent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyIndex {
    /// `items[k]` describes dense item `k + 1`.
    pub items: Vec<ItemLabel>,
    pub f_max: usize,
    pub f_min: usize,
}

impl FrequencyIndex {
    pub fn get(&self, item: usize) -> Option<&ItemLabel> {
        item.checked_sub(1).and_then(|k| self.items.get(k))
    }

    pub fn is_frequent(&self, item: usize) -> bool {
        self.get(item).is_some_and(|l| l.frequent)
    }

    pub fn num_frequent(&self) -> usize {
        self.items.iter().filter(|l| l.frequent).count()
    }
}

/// `counts[k]` is the interaction count of dense item `k + 1`.
pub fn partition_items(counts: &[usize], ratio: f64) -> Result<FrequencyIndex> {
    if counts.len() < 2 {
        return Err(Error::InvalidInput("partitioning needs at least 2 items".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("frequent ratio {ratio} outside (0,1)")));
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let take = head_count(ratio, counts.len());
    let mut items: Vec<ItemLabel> = counts
        .iter()
        .enumerate()
        .map(|(k, &count)| ItemLabel {
            item: k + 1,
            count,
            rank: 0,
            frequent: false,
        })
        .collect();
    for (pos, &k) in order.iter().enumerate() {
        items[k].rank = pos + 1;
        items[k].frequent = pos < take;
    }
    let frequent = order[..take].iter().map(|&k| counts[k]);
    let f_max = frequent.clone().max().unwrap_or(0);
    let f_min = frequent.min().unwrap_or(0);
    Ok(FrequencyIndex { items, f_max, f_min })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub users: UniformityIndex,
    pub items: FrequencyIndex,
}

impl Partition {
    /// Labels from the training split only.
    pub fn from_split(data: &SplitDataset, uniform_ratio: f64, frequent_ratio: f64, mode: PartitionMode) -> Result<Self> {
        let stats: Vec<SequenceStat> = data
            .users
            .iter()
            .map(|u| SequenceStat {
                user: u.user,
                variance: interval_variance(&u.train_times),
                interactions: u.train.len(),
            })
            .collect();
        let counts = data.train_counts();
        Ok(Self {
            users: partition_sequences(&stats, uniform_ratio, mode)?,
            items: partition_items(&counts[1..], frequent_ratio)?,
        })
    }

    pub fn is_uniform(&self, user: usize) -> Option<bool> {
        self.users.get(user).map(|l| l.uniform)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let users: BTreeMap<String, UserRecord> = self
            .users
            .users
            .iter()
            .map(|l| {
                (
                    l.user.to_string(),
                    UserRecord {
                        variance: l.variance,
                        rank: l.rank,
                        label: if l.uniform { "uniform" } else { "non-uniform" }.into(),
                    },
                )
            })
            .collect();
        let items: BTreeMap<String, ItemRecord> = self
            .items
            .items
            .iter()
            .map(|l| {
                (
                    l.item.to_string(),
                    ItemRecord {
                        count: l.count,
                        rank: l.rank,
                        label: if l.frequent { "frequent" } else { "less-frequent" }.into(),
                    },
                )
            })
            .collect();
        serde_json::to_value(PartitionFile {
            users,
            items,
            extremes: Extremes {
                v_max: self.users.v_max,
                v_min: self.users.v_min,
                f_max: self.items.f_max,
                f_min: self.items.f_min,
            },
        })
        .expect("partition serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let file: PartitionFile = serde_json::from_value(value)?;
        let parse_id = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::InvalidInput(format!("partition id `{s}` is not an integer")))
        };
        let mut users = Vec::with_capacity(file.users.len());
        for (id, r) in &file.users {
            users.push(UserLabel {
                user: parse_id(id)?,
                variance: r.variance,
                rank: r.rank,
                uniform: r.label == "uniform",
            });
        }
        users.sort_by_key(|l| l.user);
        let mut items = Vec::with_capacity(file.items.len());
        for (id, r) in &file.items {
            items.push(ItemLabel {
                item: parse_id(id)?,
                count: r.count,
                rank: r.rank,
                frequent: r.label == "frequent",
            });
        }
        items.sort_by_key(|l| l.item);
        if items.iter().enumerate().any(|(k, l)| l.item != k + 1) {
            return Err(Error::InvalidInput("partition items must cover 1..=num_items".into()));
        }
        Ok(Self {
            users: UniformityIndex {
                users,
                v_max: file.extremes.v_max,
                v_min: file.extremes.v_min,
            },
            items: FrequencyIndex {
                items,
                f_max: file.extremes.f_max,
                f_min: file.extremes.f_min,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.to_json())?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(serde_json::from_str(&text)?)
    }
}

#[derive(Serialize, Deserialize)]
struct UserRecord {
    variance: f64,
    rank: usize,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    count: usize,
    rank: usize,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct Extremes {
    #[serde(rename = "V_max")]
    v_max: f64,
    #[serde(rename = "V_min")]
    v_min: f64,
    #[serde(rename = "F_max")]
    f_max: usize,
    #[serde(rename = "F_min")]
    f_min: usize,
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    users: BTreeMap<String, UserRecord>,
    items: BTreeMap<String, ItemRecord>,
    extremes: Extremes,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stat(user: usize, variance: f64, interactions: usize) -> SequenceStat {
        SequenceStat {
            user,
            variance,
            interactions,
        }
    }

    #[test]
    fn variance_examples() {
        assert_eq!(interval_variance(&[0, 10, 20, 30]), 0.0);
        assert_eq!(interval_variance(&[0, 10, 30]), 25.0);
        assert_eq!(interval_variance(&[5]), 0.0);
        let scaled: Vec<i64> = [0, 10, 30].iter().map(|t| t * 7).collect();
        assert_eq!(interval_variance(&scaled), 25.0 * 49.0);
    }

    #[test]
    fn ratio_mode_labels_head() {
        let stats: Vec<_> = (0..10).map(|u| stat(u, (10 - u) as f64, 3)).collect();
        let idx = partition_sequences(&stats, 0.6, PartitionMode::Ratio).unwrap();
        assert_eq!(idx.num_uniform(), 6);
        // lowest variance belongs to user 9
        assert_eq!(idx.get(9).unwrap().rank, 1);
        assert!(idx.get(4).unwrap().uniform);
        assert!(!idx.get(3).unwrap().uniform);
        assert_eq!((idx.v_min, idx.v_max), (1.0, 10.0));
    }

    #[test]
    fn equal_variances_tie_break_by_id() {
        let stats: Vec<_> = [3, 1, 0, 2].iter().map(|&u| stat(u, 4.0, 2)).collect();
        let idx = partition_sequences(&stats, 0.5, PartitionMode::Ratio).unwrap();
        let uniform: Vec<usize> = idx.users.iter().filter(|l| l.uniform).map(|l| l.user).collect();
        assert_eq!(uniform, vec![0, 1]);
    }

    #[test]
    fn balanced_mode_halves_interactions() {
        let stats = vec![stat(0, 1.0, 5), stat(1, 2.0, 5), stat(2, 3.0, 10)];
        let idx = partition_sequences(&stats, 0.5, PartitionMode::Balanced).unwrap();
        let uniform: Vec<usize> = idx.users.iter().filter(|l| l.uniform).map(|l| l.user).collect();
        assert_eq!(uniform, vec![0, 1]);
    }

    #[test]
    fn items_by_count_then_id() {
        let idx = partition_items(&[10, 5, 1], 0.67).unwrap();
        assert!(idx.is_frequent(1) && idx.is_frequent(2) && !idx.is_frequent(3));
        assert_eq!((idx.f_max, idx.f_min), (10, 5));
        let idx = partition_items(&[4, 4, 4, 4], 0.5).unwrap();
        let frequent: Vec<usize> = idx.items.iter().filter(|l| l.frequent).map(|l| l.item).collect();
        assert_eq!(frequent, vec![1, 2]);
        let idx = partition_items(&vec![1; 100], 0.7).unwrap();
        assert_eq!(idx.num_frequent(), 70);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(partition_sequences(&[stat(0, 1.0, 1)], 0.5, PartitionMode::Ratio).is_err());
        assert!(partition_items(&[1], 0.5).is_err());
        assert!(partition_items(&[1, 2], 1.0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let users = partition_sequences(&[stat(0, 1.5, 3), stat(1, 0.5, 4)], 0.5, PartitionMode::Ratio).unwrap();
        let items = partition_items(&[3, 0, 2], 0.6).unwrap();
        let p = Partition { users, items };
        let back = Partition::from_json(p.to_json()).unwrap();
        assert_eq!(back, p);
        assert!(p.to_json()["extremes"]["V_max"].is_number());
    }
}
