mod common;

use proptest::prelude::*;
use ufrec::partition::{
    balanced_prefix, head_count, interval_variance, partition_items, partition_sequences, PartitionMode, SequenceStat,
};

fn stats_for(seqs: &[Vec<i64>], scale: i64) -> Vec<SequenceStat> {
    seqs.iter()
        .enumerate()
        .map(|(u, ts)| {
            let scaled: Vec<i64> = ts.iter().map(|t| t * scale).collect();
            SequenceStat {
                user: u,
                variance: interval_variance(&scaled),
                interactions: ts.len(),
            }
        })
        .collect()
}

fn timelines() -> impl Strategy<Value = Vec<Vec<i64>>> {
    prop::collection::vec(
        prop::collection::vec(0..5_000i64, 2..15).prop_map(|gaps| {
            let mut t = 0;
            gaps.into_iter()
                .map(|g| {
                    t += g;
                    t
                })
                .collect()
        }),
        2..40,
    )
}

proptest! {
    #[test]
    fn variance_matches_definition(ts in prop::collection::vec(0..100_000i64, 0..30)) {
        let mut ts = ts;
        ts.sort_unstable();
        let got = interval_variance(&ts);
        let want = common::variance_oracle(&ts);
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0));
    }

    #[test]
    fn labels_survive_timestamp_rescaling(seqs in timelines(), scale in 2..500i64, ratio in 0.1..0.9f64) {
        for mode in [PartitionMode::Ratio, PartitionMode::Balanced] {
            let a = partition_sequences(&stats_for(&seqs, 1), ratio, mode).unwrap();
            let b = partition_sequences(&stats_for(&seqs, scale), ratio, mode).unwrap();
            let la: Vec<_> = a.users.iter().map(|l| (l.user, l.rank, l.uniform)).collect();
            let lb: Vec<_> = b.users.iter().map(|l| (l.user, l.rank, l.uniform)).collect();
            prop_assert_eq!(la, lb);
        }
    }

    #[test]
    fn ratio_mode_labels_the_low_variance_head(seqs in timelines(), ratio in 0.05..0.95f64) {
        let stats = stats_for(&seqs, 1);
        let idx = partition_sequences(&stats, ratio, PartitionMode::Ratio).unwrap();
        prop_assert_eq!(idx.users.len(), seqs.len());
        prop_assert_eq!(idx.num_uniform(), head_count(ratio, seqs.len()));
        let mut ranks: Vec<usize> = idx.users.iter().map(|l| l.rank).collect();
        ranks.sort_unstable();
        prop_assert_eq!(ranks, (1..=seqs.len()).collect::<Vec<_>>());
        let max_uniform = idx.users.iter().filter(|l| l.uniform).map(|l| l.variance).fold(f64::MIN, f64::max);
        let min_other = idx.users.iter().filter(|l| !l.uniform).map(|l| l.variance).fold(f64::MAX, f64::min);
        prop_assert!(max_uniform <= min_other);
        prop_assert!(idx.users.iter().all(|l| l.uniform == (l.rank <= idx.num_uniform())));
    }

    #[test]
    fn balanced_prefix_matches_exhaustive(counts in prop::collection::vec(1..50usize, 2..200)) {
        prop_assert_eq!(balanced_prefix(&counts), common::balanced_oracle(&counts));
    }

    #[test]
    fn item_labels_take_the_frequent_head(counts in prop::collection::vec(0..30usize, 2..80), ratio in 0.05..0.95f64) {
        let idx = partition_items(&counts, ratio).unwrap();
        let take = head_count(ratio, counts.len());
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        for (pos, &k) in order.iter().enumerate() {
            prop_assert_eq!(idx.items[k].frequent, pos < take);
            prop_assert_eq!(idx.items[k].rank, pos + 1);
        }
        let total: usize = idx.items.iter().map(|l| l.count).sum();
        prop_assert_eq!(total, counts.iter().sum::<usize>());
    }
}

#[test]
fn worked_examples() {
    assert_eq!(interval_variance(&[0, 10, 20, 30]), 0.0);
    assert_eq!(interval_variance(&[0, 10, 30]), 25.0);
    assert_eq!(head_count(0.6, 10), 6);
    let idx = partition_items(&[10, 5, 1], 0.67).unwrap();
    assert_eq!(idx.items.iter().map(|l| l.frequent).collect::<Vec<_>>(), vec![true, true, false]);
    assert_eq!(balanced_prefix(&[5, 5, 10]), 2);
}
