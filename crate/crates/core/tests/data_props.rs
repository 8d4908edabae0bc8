mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ufrec::data::{
    build_sequences, k_core_filter, pad_truncate, sample_negatives, split_leave_one_out, RawInteraction, SplitDataset,
    SplitOrder, Target, PAD,
};

fn rows_strategy(max_rows: usize) -> impl Strategy<Value = Vec<RawInteraction>> {
    prop::collection::vec((0..12usize, 0..15usize, 0..1_000i64), 1..=max_rows).prop_map(|v| {
        v.into_iter()
            .map(|(u, i, t)| RawInteraction::new(format!("u{u}"), format!("i{i}"), t))
            .collect()
    })
}

proptest! {
    #[test]
    fn k_core_matches_fixpoint_oracle(rows in rows_strategy(200), ku in 1..6usize, ki in 1..6usize) {
        prop_assert_eq!(k_core_filter(&rows, ku, ki), common::kcore_oracle(&rows, ku, ki));
    }

    #[test]
    fn sequences_are_time_ordered(rows in rows_strategy(120)) {
        let seqs = build_sequences(&rows).unwrap();
        let total: usize = seqs.sequences.iter().map(|s| s.items.len()).sum();
        prop_assert_eq!(total, rows.len());
        for s in &seqs.sequences {
            prop_assert!(s.timestamps.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(s.items.iter().all(|&i| i >= 1 && i <= seqs.num_items()));
        }
    }

    #[test]
    fn padding_keeps_most_recent(len in 0..40usize, n in 1..30usize) {
        let items: Vec<usize> = (1..=len).collect();
        let ts: Vec<i64> = (0..len as i64).collect();
        let p = pad_truncate(&items, &ts, n);
        prop_assert_eq!(p.len(), n);
        prop_assert_eq!(p.valid_count(), len.min(n));
        let keep = len.min(n);
        prop_assert_eq!(&p.items[n - keep..], &items[len - keep..]);
        prop_assert!(p.items[..n - keep].iter().all(|&i| i == PAD));
        prop_assert!(p.mask.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn negatives_avoid_history(
        history in prop::collection::hash_set(1..60usize, 0..40),
        n in 1..15usize,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match sample_negatives(0, &history, 60, n, &mut rng) {
            Ok(neg) => {
                prop_assert_eq!(neg.len(), n);
                let distinct: HashSet<_> = neg.iter().copied().collect();
                prop_assert_eq!(distinct.len(), n);
                prop_assert!(neg.iter().all(|i| !history.contains(i) && (1..=60).contains(i)));
                let mut again = ChaCha8Rng::seed_from_u64(seed);
                prop_assert_eq!(sample_negatives(0, &history, 60, n, &mut again).unwrap(), neg);
            }
            Err(_) => prop_assert!(60 - history.len() < n),
        }
    }

    #[test]
    fn split_holds_out_two_and_round_trips(rows in rows_strategy(150)) {
        let seqs = build_sequences(&rows).unwrap();
        for order in [SplitOrder::ValidLast, SplitOrder::Conventional] {
            let data = split_leave_one_out(&seqs.sequences, seqs.num_items(), order);
            for u in &data.users {
                let s = &seqs.sequences[u.user];
                let n = s.items.len();
                prop_assert_eq!(u.train.len() + 2, n);
                let (test, valid) = (u.holdout(Target::Test), u.holdout(Target::Valid));
                match order {
                    SplitOrder::ValidLast => prop_assert_eq!((test.item, valid.item), (s.items[n - 2], s.items[n - 1])),
                    SplitOrder::Conventional => prop_assert_eq!((test.item, valid.item), (s.items[n - 1], s.items[n - 2])),
                }
            }
            let back = SplitDataset::from_manifest_json(data.to_manifest_json(), data.num_items, order).unwrap();
            prop_assert_eq!(back, data);
        }
    }
}

#[test]
fn forced_negative_choice() {
    let history: HashSet<usize> = (1..=9).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(sample_negatives(0, &history, 10, 1, &mut rng).unwrap(), vec![10]);
}
