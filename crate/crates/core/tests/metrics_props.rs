mod common;

use proptest::prelude::*;
use ufrec::config::EvalMode;
use ufrec::data::Target;
use ufrec::eval::{evaluate, pessimistic_rank, rank_metrics, EvalOptions, RandomScorer};
use ufrec::model::{init_store, Model, ModelConfig, Routing};

proptest! {
    #[test]
    fn ranks_match_full_sort(
        positive in 0..6i32,
        negatives in prop::collection::vec(0..6i32, 0..150),
        k in 1..30usize,
    ) {
        // Small integer scores make ties common.
        let pos = positive as f64;
        let neg: Vec<f64> = negatives.iter().map(|&s| s as f64).collect();
        let rank = pessimistic_rank(pos, &neg);
        prop_assert_eq!(rank, common::sorted_rank(pos, &neg));
        prop_assert_eq!(rank_metrics(Some(rank), k), common::metrics_oracle(rank, k));
    }

    #[test]
    fn scores_follow_candidate_permutation(seed in 0..500u64, perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let config = ModelConfig { num_items: 15, dim: 4, max_len: 5, heads: 2, num_blocks: 1, layer_norm: false, calendar_weekday: true };
        let model = Model { store: init_store(&config, seed).unwrap(), config, routing: Routing::default() };
        let enc = model.encode_user(0, &[3, 4, 5], &[0, 86_400, 172_800], 259_200).unwrap();
        let cands: Vec<usize> = (1..=15).collect();
        let base = model.score(&enc, &cands).unwrap();
        let mut shuffled = cands.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let permuted = model.score(&enc, &shuffled).unwrap();
        for (c, s) in shuffled.iter().zip(&permuted) {
            prop_assert_eq!(s.to_bits(), base[c - 1].to_bits());
        }
    }
}

#[test]
fn sampled_metrics_are_seed_deterministic() {
    let cfg = common::desk_config(1);
    let (data, labels) = common::desk_data(1, &cfg);
    let opts = EvalOptions::sampled(&[10, 20], 100, 77, Target::Test);
    let a = evaluate(&RandomScorer { seed: 5 }, &data, &labels, &opts).unwrap();
    let b = evaluate(&RandomScorer { seed: 5 }, &data, &labels, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mode, EvalMode::Sampled);
    for s in a.scopes.values() {
        for k in [10, 20] {
            let (n, h) = (s.metrics[&format!("NDCG@{k}")], s.metrics[&format!("HR@{k}")]);
            assert!((0.0..=1.0).contains(&n) && (0.0..=1.0).contains(&h) && h >= n);
        }
    }
}
