use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ufrec_tensor::{adam_step, finite_diff_check, Graph, ParameterStore, Tensor};

fn store_with(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParameterStore::new();
    for (name, shape) in shapes {
        s.insert(name, Tensor::uniform(shape.clone(), 1.0, &mut rng), true).unwrap();
    }
    s
}

#[test]
fn every_op_matches_central_differences() {
    let mut s = store_with(
        &[
            ("x", vec![4, 6]),
            ("w", vec![6, 6]),
            ("b", vec![1, 6]),
            ("g", vec![1, 6]),
            ("table", vec![7, 3]),
            ("time", vec![4, 3]),
            ("mix", vec![1, 2]),
        ],
        3,
    );
    s.freeze_row(s.id("table").unwrap(), 0).unwrap();
    let mask: Vec<bool> = (0..16).map(|i| i % 4 <= i / 4).collect();
    let report = finite_diff_check(
        &s,
        |g| {
            let x = g.param_by_name("x")?;
            let w = g.param_by_name("w")?;
            let b = g.param_by_name("b")?;
            let gain = g.param_by_name("g")?;
            let table = g.param_by_name("table")?;
            let time = g.param_by_name("time")?;
            let mix = g.param_by_name("mix")?;

            let h = g.matmul(x, w)?;
            let h = g.add_row(h, b)?;
            let h = g.layer_norm(h, 1e-6)?;
            let h = g.mul_row(h, gain)?;
            let left = g.slice_cols(h, 0, 3)?;
            let right = g.slice_cols(h, 3, 6)?;
            let scores = g.matmul_nt(left, right)?;
            let att = g.softmax(scores, Some(&mask))?;
            let p = g.softmax(mix, None)?;
            let a1 = g.scale_by_elem(att, p, 0)?;
            let flat = g.softmax(scores, None)?;
            let a2 = g.scale_by_elem(flat, p, 1)?;
            let a = g.add(a1, a2)?;
            let v = g.matmul(a, h)?;
            let v = g.relu(v);
            let v = g.scale_rows(v, &[1.0, 0.0, 0.5, 1.0])?;
            let q = g.concat_cols(&[v, x])?;
            let q = g.slice_cols(q, 0, 6)?;
            let q = g.sub(q, x)?;
            let q = g.mul(q, q)?;
            let logits = g.candidate_logits(q, table, time, &[1, 2, 3, 4, 5, 6, 1, 1, 2, 0, 3, 3], 3)?;
            let ce = g.cross_entropy(logits, &[0, 1, 2, 0])?;
            let rows = g.gather_rows(table, &[1, 4, 4])?;
            let sq = g.sum_sq(rows);
            let other = g.gather_rows(table, &[2, 3, 5])?;
            let m = g.mse(rows, other)?;
            let s1 = g.add(ce, sq)?;
            let s1 = g.add(s1, m)?;
            let tot = g.sum(v);
            let tot = g.scale(tot, 0.1);
            g.add(s1, tot)
        },
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn adam_runs_are_bitwise_deterministic() {
    let run = || {
        let mut s = store_with(&[("w", vec![3, 3]), ("v", vec![3, 1])], 11);
        for _ in 0..25 {
            let grads = {
                let mut g = Graph::new(&s);
                let w = g.param_by_name("w").unwrap();
                let v = g.param_by_name("v").unwrap();
                let y = g.matmul(w, v).unwrap();
                let y = g.relu(y);
                let l = g.sum_sq(y);
                g.backward(l).unwrap()
            };
            s.accumulate(&grads);
            adam_step(&mut s, 0.01);
        }
        s
    };
    assert!(run().bit_identical(&run()));
}

proptest! {
    #[test]
    fn masked_softmax_rows_sum_to_one(
        values in proptest::collection::vec(-30.0f64..30.0, 20),
        keep in proptest::collection::vec(any::<bool>(), 20),
    ) {
        let s = ParameterStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::new(vec![4, 5], values).unwrap());
        let y = g.softmax(x, Some(&keep)).unwrap();
        let out = g.value(y);
        for r in 0..4 {
            let row = out.row_slice(r);
            let any = keep[r * 5..(r + 1) * 5].iter().any(|k| *k);
            let total: f64 = row.iter().sum();
            if any {
                prop_assert!((total - 1.0).abs() <= 1e-12);
            } else {
                prop_assert_eq!(total, 0.0);
            }
            for c in 0..5 {
                if !keep[r * 5 + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }
}
