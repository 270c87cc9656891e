use proptest::prelude::*;

use ttemb_core::io::{decode_dmat, encode_dmat};
use ttemb_core::ring::random_tr;
use ttemb_core::{
    factorize_balanced, plan_embedding, random_tt, tt_svd, DenseMatrix, EmbeddingLayer, FactorizationPlan,
    LowRankEmbedding, TtEmbedding, TrMatrix,
};

fn plan_strategy() -> impl Strategy<Value = FactorizationPlan> {
    (1usize..=3)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(1usize..=4, n),
                prop::collection::vec(1usize..=4, n),
                prop::collection::vec(1usize..=3, n - 1),
            )
        })
        .prop_map(|(r, c, k)| FactorizationPlan::square_vocab(r, c, k).unwrap())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn layers(plan: &FactorizationPlan, seed: u64) -> Vec<Box<dyn EmbeddingLayer>> {
    vec![
        Box::new(TtEmbedding::new(random_tt(plan, 1.0, seed).unwrap())),
        Box::new(TtEmbedding::new(random_tr(plan, 2, 1.0, seed).unwrap())),
        Box::new(LowRankEmbedding::random(plan.padded_rows(), plan.cols(), 2, 1.0, seed).unwrap()),
    ]
}

fn upstream(rows: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|b| {
            (0..dim)
                .map(|j| (((b * 31 + j * 17) as u64 ^ seed) % 97) as f64 / 48.5 - 1.0)
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lookups_agree_with_materialize(plan in plan_strategy(), seed in any::<u64>()) {
        let m = random_tt(&plan, 1.0, seed).unwrap();
        let dense = m.materialize().unwrap();
        for i in 0..plan.padded_rows() {
            let row = m.row(i).unwrap();
            for j in 0..plan.cols() {
                prop_assert_eq!(row[j], dense.get(i, j));
                prop_assert!(close(m.element(i, j).unwrap(), row[j], 1e-12));
            }
        }
    }

    #[test]
    fn ring_trace_is_shift_invariant(plan in plan_strategy(), seed in any::<u64>(), s in 0usize..4) {
        let m = random_tr(&plan, 2, 1.0, seed).unwrap();
        let shifted = m.circular_shift(s).unwrap();
        let a: f64 = m.materialize().unwrap().data().iter().sum();
        let b: f64 = shifted.materialize().unwrap().data().iter().sum();
        prop_assert!(close(a, b, 1e-10));
        prop_assert_eq!(shifted.stats().tt_params, m.stats().tt_params);
    }

    #[test]
    fn backward_is_linear_in_upstream(plan in plan_strategy(), seed in any::<u64>(), alpha in -2.0f64..2.0) {
        for layer in layers(&plan, seed) {
            let idx: Vec<usize> = (0..5).map(|k| (k * 7 + seed as usize % 5) % layer.vocab()).collect();
            let u1 = upstream(idx.len(), layer.dim(), seed);
            let u2 = upstream(idx.len(), layer.dim(), seed.wrapping_add(1));
            let mix: Vec<Vec<f64>> = u1.iter().zip(&u2)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| alpha * x + y).collect())
                .collect();
            let g1 = layer.backward(&idx, &u1).unwrap();
            let g2 = layer.backward(&idx, &u2).unwrap();
            let gm = layer.backward(&idx, &mix).unwrap();
            for ((a, b), m) in g1.iter().zip(g2.iter()).zip(gm.iter()) {
                prop_assert!(close(alpha * a + b, m, 1e-10));
            }
        }
    }

    #[test]
    fn batch_gradients_add(plan in plan_strategy(), seed in any::<u64>(), split in 0usize..7) {
        for layer in layers(&plan, seed) {
            let idx: Vec<usize> = (0..7).map(|k| (k * 3 + 1) % layer.vocab()).collect();
            let up = upstream(idx.len(), layer.dim(), seed);
            let whole = layer.backward(&idx, &up).unwrap();
            let mut parts = layer.backward(&idx[..split], &up[..split]).unwrap();
            parts.merge(&layer.backward(&idx[split..], &up[split..]).unwrap()).unwrap();
            prop_assert_eq!(parts.count(), whole.count());
            for (a, b) in parts.iter().zip(whole.iter()) {
                prop_assert!(close(a, b, 1e-12));
            }
            let par = layer.backward_parallel(&idx, &up, 3).unwrap();
            for (a, b) in par.iter().zip(whole.iter()) {
                prop_assert!(close(a, b, 1e-12));
            }
        }
    }

    #[test]
    fn tt_svd_recovers_true_ranks(plan in plan_strategy(), seed in any::<u64>()) {
        let m = random_tt(&plan, 1.0, seed).unwrap().materialize().unwrap();
        let back = tt_svd(&m, &plan).unwrap();
        prop_assert!(back.plan().ranks().iter().zip(plan.ranks()).all(|(a, b)| a <= b));
        let err = back.materialize().unwrap().relative_error(&m).unwrap();
        prop_assert!(err < 1e-10, "relative error {}", err);
    }

    #[test]
    fn planner_covers_vocab(vocab in 1usize..5000, n in 1usize..=4) {
        let f = factorize_balanced(vocab, n, true).unwrap();
        let p: usize = f.iter().product();
        prop_assert!(p >= vocab);
        prop_assert!(f.windows(2).all(|w| w[0] <= w[1]));
        if p > vocab + vocab / 5 {
            // only when nothing in the slack range factors
            for s in vocab..=vocab + vocab / 5 {
                prop_assert!(factorize_balanced(s, n, false).is_err());
            }
        }
        let plan = plan_embedding(vocab, 16, n, 2).unwrap();
        prop_assert_eq!(plan.vocab(), vocab);
        prop_assert_eq!(plan.padded_rows(), p);
    }

    #[test]
    fn dmat_roundtrip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let m = DenseMatrix::from_fn(rows, cols, |i, j| ((seed ^ (i * 7 + j) as u64) as f64).sin()).unwrap();
        let bytes = encode_dmat(&m);
        prop_assert_eq!(bytes.len(), 21 + rows * cols * 8);
        prop_assert_eq!(decode_dmat(&bytes).unwrap(), m);
    }
}

#[test]
fn ring_with_closure_one_is_tt() {
    let plan = FactorizationPlan::square_vocab(vec![2, 3, 2], vec![2, 2, 3], vec![3, 2]).unwrap();
    let tt = random_tt(&plan, 1.0, 5).unwrap();
    let tr = TrMatrix::from(tt.clone());
    assert_eq!(tr.materialize().unwrap(), tt.materialize().unwrap());
    let a = TtEmbedding::new(tt);
    let b = TtEmbedding::new(tr);
    let up = upstream(3, 12, 1);
    assert_eq!(
        a.backward(&[1, 5, 1], &up).unwrap(),
        b.backward(&[1, 5, 1], &up).unwrap()
    );
}
