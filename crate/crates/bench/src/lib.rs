//! Shared fixtures for the benchmarks.

use ttemb_core::{random_tt, DenseMatrix, FactorizationPlan, TtEmbedding};

/// `(8,8,8) x (8,8,8)` with uniform rank `rank`: a 512 x 512 table.
pub fn cube_plan(rank: usize) -> FactorizationPlan {
    FactorizationPlan::square_vocab(vec![8, 8, 8], vec![8, 8, 8], vec![rank, rank]).expect("valid plan")
}

pub fn cube_layer(rank: usize) -> TtEmbedding {
    TtEmbedding::new(random_tt(&cube_plan(rank), 1.0, 0).expect("valid plan"))
}

/// Deterministic batch of `len` indices below `vocab` with unit upstream
/// gradients of width `dim`.
pub fn batch(len: usize, vocab: usize, dim: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    let idx = (0..len).map(|k| (k * 7919) % vocab).collect();
    (idx, vec![vec![1.0; dim]; len])
}

/// Smooth `n x n` test matrix with full numerical rank.
pub fn test_matrix(n: usize) -> DenseMatrix {
    DenseMatrix::from_fn(n, n, |i, j| ((i * 13 + j * 7) as f64).sin() + if i == j { 2.0 } else { 0.0 })
        .expect("positive extents")
}
