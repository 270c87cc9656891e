//! Tensor Train and Tensor Ring embedding layers.
//!
//! An embedding table `E` of shape `vocab x dim` is stored as a chain of
//! small four-way cores. Row `i` and column `j` are split into mixed-radix
//! digits and the entry `E[i, j]` is the product of the matching core
//! slices. The crate covers the dense substrate, factorization planning,
//! the TT and TR formats, trainable layers, diagnostics, a small training
//! harness and the binary file formats.

pub mod analysis;
pub mod embedding;
pub mod error;
pub mod index;
pub mod io;
pub mod plan;
pub mod ring;
pub mod tensor;
pub mod train;
pub mod tt;

pub use analysis::{check_full_rank, compression_table, init_statistics, InitReport, InitScheme, RankReport, TableRow};
pub use embedding::{gradient_check, probe_batch, EmbeddingLayer, GradCheck, GradientBuffer, LowRankEmbedding, TtEmbedding, Weights};
pub use error::{Error, FormatError, IoError, Result};
pub use index::MixedRadix;
pub use plan::{factorize_balanced, plan_embedding, FactorizationPlan, RankSpec};
pub use ring::TrMatrix;
pub use tensor::{matmul, numerical_rank, svd, DenseMatrix, DenseTensor, SvdResult};
pub use io::{load_dmat, load_tt, save_dmat, save_tt};
pub use train::{LayerKind, Task, TrainConfig, TrainTrace};
pub use tt::{glorot_tt, random_tt, tt_svd, CompressionStats, CoreChain, TtCore, TtMatrix};
