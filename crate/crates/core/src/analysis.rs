//! Diagnostics: full-rank checks, initialization statistics and
//! compression tables.

use rayon::prelude::*;

use crate::embedding::{EmbeddingLayer, LowRankEmbedding};
use crate::error::{Error, Result};
use crate::plan::{plan_embedding, FactorizationPlan, RankSpec};
use crate::tensor::{numerical_rank, DenseMatrix};
use crate::tt::{glorot_tt_with_sigma, random_tt, TtMatrix};

/// Largest side of a matrix handed to a rank check.
pub const RANK_CHECK_MAX_DIM: usize = 4096;

/// What a [`RankReport`] was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankSource {
    /// The Kronecker-delta core construction.
    Witness,
    /// `random_tt(plan, 1.0, seed)`.
    Random { seed: u64 },
    /// A `U V^T` baseline with inner dimension `d`.
    LowRank { d: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub source: RankSource,
    pub row_factors: Vec<usize>,
    pub col_factors: Vec<usize>,
    pub ranks: Vec<usize>,
    pub parameters: u64,
    pub rows: usize,
    pub cols: usize,
    pub numerical_rank: usize,
    pub min_dim: usize,
    pub full_rank: bool,
    pub tol: f64,
}

impl RankReport {
    fn new(
        source: RankSource,
        plan: Option<&FactorizationPlan>,
        parameters: u64,
        m: &DenseMatrix,
        tol: f64,
    ) -> Result<Self> {
        let rank = numerical_rank(m, tol)?;
        let min_dim = m.rows().min(m.cols());
        Ok(Self {
            source,
            row_factors: plan.map(|p| p.row_factors().to_vec()).unwrap_or_else(|| vec![m.rows()]),
            col_factors: plan.map(|p| p.col_factors().to_vec()).unwrap_or_else(|| vec![m.cols()]),
            ranks: plan.map(|p| p.ranks().to_vec()).unwrap_or_default(),
            parameters,
            rows: m.rows(),
            cols: m.cols(),
            numerical_rank: rank,
            min_dim,
            full_rank: rank == min_dim,
            tol,
        })
    }
}

fn check_rank_dims(rows: usize, cols: usize) -> Result<()> {
    let side = rows.max(cols);
    if side > RANK_CHECK_MAX_DIM {
        return Err(Error::CapExceeded {
            requested: side,
            cap: RANK_CHECK_MAX_DIM,
        });
    }
    Ok(())
}

/// Numerical rank of the delta witness (first report) and of
/// `random_tt(plan, 1.0, seed)` for each seed, in seed order.
pub fn check_full_rank(plan: &FactorizationPlan, seeds: &[u64], tol: f64) -> Result<Vec<RankReport>> {
    check_rank_dims(plan.padded_rows(), plan.cols())?;
    let witness = TtMatrix::kronecker_delta(plan)?;
    let mut reports = vec![RankReport::new(
        RankSource::Witness,
        Some(plan),
        witness.stats().tt_params,
        &witness.materialize()?,
        tol,
    )?];
    let random: Vec<Result<RankReport>> = seeds
        .par_iter()
        .map(|&seed| {
            let m = random_tt(plan, 1.0, seed)?;
            RankReport::new(RankSource::Random { seed }, Some(plan), m.stats().tt_params, &m.materialize()?, tol)
        })
        .collect();
    for r in random {
        reports.push(r?);
    }
    Ok(reports)
}

/// Rank of a random `vocab x dim` low-rank baseline with inner dimension `d`.
pub fn lowrank_rank_report(vocab: usize, dim: usize, d: usize, seed: u64, tol: f64) -> Result<RankReport> {
    check_rank_dims(vocab, dim)?;
    let layer = LowRankEmbedding::random(vocab, dim, d, 1.0, seed)?;
    RankReport::new(
        RankSource::LowRank { d, seed },
        None,
        layer.num_params(),
        &layer.materialize()?,
        tol,
    )
}

/// How cores are drawn for [`init_statistics`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Calibrated so entries have standard deviation `sigma`.
    Glorot { sigma: f64 },
    /// Every core entry `Normal(0, std^2)`, no calibration.
    Normal { std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitReport {
    pub ranks: Vec<usize>,
    pub draws: usize,
    pub samples: u64,
    /// Entry variance the scheme aims for (`prod R_k * std^(2N)` for the
    /// uncalibrated scheme).
    pub target_variance: f64,
    pub mean: f64,
    pub variance: f64,
    pub excess_kurtosis: f64,
}

/// Power sums `(n, sum x, sum x^2, sum x^3, sum x^4)`.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: u64,
    s: [f64; 4],
}

impl Moments {
    fn of(data: &[f64]) -> Self {
        let mut m = Self::default();
        for &x in data {
            let x2 = x * x;
            m.s[0] += x;
            m.s[1] += x2;
            m.s[2] += x2 * x;
            m.s[3] += x2 * x2;
        }
        m.n = data.len() as u64;
        m
    }

    fn merge(&mut self, o: &Self) {
        self.n += o.n;
        for k in 0..4 {
            self.s[k] += o.s[k];
        }
    }

    /// Population mean, variance and excess kurtosis.
    fn summary(&self) -> (f64, f64, f64) {
        let n = self.n as f64;
        let mean = self.s[0] / n;
        let e2 = self.s[1] / n;
        let e3 = self.s[2] / n;
        let e4 = self.s[3] / n;
        let var = (e2 - mean * mean).max(0.0);
        let m4 = e4 - 4.0 * mean * e3 + 6.0 * mean * mean * e2 - 3.0 * mean.powi(4);
        let kurt = if var > 0.0 { m4 / (var * var) - 3.0 } else { f64::NAN };
        (mean, var, kurt)
    }
}

/// Pools materialized entries over `draws` seeded initializations (seeds
/// `base_seed..base_seed + draws`) for each uniform rank in `ladder`.
pub fn init_statistics(
    plan: &FactorizationPlan,
    ladder: &[usize],
    draws: usize,
    scheme: InitScheme,
    base_seed: u64,
) -> Result<Vec<InitReport>> {
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be >= 1".into()));
    }
    ladder
        .iter()
        .map(|&r| {
            let p = plan.with_ranks(RankSpec::Uniform(r).resolve(plan.n())?)?;
            let parts: Vec<Result<Moments>> = (0..draws as u64)
                .into_par_iter()
                .map(|d| {
                    let seed = base_seed.wrapping_add(d);
                    let m = match scheme {
                        InitScheme::Glorot { sigma } => glorot_tt_with_sigma(&p, sigma, seed)?,
                        InitScheme::Normal { std } => random_tt(&p, std, seed)?,
                    };
                    Ok(Moments::of(m.materialize()?.data()))
                })
                .collect();
            let mut total = Moments::default();
            for part in parts {
                total.merge(&part?);
            }
            let (mean, variance, excess_kurtosis) = total.summary();
            let target_variance = match scheme {
                InitScheme::Glorot { sigma } => sigma * sigma,
                InitScheme::Normal { std } => {
                    p.ranks().iter().map(|&r| r as f64).product::<f64>() * std.powi(2 * p.n() as i32)
                }
            };
            Ok(InitReport {
                ranks: p.ranks().to_vec(),
                draws,
                samples: total.n,
                target_variance,
                mean,
                variance,
                excess_kurtosis,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub rank: usize,
    pub tt_params: u64,
    pub dense_params: u64,
    pub ratio: f64,
    pub tied_ratio: f64,
    /// Inner dimension of a `U V^T` baseline with at most `tt_params`
    /// parameters.
    pub lowrank_d: u64,
    /// Largest rank that baseline can reach.
    pub lowrank_max_rank: u64,
    /// Largest rank the TT matrix can reach, `min(I~, J)`.
    pub tt_max_rank: u64,
}

/// Parameter counts along a uniform rank ladder for the balanced plan of a
/// `vocab x dim` table.
pub fn compression_table(vocab: usize, dim: usize, n: usize, ladder: &[usize]) -> Result<Vec<TableRow>> {
    ladder
        .iter()
        .map(|&r| {
            let plan = plan_embedding(vocab, dim, n, r)?;
            let rows = plan.padded_rows() as u64;
            let cols = plan.cols() as u64;
            let tt = plan.tt_params(1);
            let dense = rows * cols;
            let d = tt / (rows + cols);
            let stats = crate::tt::CompressionStats::new(tt, dense);
            Ok(TableRow {
                rank: r,
                tt_params: tt,
                dense_params: dense,
                ratio: stats.ratio,
                tied_ratio: stats.tied_ratio,
                lowrank_d: d,
                lowrank_max_rank: d.min(rows.min(cols)),
                tt_max_rank: rows.min(cols),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(rows: &[usize], cols: &[usize], ranks: &[usize]) -> FactorizationPlan {
        FactorizationPlan::square_vocab(rows.to_vec(), cols.to_vec(), ranks.to_vec()).unwrap()
    }

    #[test]
    fn witness_and_random_are_full_rank() {
        let p = plan(&[4, 4, 4], &[4, 4, 4], &[2, 2]);
        let reports = check_full_rank(&p, &[0, 1, 2, 3, 4], 1e-9).unwrap();
        assert_eq!(reports.len(), 6);
        assert_eq!(reports[0].source, RankSource::Witness);
        for r in &reports {
            assert!(r.full_rank, "{r:?}");
            assert_eq!(r.numerical_rank, 64);
        }
        assert_eq!(reports[3].source, RankSource::Random { seed: 2 });
        assert_eq!(reports[1].parameters, 2 * 16 + 4 * 16 + 2 * 16);
    }

    #[test]
    fn lowrank_contrast() {
        let r = lowrank_rank_report(64, 64, 1, 3, 1e-9).unwrap();
        assert_eq!(r.numerical_rank, 1);
        assert!(!r.full_rank);
        assert_eq!(r.parameters, 128);
    }

    #[test]
    fn rank_check_cap() {
        let p = plan(&[64, 65], &[2, 2], &[1]);
        assert!(matches!(check_full_rank(&p, &[0], 1e-9), Err(Error::CapExceeded { .. })));
    }

    #[test]
    fn moments_of_known_sample() {
        let m = Moments::of(&[1.0, -1.0, 1.0, -1.0]);
        let (mean, var, kurt) = m.summary();
        assert_eq!((mean, var, kurt), (0.0, 1.0, -2.0));
        let mut a = Moments::of(&[1.0, 2.0]);
        a.merge(&Moments::of(&[3.0]));
        let b = Moments::of(&[1.0, 2.0, 3.0]);
        assert_eq!(a.summary(), b.summary());
    }

    #[test]
    fn dense_case_is_plain_normal() {
        let p = plan(&[1000], &[1000], &[]);
        let r = &init_statistics(&p, &[1], 1, InitScheme::Glorot { sigma: 1.0 }, 5).unwrap()[0];
        assert_eq!(r.samples, 1_000_000);
        assert!((r.variance - 1.0).abs() < 0.02, "{r:?}");
        assert!(r.excess_kurtosis.abs() < 0.05, "{r:?}");
    }

    #[test]
    fn uncalibrated_variance_is_rank_product() {
        let p = plan(&[3, 3, 3, 3], &[3, 3, 3, 3], &[4, 4, 4]);
        let r = &init_statistics(&p, &[4], 32, InitScheme::Normal { std: 1.0 }, 0).unwrap()[0];
        assert_eq!(r.target_variance, 64.0);
        assert!((r.variance / 64.0 - 1.0).abs() < 0.15, "{r:?}");
        assert!(init_statistics(&p, &[4], 0, InitScheme::Normal { std: 1.0 }, 0).is_err());
    }

    #[test]
    fn table_rows() {
        let t = compression_table(512, 512, 3, &[1, 16]).unwrap();
        assert_eq!(t[0].tt_params, 3 * 64);
        assert_eq!(t[1].tt_params, 18432);
        assert_eq!(t[1].dense_params, 262144);
        assert_eq!(t[1].lowrank_d, 18);
        assert_eq!(t[1].lowrank_max_rank, 18);
        assert_eq!(t[1].tt_max_rank, 512);
        assert!((t[1].ratio - 262144.0 / 18432.0).abs() < 1e-12);
        let dense = compression_table(10, 7, 1, &[1]).unwrap();
        assert_eq!((dense[0].ratio, dense[0].tied_ratio), (1.0, 0.5));
        assert!(compression_table(512, 7, 3, &[1]).is_err());
    }
}
