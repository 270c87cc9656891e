mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use output::{fmt_f64, join, join_f64, Report};
use ttemb_core::analysis::{lowrank_rank_report, InitScheme, RankSource};
use ttemb_core::io::{load_dmat, load_tt, save_dmat, save_tt};
use ttemb_core::ring::glorot_tr_with_sigma;
use ttemb_core::tt::{glorot_tt_with_sigma, glorot_variance, DEFAULT_MATERIALIZE_CAP};
use ttemb_core::{
    check_full_rank, compression_table, factorize_balanced, gradient_check, init_statistics, plan_embedding,
    probe_batch, tt_svd, DenseMatrix, EmbeddingLayer, RankSpec, TrainConfig, TtEmbedding,
};

/// Overrides the largest number of entries `reconstruct` and `compress`
/// will materialize.
const CAP_ENV: &str = "TTEMB_MATERIALIZE_CAP";

#[derive(Parser)]
#[command(name = "ttemb", version, about = "Tensor Train embedding toolkit")]
struct Cli {
    /// Print one `key<TAB>value` pair per line.
    #[arg(long, global = true)]
    porcelain: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shape {
    #[arg(long)]
    vocab: usize,
    #[arg(long)]
    dim: usize,
    /// Number of cores.
    #[arg(long)]
    n: usize,
    /// One rank for every bond, or a comma list with one per bond.
    #[arg(long, value_delimiter = ',', required = true)]
    ranks: Vec<usize>,
}

fn rank_spec(ranks: &[usize]) -> RankSpec {
    match ranks {
        [r] => RankSpec::Uniform(*r),
        _ => RankSpec::PerBond(ranks.to_vec()),
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FileKind {
    Tt,
    Tr,
}

#[derive(Subcommand)]
enum Command {
    /// Balanced factorization of an integer into n factors.
    Factorize {
        #[arg(long)]
        size: usize,
        #[arg(long)]
        n: usize,
        /// Allow rounding `size` up to a nearby product.
        #[arg(long)]
        pad: bool,
    },
    /// Writes a Glorot-initialized TT or TR embedding.
    Init {
        #[command(flatten)]
        shape: Shape,
        #[arg(long, value_enum, default_value = "tt")]
        kind: FileKind,
        /// Ring closure rank; defaults to the first bond rank.
        #[arg(long)]
        closure: Option<usize>,
        /// Target entry standard deviation; defaults to sqrt(2 / (rows + cols)).
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compresses a DMAT matrix into a TT embedding with TT-SVD.
    Compress {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Materializes the served rows of an embedding into a DMAT file.
    Reconstruct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints embedding rows.
    Lookup {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        indices: Vec<usize>,
    },
    /// Shape and parameter counts of an embedding file.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Compares analytic gradients with finite differences.
    Gradcheck {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Numerical rank of random TT matrices and of the delta witness.
    Rankcheck {
        #[command(flatten)]
        shape: Shape,
        /// Number of random draws, seeds `seed..seed + seeds`.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = ttemb_core::tensor::DEFAULT_RANK_TOL)]
        tol: f64,
        /// Also report a low-rank baseline with this inner dimension.
        #[arg(long)]
        lowrank_d: Option<usize>,
    },
    /// Entry statistics of initialized matrices along a rank ladder.
    Initstats {
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        ladder: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        draws: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Draw every core entry from Normal(0, std^2) without calibration.
        #[arg(long)]
        std: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter counts and compression ratios along a rank ladder.
    Table {
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        ladder: Vec<usize>,
    },
    /// Runs a training demo described by a key = value config file.
    TrainDemo {
        #[arg(long)]
        config: PathBuf,
        /// Also print the loss before every step.
        #[arg(long)]
        trace: bool,
    },
}

fn materialize_cap() -> Result<usize> {
    match std::env::var(CAP_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{CAP_ENV}={v:?} is not a count")),
        Err(_) => Ok(DEFAULT_MATERIALIZE_CAP),
    }
}

fn served_rows(emb: &TtEmbedding) -> Result<DenseMatrix> {
    let full = emb.chain().materialize_with_cap(materialize_cap()?)?;
    let cols = full.cols();
    let mut data = full.into_data();
    data.truncate(emb.vocab() * cols);
    Ok(DenseMatrix::new(emb.vocab(), cols, data)?)
}

fn describe(r: &mut Report, emb: &TtEmbedding) {
    let p = emb.chain().plan();
    let s = emb.stats();
    r.field("kind", if emb.weights().is_ring() { "tr" } else { "tt" })
        .field("n", p.n())
        .field("row_factors", join(p.row_factors(), " "))
        .field("col_factors", join(p.col_factors(), " "))
        .field("ranks", join(p.ranks(), " "))
        .field("closure", emb.chain().closure())
        .field("vocab", emb.vocab())
        .field("padded_rows", p.padded_rows())
        .field("cols", p.cols())
        .field("tt_params", s.tt_params)
        .field("dense_params", s.dense_params)
        .float("ratio", s.ratio)
        .float("tied_ratio", s.tied_ratio);
}

/// Runs one subcommand; the returned code is 0 or 2.
fn run(cmd: Command) -> Result<(Report, u8)> {
    let mut r = Report::default();
    let mut code = 0;
    match cmd {
        Command::Factorize { size, n, pad } => {
            let factors = join(&factorize_balanced(size, n, pad)?, " ");
            r.field("factors", &factors).text(factors);
        }
        Command::Init {
            shape,
            kind,
            closure,
            sigma,
            seed,
            out,
        } => {
            let plan = plan_embedding(shape.vocab, shape.dim, shape.n, rank_spec(&shape.ranks))?;
            let sigma = sigma.unwrap_or_else(|| glorot_variance(&plan).sqrt());
            let emb = match kind {
                FileKind::Tt => TtEmbedding::new(glorot_tt_with_sigma(&plan, sigma, seed)?),
                FileKind::Tr => {
                    let closure = closure.or(plan.ranks().first().copied()).unwrap_or(1);
                    TtEmbedding::new(glorot_tr_with_sigma(&plan, closure, sigma, seed)?)
                }
            };
            save_tt(&out, &emb)?;
            describe(&mut r, &emb);
            r.field("checksum", format!("{:016x}", emb.checksum()));
        }
        Command::Compress { input, n, ranks, out } => {
            let m = load_dmat(&input)?;
            let plan = plan_embedding(m.rows(), m.cols(), n, rank_spec(&ranks))?;
            let cap = materialize_cap()?;
            if plan.padded_rows() * plan.cols() > cap {
                bail!(ttemb_core::Error::CapExceeded {
                    requested: plan.padded_rows() * plan.cols(),
                    cap
                });
            }
            let mut padded = m.data().to_vec();
            padded.resize(plan.padded_rows() * plan.cols(), 0.0);
            let padded = DenseMatrix::new(plan.padded_rows(), plan.cols(), padded)?;
            let emb = TtEmbedding::new(tt_svd(&padded, &plan)?);
            save_tt(&out, &emb)?;
            describe(&mut r, &emb);
            r.float("relative_error", served_rows(&emb)?.relative_error(&m)?);
        }
        Command::Reconstruct { input, out } => {
            let emb = load_tt(&input)?;
            let m = served_rows(&emb)?;
            save_dmat(&out, &m)?;
            r.field("rows", m.rows()).field("cols", m.cols());
        }
        Command::Lookup { input, indices } => {
            let emb = load_tt(&input)?;
            let rows = emb.forward(&indices)?;
            let lines: Vec<String> = rows.iter().map(|row| join_f64(row)).collect();
            r.table("row", &["index", "values"]);
            for (k, (i, line)) in indices.iter().zip(&lines).enumerate() {
                r.row(k, vec![i.to_string(), line.clone()]);
            }
            r.text(lines.join("\n"));
        }
        Command::Stats { input } => describe(&mut r, &load_tt(&input)?),
        Command::Gradcheck {
            input,
            seed,
            batch,
            tol,
        } => {
            let mut emb = load_tt(&input)?;
            let (idx, up) = probe_batch(emb.vocab(), emb.dim(), batch, seed);
            let g = gradient_check(&mut emb, &idx, &up)?;
            r.float("max_rel_error", g.max_rel_error)
                .float("max_abs_error", g.max_abs_error)
                .field("checked", g.checked)
                .float("tol", tol)
                .field("passed", g.passes(tol));
            if !g.passes(tol) {
                code = 2;
            }
        }
        Command::Rankcheck {
            shape,
            seeds,
            seed,
            tol,
            lowrank_d,
        } => {
            let plan = plan_embedding(shape.vocab, shape.dim, shape.n, rank_spec(&shape.ranks))?;
            let seed_list: Vec<u64> = (0..seeds).map(|k| seed.wrapping_add(k)).collect();
            let mut reports = check_full_rank(&plan, &seed_list, tol)?;
            if let Some(d) = lowrank_d {
                reports.push(lowrank_rank_report(plan.padded_rows(), plan.cols(), d, seed, tol)?);
            }
            let random: Vec<_> = reports
                .iter()
                .filter(|x| matches!(x.source, RankSource::Random { .. }))
                .collect();
            r.field("row_factors", join(plan.row_factors(), " "))
                .field("col_factors", join(plan.col_factors(), " "))
                .field("ranks", join(plan.ranks(), " "))
                .float("tol", tol)
                .field("min_dim", reports[0].min_dim)
                .field(
                    "random_full_rank",
                    format!("{}/{}", random.iter().filter(|x| x.full_rank).count(), random.len()),
                );
            r.table("check", &["source", "params", "rank", "full_rank"]);
            for (k, x) in reports.iter().enumerate() {
                let source = match x.source {
                    RankSource::Witness => "witness".to_string(),
                    RankSource::Random { seed } => format!("seed {seed}"),
                    RankSource::LowRank { d, .. } => format!("lowrank d={d}"),
                };
                r.row(
                    k,
                    vec![
                        source,
                        x.parameters.to_string(),
                        x.numerical_rank.to_string(),
                        x.full_rank.to_string(),
                    ],
                );
            }
        }
        Command::Initstats {
            vocab,
            dim,
            n,
            ladder,
            draws,
            sigma,
            std,
            seed,
        } => {
            let plan = plan_embedding(vocab, dim, n, 1)?;
            let scheme = match std {
                Some(std) => InitScheme::Normal { std },
                None => InitScheme::Glorot { sigma },
            };
            let reports = init_statistics(&plan, &ladder, draws, scheme, seed)?;
            r.field("row_factors", join(plan.row_factors(), " "))
                .field("col_factors", join(plan.col_factors(), " "))
                .field("draws", draws);
            r.table("rank", &["rank", "samples", "target_var", "mean", "variance", "excess_kurtosis"]);
            for (rank, x) in ladder.iter().zip(&reports) {
                r.row(
                    rank,
                    vec![
                        rank.to_string(),
                        x.samples.to_string(),
                        fmt_f64(x.target_variance),
                        fmt_f64(x.mean),
                        fmt_f64(x.variance),
                        fmt_f64(x.excess_kurtosis),
                    ],
                );
            }
        }
        Command::Table { vocab, dim, n, ladder } => {
            let rows = compression_table(vocab, dim, n, &ladder)?;
            r.table(
                "rank",
                &["rank", "tt_params", "dense_params", "ratio", "tied_ratio", "lowrank_d", "lowrank_max_rank", "tt_max_rank"],
            );
            for x in rows {
                r.row(
                    x.rank,
                    vec![
                        x.rank.to_string(),
                        x.tt_params.to_string(),
                        x.dense_params.to_string(),
                        fmt_f64(x.ratio),
                        fmt_f64(x.tied_ratio),
                        x.lowrank_d.to_string(),
                        x.lowrank_max_rank.to_string(),
                        x.tt_max_rank.to_string(),
                    ],
                );
            }
        }
        Command::TrainDemo { config, trace } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = TrainConfig::parse(&text)?;
            let t = ttemb_core::train::run(&cfg)?;
            eprintln!("wall clock: {:.3} s", t.wall_clock.as_secs_f64());
            r.field("task", cfg.task)
                .field("kind", cfg.kind)
                .field("steps", cfg.steps)
                .field("params", t.stats.tt_params)
                .field("dense_params", t.stats.dense_params)
                .float("initial_loss", t.losses[0])
                .float("final_loss", t.final_loss);
            for (k, v) in &t.metadata {
                if k != "final_loss" && k != "initial_loss" {
                    r.float(k, *v);
                }
            }
            r.field("checksum", format!("{:016x}", t.checksum));
            if trace {
                r.table("step", &["step", "loss"]);
                for (s, l) in t.losses.iter().enumerate() {
                    r.row(s, vec![s.to_string(), fmt_f64(*l)]);
                }
            }
        }
    }
    Ok((r, code))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok((report, code)) => {
            print!("{}", report.render(cli.porcelain));
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
