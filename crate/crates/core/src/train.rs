//! Small end-to-end training runs: fitting a random target matrix, and a
//! toy two-class task with mean-pooled embeddings and a logistic head.
//!
//! Both runs are deterministic given their [`TrainConfig`] as long as
//! `workers` is unset. With `workers` set, gradients are summed in a
//! different order and traces may differ in the last bits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embedding::{checksum, EmbeddingLayer, LowRankEmbedding, TtEmbedding};
use crate::error::{Error, Result};
use crate::plan::{plan_embedding, RankSpec};
use crate::ring::glorot_tr_with_sigma;
use crate::tt::{glorot_tt_with_sigma, glorot_variance, CompressionStats};

/// Tokens per toy sentence.
pub const SENTENCE_LEN: usize = 8;

const TARGET_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    MatrixFit,
    ToyClassify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Tt,
    Tr,
    LowRank,
    /// A single-core TT, i.e. a plain table.
    Dense,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matrix-fit" => Ok(Task::MatrixFit),
            "toy-classify" => Ok(Task::ToyClassify),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::MatrixFit => "matrix-fit",
            Task::ToyClassify => "toy-classify",
        })
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tt" => Ok(LayerKind::Tt),
            "tr" => Ok(LayerKind::Tr),
            "lowrank" => Ok(LayerKind::LowRank),
            "dense" => Ok(LayerKind::Dense),
            _ => Err(Error::Config(format!("unknown layer kind {s:?}"))),
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Tt => "tt",
            LayerKind::Tr => "tr",
            LayerKind::LowRank => "lowrank",
            LayerKind::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub kind: LayerKind,
    pub n: usize,
    pub vocab: usize,
    pub dim: usize,
    pub ranks: RankSpec,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Ring closure rank for `tr`; defaults to the first interior rank.
    pub closure: Option<usize>,
    /// Inner dimension for `lowrank`; defaults to the largest one with no
    /// more parameters than the TT layer of the same plan.
    pub lowrank_dim: Option<usize>,
    /// Split each backward pass over this many workers.
    pub workers: Option<usize>,
    pub train_sentences: usize,
    pub test_sentences: usize,
}

impl TrainConfig {
    pub fn new(task: Task, kind: LayerKind, n: usize, vocab: usize, dim: usize, ranks: impl Into<RankSpec>) -> Self {
        Self {
            task,
            kind,
            n,
            vocab,
            dim,
            ranks: ranks.into(),
            steps: 1000,
            batch: 16,
            lr: 0.05,
            seed: 0,
            closure: None,
            lowrank_dim: None,
            workers: None,
            train_sentences: 512,
            test_sentences: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.task == Task::ToyClassify {
            if self.vocab < 2 {
                return Err(Error::Config("toy-classify needs vocab >= 2".into()));
            }
            if self.train_sentences == 0 || self.test_sentences == 0 {
                return Err(Error::Config("sentence counts must be >= 1".into()));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are
    /// skipped. `task`, `kind`, `n`, `vocab`, `dim` and `ranks` are
    /// required; `ranks` is one value or a comma list.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let k = k.trim().to_string();
            if kv.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", lineno + 1)));
            }
        }
        let mut take = |k: &str| kv.remove(k);
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{k}: cannot parse {v:?}")))
        }
        fn required(k: &str, v: Option<String>) -> Result<String> {
            v.ok_or_else(|| Error::Config(format!("missing key {k:?}")))
        }

        let task: Task = required("task", take("task"))?.parse()?;
        let kind: LayerKind = required("kind", take("kind"))?.parse()?;
        let n = num("n", &required("n", take("n"))?)?;
        let vocab = num("vocab", &required("vocab", take("vocab"))?)?;
        let dim = num("dim", &required("dim", take("dim"))?)?;
        let ranks_s = required("ranks", take("ranks"))?;
        let ranks: Vec<usize> = ranks_s
            .split(',')
            .map(|r| num("ranks", r.trim()))
            .collect::<Result<_>>()?;
        let ranks = if ranks.len() == 1 {
            RankSpec::Uniform(ranks[0])
        } else {
            RankSpec::PerBond(ranks)
        };
        let mut cfg = Self::new(task, kind, n, vocab, dim, ranks);
        if let Some(v) = take("steps") {
            cfg.steps = num("steps", &v)?;
        }
        if let Some(v) = take("batch") {
            cfg.batch = num("batch", &v)?;
        }
        if let Some(v) = take("lr") {
            cfg.lr = num("lr", &v)?;
        }
        if let Some(v) = take("seed") {
            cfg.seed = num("seed", &v)?;
        }
        if let Some(v) = take("closure") {
            cfg.closure = Some(num("closure", &v)?);
        }
        if let Some(v) = take("lowrank_dim") {
            cfg.lowrank_dim = Some(num("lowrank_dim", &v)?);
        }
        if let Some(v) = take("workers") {
            cfg.workers = Some(num("workers", &v)?);
        }
        if let Some(v) = take("train_sentences") {
            cfg.train_sentences = num("train_sentences", &v)?;
        }
        if let Some(v) = take("test_sentences") {
            cfg.test_sentences = num("test_sentences", &v)?;
        }
        if let Some(k) = kv.keys().next() {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds the freshly initialized layer. TT, TR and dense layers use
    /// Glorot-calibrated cores; the low-rank layer matches the same entry
    /// variance.
    pub fn build_layer(&self) -> Result<Box<dyn EmbeddingLayer>> {
        let n = if self.kind == LayerKind::Dense { 1 } else { self.n };
        let plan = plan_embedding(self.vocab, self.dim, n, self.ranks.clone())?;
        let sigma = glorot_variance(&plan).sqrt();
        Ok(match self.kind {
            LayerKind::Tt | LayerKind::Dense => {
                Box::new(TtEmbedding::new(glorot_tt_with_sigma(&plan, sigma, self.seed)?))
            }
            LayerKind::Tr => {
                let closure = self.closure.or(plan.ranks().first().copied()).unwrap_or(1);
                Box::new(TtEmbedding::new(glorot_tr_with_sigma(&plan, closure, sigma, self.seed)?))
            }
            LayerKind::LowRank => {
                let d = match self.lowrank_dim {
                    Some(d) => d,
                    None => (plan.tt_params(1) / (self.vocab + self.dim) as u64).max(1) as usize,
                };
                Box::new(LowRankEmbedding::random(self.vocab, self.dim, d, sigma, self.seed)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    /// Full training objective before each update.
    pub losses: Vec<f64>,
    /// Objective after the last update.
    pub final_loss: f64,
    /// FNV-1a over all trained parameters.
    pub checksum: u64,
    pub stats: CompressionStats,
    pub wall_clock: Duration,
    /// Task-specific results, e.g. `accuracy`.
    pub metadata: BTreeMap<String, f64>,
}

pub fn run(cfg: &TrainConfig) -> Result<TrainTrace> {
    match cfg.task {
        Task::MatrixFit => run_matrix_fit(cfg),
        Task::ToyClassify => run_toy_classify(cfg),
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn check_loss(step: usize, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged { step, loss })
    }
}

fn backward(layer: &dyn EmbeddingLayer, cfg: &TrainConfig, idx: &[usize], up: &[Vec<f64>]) -> Result<crate::GradientBuffer> {
    match cfg.workers {
        Some(w) => layer.backward_parallel(idx, up, w),
        None => layer.backward(idx, up),
    }
}

/// SGD on the mean squared error between looked-up rows and a
/// `Normal(0, 1)` target drawn from the seed. The objective is averaged
/// over rows and summed over columns, so each step moves a looked-up row
/// by `2 * lr / batch` times its residual.
pub fn run_matrix_fit(cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    let start = Instant::now();
    let mut layer = cfg.build_layer()?;
    let (vocab, dim) = (layer.vocab(), layer.dim());
    let mut trng = rng(cfg.seed, TARGET_STREAM);
    let target: Vec<Vec<f64>> = (0..vocab)
        .map(|_| (0..dim).map(|_| trng.sample(StandardNormal)).collect())
        .collect();
    let all: Vec<usize> = (0..vocab).collect();
    let objective = |layer: &dyn EmbeddingLayer| -> Result<f64> {
        let rows = layer.forward(&all)?;
        Ok(rows.iter().zip(&target).map(|(e, t)| sq_dist(e, t)).sum::<f64>() / vocab as f64)
    };

    let mut brng = rng(cfg.seed, BATCH_STREAM);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        losses.push(check_loss(step, objective(layer.as_ref())?)?);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| brng.random_range(0..vocab)).collect();
        let rows = layer.forward(&idx)?;
        let scale = 2.0 / cfg.batch as f64;
        let up: Vec<Vec<f64>> = rows
            .iter()
            .zip(&idx)
            .map(|(e, &i)| e.iter().zip(&target[i]).map(|(a, b)| scale * (a - b)).collect())
            .collect();
        let g = backward(layer.as_ref(), cfg, &idx, &up)?;
        layer.apply_gradients(&g, cfg.lr)?;
    }
    let final_loss = check_loss(cfg.steps, objective(layer.as_ref())?)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("initial_loss".to_string(), losses[0]);
    metadata.insert("final_loss".to_string(), final_loss);
    Ok(TrainTrace {
        losses,
        final_loss,
        checksum: layer.checksum(),
        stats: layer.stats(),
        wall_clock: start.elapsed(),
        metadata,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + exp(z)) - y z`, computed without overflow.
fn logistic_loss(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct Sentence {
    tokens: [usize; SENTENCE_LEN],
    label: f64,
}

fn sentences(count: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<Sentence> {
    let half = vocab / 2;
    (0..count)
        .map(|_| {
            let label = rng.random_bool(0.5);
            let (lo, hi) = if label { (half, vocab) } else { (0, half) };
            let mut tokens = [0; SENTENCE_LEN];
            for t in &mut tokens {
                *t = rng.random_range(lo..hi);
            }
            Sentence {
                tokens,
                label: if label { 1.0 } else { 0.0 },
            }
        })
        .collect()
}

fn pool(table: &[Vec<f64>], s: &Sentence) -> Vec<f64> {
    let mut x = vec![0.0; table[0].len()];
    for &t in &s.tokens {
        for (a, b) in x.iter_mut().zip(&table[t]) {
            *a += b;
        }
    }
    let inv = 1.0 / SENTENCE_LEN as f64;
    x.iter_mut().for_each(|a| *a *= inv);
    x
}

/// Toy sentiment task. Tokens below `vocab / 2` belong to class 0, the
/// rest to class 1; a sentence is [`SENTENCE_LEN`] tokens from one class.
/// The model mean-pools the embeddings and applies a zero-initialized
/// linear head with logistic loss. Metadata carries `accuracy` (held-out,
/// after training) and `initial_accuracy`.
pub fn run_toy_classify(cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    let start = Instant::now();
    let mut layer = cfg.build_layer()?;
    let (vocab, dim) = (layer.vocab(), layer.dim());
    let mut drng = rng(cfg.seed, TARGET_STREAM);
    let train = sentences(cfg.train_sentences, vocab, &mut drng);
    let test = sentences(cfg.test_sentences, vocab, &mut drng);
    let all: Vec<usize> = (0..vocab).collect();
    let mut w = vec![0.0; dim];
    let mut bias = 0.0;

    let evaluate = |layer: &dyn EmbeddingLayer, w: &[f64], bias: f64, data: &[Sentence]| -> Result<(f64, f64)> {
        let table = layer.forward(&all)?;
        let (mut loss, mut correct) = (0.0, 0usize);
        for s in data {
            let z = dot(w, &pool(&table, s)) + bias;
            loss += logistic_loss(z, s.label);
            if (z > 0.0) == (s.label > 0.5) {
                correct += 1;
            }
        }
        Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
    };

    let initial_accuracy = evaluate(layer.as_ref(), &w, bias, &test)?.1;
    let mut brng = rng(cfg.seed, BATCH_STREAM);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        losses.push(check_loss(step, evaluate(layer.as_ref(), &w, bias, &train)?.0)?);
        let batch: Vec<&Sentence> = (0..cfg.batch)
            .map(|_| &train[brng.random_range(0..train.len())])
            .collect();
        let idx: Vec<usize> = batch.iter().flat_map(|s| s.tokens).collect();
        let table = layer.forward(&idx)?;
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        let mut up = Vec::with_capacity(idx.len());
        for (s, rows) in batch.iter().zip(table.chunks(SENTENCE_LEN)) {
            let mut x = vec![0.0; dim];
            for r in rows {
                for (a, b) in x.iter_mut().zip(r) {
                    *a += b / SENTENCE_LEN as f64;
                }
            }
            let dz = (sigmoid(dot(&w, &x) + bias) - s.label) / cfg.batch as f64;
            for (g, xi) in gw.iter_mut().zip(&x) {
                *g += dz * xi;
            }
            gb += dz;
            let dx: Vec<f64> = w.iter().map(|wi| dz * wi / SENTENCE_LEN as f64).collect();
            up.extend(std::iter::repeat_n(dx, SENTENCE_LEN));
        }
        let g = backward(layer.as_ref(), cfg, &idx, &up)?;
        layer.apply_gradients(&g, cfg.lr)?;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * g;
        }
        bias -= cfg.lr * gb;
    }
    let final_loss = check_loss(cfg.steps, evaluate(layer.as_ref(), &w, bias, &train)?.0)?;
    let accuracy = evaluate(layer.as_ref(), &w, bias, &test)?.1;
    let mut metadata = BTreeMap::new();
    metadata.insert("initial_accuracy".to_string(), initial_accuracy);
    metadata.insert("accuracy".to_string(), accuracy);
    metadata.insert("final_loss".to_string(), final_loss);
    let head = [w.as_slice(), std::slice::from_ref(&bias)];
    Ok(TrainTrace {
        losses,
        final_loss,
        checksum: checksum(layer.parameters().into_iter().chain(head)),
        stats: layer.stats(),
        wall_clock: start.elapsed(),
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit(kind: LayerKind, ranks: usize, steps: usize, lr: f64, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(Task::MatrixFit, kind, 3, 64, 64, ranks);
        c.steps = steps;
        c.lr = lr;
        c.seed = seed;
        c
    }

    #[test]
    fn parse_roundtrip_and_errors() {
        let text = "# demo\ntask = matrix-fit\nkind = tr\nn = 3\nvocab = 64\ndim = 64\nranks = 4, 8\n\nsteps = 5\nlr = 0.1 # inline\nbatch = 4\nseed = 9\nclosure = 2\n";
        let c = TrainConfig::parse(text).unwrap();
        assert_eq!(c.kind, LayerKind::Tr);
        assert_eq!(c.ranks, RankSpec::PerBond(vec![4, 8]));
        assert_eq!((c.steps, c.batch, c.lr, c.seed, c.closure), (5, 4, 0.1, 9, Some(2)));
        assert!(TrainConfig::parse("task = matrix-fit\nkind = tt\nn = 3\nvocab = 64\ndim = 64\n").is_err());
        assert!(TrainConfig::parse(&format!("{text}color = red\n")).is_err());
        assert!(TrainConfig::parse(&format!("{text}steps = 3\n")).is_err());
        assert!(TrainConfig::parse(&text.replace("steps = 5", "steps = 0")).is_err());
        assert!(TrainConfig::parse(&text.replace("kind = tr", "kind = lstm")).is_err());
    }

    #[test]
    fn zero_lr_gives_constant_trace() {
        for kind in [LayerKind::Tt, LayerKind::Tr, LayerKind::LowRank, LayerKind::Dense] {
            let t = run_matrix_fit(&fit(kind, 4, 10, 0.0, 1)).unwrap();
            assert_eq!(t.losses.len(), 10);
            assert!(t.losses.iter().all(|&l| l == t.losses[0]), "{kind}");
            assert_eq!(t.final_loss, t.losses[0]);
        }
    }

    #[test]
    fn deterministic_and_descending() {
        let c = fit(LayerKind::Tt, 4, 20, 0.05, 3);
        let a = run_matrix_fit(&c).unwrap();
        let b = run_matrix_fit(&c).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.checksum, b.checksum);
        for seed in 0..4 {
            let t = run_matrix_fit(&fit(LayerKind::Tt, 4, 2, 1e-4, seed)).unwrap();
            assert!(t.losses[1] <= t.losses[0]);
        }
    }

    #[test]
    fn stats_interface_across_kinds() {
        let tt = fit(LayerKind::Tt, 2, 1, 0.0, 0).build_layer().unwrap();
        assert_eq!(tt.stats().tt_params, 16 * 2 + 2 * 16 * 2 + 2 * 16);
        let dense = fit(LayerKind::Dense, 2, 1, 0.0, 0).build_layer().unwrap();
        assert_eq!(dense.stats().tt_params, 4096);
        let lr = fit(LayerKind::LowRank, 2, 1, 0.0, 0).build_layer().unwrap();
        assert_eq!(lr.num_params(), 128);
    }

    #[test]
    fn untrained_classifier_is_at_chance() {
        let mut c = TrainConfig::new(Task::ToyClassify, LayerKind::Tt, 3, 64, 64, 8);
        c.steps = 1;
        c.lr = 0.0;
        let t = run_toy_classify(&c).unwrap();
        let acc = t.metadata["initial_accuracy"];
        assert!((acc - 0.5).abs() < 0.1, "{acc}");
        assert!((t.losses[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
