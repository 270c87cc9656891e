//! Trainable embedding layers: the TT/TR layer, the low-rank `U V^T`
//! baseline, and the gradient plumbing they share.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ring::TrMatrix;
use crate::tensor::{matmul, DenseMatrix};
use crate::tt::{CompressionStats, CoreChain, TtMatrix};

/// Per-block gradient accumulators, shaped like the parameters of the layer
/// that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    blocks: Vec<Vec<f64>>,
    count: usize,
}

impl GradientBuffer {
    pub fn zeros(block_lens: impl IntoIterator<Item = usize>) -> Self {
        Self {
            blocks: block_lens.into_iter().map(|n| vec![0.0; n]).collect(),
            count: 0,
        }
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.blocks
    }

    /// Number of batch items accumulated.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.len() == b.len())
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("gradient buffers have different shapes".into()));
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.count += other.count;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().flatten().copied()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|x| x == 0.0)
    }
}

/// Common interface over every layer kind the training harness drives.
pub trait EmbeddingLayer: Send + Sync {
    /// Addressable rows.
    fn vocab(&self) -> usize;

    fn dim(&self) -> usize;

    fn stats(&self) -> CompressionStats;

    fn forward(&self, indices: &[usize]) -> Result<Vec<Vec<f64>>>;

    fn zero_gradients(&self) -> GradientBuffer;

    /// Adds the gradient of `sum_b <upstream[b], forward(indices)[b]>` into
    /// `buf`.
    fn accumulate(&self, indices: &[usize], upstream: &[Vec<f64>], buf: &mut GradientBuffer) -> Result<()>;

    fn parameters(&self) -> Vec<&[f64]>;

    fn parameters_mut(&mut self) -> Vec<&mut [f64]>;

    fn backward(&self, indices: &[usize], upstream: &[Vec<f64>]) -> Result<GradientBuffer> {
        let mut buf = self.zero_gradients();
        self.accumulate(indices, upstream, &mut buf)?;
        Ok(buf)
    }

    /// Backward split over `workers` contiguous chunks of the batch, each
    /// with a private buffer; buffers are merged in chunk order.
    fn backward_parallel(&self, indices: &[usize], upstream: &[Vec<f64>], workers: usize) -> Result<GradientBuffer> {
        check_batch(indices, upstream)?;
        let workers = workers.max(1);
        let chunk = indices.len().div_ceil(workers).max(1);
        let parts: Vec<Result<GradientBuffer>> = indices
            .par_chunks(chunk)
            .zip(upstream.par_chunks(chunk))
            .map(|(idx, up)| self.backward(idx, up))
            .collect();
        let mut total = self.zero_gradients();
        for p in parts {
            total.merge(&p?)?;
        }
        Ok(total)
    }

    /// Plain SGD: `theta -= step * grad`.
    fn apply_gradients(&mut self, buf: &GradientBuffer, step: f64) -> Result<()> {
        if !step.is_finite() {
            return Err(Error::NonFinite(format!("step size {step}")));
        }
        if !buf.same_shape(&self.zero_gradients()) {
            return Err(Error::Shape("gradient buffer does not match layer".into()));
        }
        for (p, g) in self.parameters_mut().into_iter().zip(buf.blocks()) {
            for (x, d) in p.iter_mut().zip(g) {
                *x -= step * d;
            }
        }
        Ok(())
    }

    fn num_params(&self) -> u64 {
        self.parameters().iter().map(|p| p.len() as u64).sum()
    }

    fn checksum(&self) -> u64 {
        checksum(self.parameters())
    }
}

/// FNV-1a over the little-endian bytes of every value, block by block.
pub fn checksum<'a>(blocks: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for block in blocks {
        for v in block {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

fn check_batch(indices: &[usize], upstream: &[Vec<f64>]) -> Result<()> {
    if indices.len() != upstream.len() {
        return Err(Error::Shape(format!(
            "{} indices but {} upstream rows",
            indices.len(),
            upstream.len()
        )));
    }
    Ok(())
}

fn check_index(i: usize, vocab: usize) -> Result<()> {
    if i >= vocab {
        return Err(Error::IndexOutOfRange { index: i, extent: vocab });
    }
    Ok(())
}

/// Either network format behind a [`TtEmbedding`].
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Tt(TtMatrix),
    Tr(TrMatrix),
}

impl Weights {
    pub fn chain(&self) -> &CoreChain {
        match self {
            Weights::Tt(m) => m.chain(),
            Weights::Tr(m) => m.chain(),
        }
    }

    fn chain_mut(&mut self) -> &mut CoreChain {
        match self {
            Weights::Tt(m) => m.chain_mut(),
            Weights::Tr(m) => m.chain_mut(),
        }
    }

    pub fn is_ring(&self) -> bool {
        matches!(self, Weights::Tr(_))
    }
}

impl From<TtMatrix> for Weights {
    fn from(m: TtMatrix) -> Self {
        Weights::Tt(m)
    }
}

impl From<TrMatrix> for Weights {
    fn from(m: TrMatrix) -> Self {
        Weights::Tr(m)
    }
}

/// Embedding whose table is a TT (or TR) matrix. Only rows `0..vocab` are
/// served; padding rows exist in the network but are never looked up and
/// never receive gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct TtEmbedding {
    weights: Weights,
    vocab: usize,
}

impl TtEmbedding {
    /// Serves `plan.vocab()` rows.
    pub fn new(weights: impl Into<Weights>) -> Self {
        let weights = weights.into();
        let vocab = weights.chain().plan().vocab();
        Self { weights, vocab }
    }

    pub fn with_vocab(weights: impl Into<Weights>, vocab: usize) -> Result<Self> {
        let weights = weights.into();
        let padded = weights.chain().padded_rows();
        if vocab == 0 || vocab > padded {
            return Err(Error::InvalidArgument(format!("vocab {vocab} must be in 1..={padded}")));
        }
        Ok(Self { weights, vocab })
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn chain(&self) -> &CoreChain {
        self.weights.chain()
    }

    pub fn into_weights(self) -> Weights {
        self.weights
    }
}

impl EmbeddingLayer for TtEmbedding {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn dim(&self) -> usize {
        self.chain().cols()
    }

    fn stats(&self) -> CompressionStats {
        self.chain().stats()
    }

    fn forward(&self, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        for &i in indices {
            check_index(i, self.vocab)?;
        }
        indices.iter().map(|&i| self.chain().row(i)).collect()
    }

    fn zero_gradients(&self) -> GradientBuffer {
        GradientBuffer::zeros(self.chain().cores().iter().map(|c| c.len()))
    }

    fn accumulate(&self, indices: &[usize], upstream: &[Vec<f64>], buf: &mut GradientBuffer) -> Result<()> {
        check_batch(indices, upstream)?;
        if !buf.same_shape(&self.zero_gradients()) {
            return Err(Error::Shape("gradient buffer does not match layer".into()));
        }
        for (&i, up) in indices.iter().zip(upstream) {
            check_index(i, self.vocab)?;
            self.chain().accumulate_row_gradient(i, up, buf.blocks_mut())?;
            buf.count += 1;
        }
        Ok(())
    }

    fn parameters(&self) -> Vec<&[f64]> {
        self.chain().cores().iter().map(|c| c.raw()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights.chain_mut().cores_mut().iter_mut().map(|c| c.raw_mut()).collect()
    }
}

/// The `E = U V^T` baseline: `u` is `vocab x d`, `v` is `dim x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankEmbedding {
    u: DenseMatrix,
    v: DenseMatrix,
}

impl LowRankEmbedding {
    pub fn new(u: DenseMatrix, v: DenseMatrix) -> Result<Self> {
        if u.cols() != v.cols() {
            return Err(Error::Shape(format!(
                "inner dimensions differ: U has {} columns, V has {}",
                u.cols(),
                v.cols()
            )));
        }
        if !u.is_finite() || !v.is_finite() {
            return Err(Error::NonFinite("low-rank factors".into()));
        }
        Ok(Self { u, v })
    }

    /// Gaussian factors scaled so that entries of `U V^T` have variance
    /// `sigma^2`.
    pub fn random(vocab: usize, dim: usize, d: usize, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        if d == 0 {
            return Err(Error::InvalidArgument("inner dimension must be >= 1".into()));
        }
        let std = (sigma * sigma / d as f64).sqrt().sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = DenseMatrix::from_fn(vocab, d, |_, _| normal.sample(&mut rng))?;
        let v = DenseMatrix::from_fn(dim, d, |_, _| normal.sample(&mut rng))?;
        Self::new(u, v)
    }

    pub fn u(&self) -> &DenseMatrix {
        &self.u
    }

    pub fn v(&self) -> &DenseMatrix {
        &self.v
    }

    pub fn inner_dim(&self) -> usize {
        self.u.cols()
    }

    pub fn materialize(&self) -> Result<DenseMatrix> {
        matmul(&self.u, &self.v.transpose())
    }
}

impl EmbeddingLayer for LowRankEmbedding {
    fn vocab(&self) -> usize {
        self.u.rows()
    }

    fn dim(&self) -> usize {
        self.v.rows()
    }

    fn stats(&self) -> CompressionStats {
        CompressionStats::new(
            ((self.u.rows() + self.v.rows()) * self.inner_dim()) as u64,
            (self.u.rows() * self.v.rows()) as u64,
        )
    }

    fn forward(&self, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        indices
            .iter()
            .map(|&i| {
                check_index(i, self.vocab())?;
                let ui = self.u.row(i);
                Ok((0..self.dim())
                    .map(|j| ui.iter().zip(self.v.row(j)).map(|(a, b)| a * b).sum())
                    .collect())
            })
            .collect()
    }

    fn zero_gradients(&self) -> GradientBuffer {
        GradientBuffer::zeros([self.u.data().len(), self.v.data().len()])
    }

    fn accumulate(&self, indices: &[usize], upstream: &[Vec<f64>], buf: &mut GradientBuffer) -> Result<()> {
        check_batch(indices, upstream)?;
        if !buf.same_shape(&self.zero_gradients()) {
            return Err(Error::Shape("gradient buffer does not match layer".into()));
        }
        let d = self.inner_dim();
        for (&i, up) in indices.iter().zip(upstream) {
            check_index(i, self.vocab())?;
            if up.len() != self.dim() {
                return Err(Error::Shape(format!("upstream has length {}, expected {}", up.len(), self.dim())));
            }
            let ui = self.u.row(i);
            let (gu, gv) = buf.blocks.split_at_mut(1);
            let gu = &mut gu[0][i * d..(i + 1) * d];
            let gv = &mut gv[0];
            for (j, &w) in up.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let vj = self.v.row(j);
                for r in 0..d {
                    gu[r] += w * vj[r];
                    gv[j * d + r] += w * ui[r];
                }
            }
            buf.count += 1;
        }
        Ok(())
    }

    fn parameters(&self) -> Vec<&[f64]> {
        vec![self.u.data(), self.v.data()]
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.u.data_mut(), self.v.data_mut()]
    }
}

/// Seeded gradient-check probe: `batch` uniform indices below `vocab`, the
/// first repeated at the end, with upstream entries uniform in `[-1, 1)`.
pub fn probe_batch(vocab: usize, dim: usize, batch: usize, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..batch.max(1)).map(|_| rng.random_range(0..vocab)).collect();
    idx.push(idx[0]);
    let up = idx
        .iter()
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (idx, up)
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `max(0, |a - fd| - abs_floor) / max(|a|, |fd|)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Absolute error below which a gradient entry always counts as matching.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-8;

/// Audits [`EmbeddingLayer::backward`] against central differences of
/// `L = sum_b <upstream[b], forward(indices)[b]>` for every parameter, with
/// step `1e-6 * max(1, |theta|)`.
pub fn gradient_check(layer: &mut dyn EmbeddingLayer, indices: &[usize], upstream: &[Vec<f64>]) -> Result<GradCheck> {
    let analytic = layer.backward(indices, upstream)?;
    let loss = |l: &dyn EmbeddingLayer| -> Result<f64> {
        Ok(l.forward(indices)?
            .iter()
            .zip(upstream)
            .map(|(e, u)| e.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let shapes: Vec<usize> = layer.parameters().iter().map(|p| p.len()).collect();
    for (blk, &len) in shapes.iter().enumerate() {
        for k in 0..len {
            let orig = layer.parameters()[blk][k];
            let h = 1e-6 * orig.abs().max(1.0);
            layer.parameters_mut()[blk][k] = orig + h;
            let plus = loss(layer)?;
            layer.parameters_mut()[blk][k] = orig - h;
            let minus = loss(layer)?;
            layer.parameters_mut()[blk][k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.blocks()[blk][k];
            let abs = (a - fd).abs();
            let scale = a.abs().max(fd.abs());
            let rel = if scale > 0.0 {
                (abs - GRADCHECK_ABS_FLOOR).max(0.0) / scale
            } else {
                0.0
            };
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
