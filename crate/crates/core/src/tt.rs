//! TT-matrices: a `I x J` matrix stored as a chain of 4-way cores
//! `G_k[r_{k-1}, i_k, j_k, r_k]`, with
//!
//! ```text
//! X[i, j] = G_1[:, i_1, j_1, :] G_2[:, i_2, j_2, :] ... G_N[:, i_N, j_N, :]
//! ```
//!
//! where `(i_1..i_N)` and `(j_1..j_N)` are the mixed-radix digits of `i` and
//! `j` (digit 1 fastest, see [`crate::index`]).
//!
//! Evaluation, materialization and gradients are implemented once on
//! [`CoreChain`], which also covers the ring-closed variant in
//! [`crate::ring`]: a chain whose first and last bonds are equal and whose
//! element is the trace of the slice product. With a closure rank of 1 the
//! trace is a single entry and the chain is an ordinary TT-matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::index::MixedRadix;
use crate::plan::FactorizationPlan;
use crate::tensor::{rank_from_singular_values, svd, DenseMatrix, DenseTensor};

/// Upper bound on entries produced by [`CoreChain::materialize`] unless a cap
/// is given explicitly.
pub const DEFAULT_MATERIALIZE_CAP: usize = 1 << 24;

/// Relative singular-value cutoff used by [`tt_svd`] truncation.
pub const TT_SVD_TOL: f64 = 1e-12;

/// One 4-way core with extents `(r_in, i_dim, j_dim, r_out)`.
///
/// In memory the row digit is outermost, so that the slice for a fixed `i`
/// is a contiguous `r_in x (j_dim * r_out)` block. [`TtCore::to_row_major`]
/// gives the file layout (`r_out` fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct TtCore {
    r_in: usize,
    i_dim: usize,
    j_dim: usize,
    r_out: usize,
    data: Vec<f64>,
}

impl TtCore {
    pub fn zeros(r_in: usize, i_dim: usize, j_dim: usize, r_out: usize) -> Result<Self> {
        Self::from_fn([r_in, i_dim, j_dim, r_out], |_, _, _, _| 0.0)
    }

    /// `f(a, i, j, b)` gives the entry at `(r_in = a, i, j, r_out = b)`.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let [r_in, i_dim, j_dim, r_out] = dims;
        if dims.contains(&0) {
            return Err(Error::Shape(format!("core extents must be positive: {dims:?}")));
        }
        let mut data = Vec::with_capacity(r_in * i_dim * j_dim * r_out);
        for i in 0..i_dim {
            for a in 0..r_in {
                for j in 0..j_dim {
                    for b in 0..r_out {
                        data.push(f(a, i, j, b));
                    }
                }
            }
        }
        Ok(Self {
            r_in,
            i_dim,
            j_dim,
            r_out,
            data,
        })
    }

    /// Builds a core from entries ordered row-major over `(r_in, i, j, r_out)`.
    pub fn from_row_major(dims: [usize; 4], values: &[f64]) -> Result<Self> {
        let [_, i_dim, j_dim, r_out] = dims;
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "core {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>(),
                values.len()
            )));
        }
        Self::from_fn(dims, |a, i, j, b| values[((a * i_dim + i) * j_dim + j) * r_out + b])
    }

    /// Entries row-major over `(r_in, i, j, r_out)`.
    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for a in 0..self.r_in {
            for i in 0..self.i_dim {
                for j in 0..self.j_dim {
                    for b in 0..self.r_out {
                        out.push(self.get(a, i, j, b));
                    }
                }
            }
        }
        out
    }

    /// Column-major tensor of shape `(r_in, i_dim, j_dim, r_out)`.
    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::from_fn(self.dims().to_vec(), |x| self.get(x[0], x[1], x[2], x[3]))
            .expect("core extents are positive")
    }

    pub fn from_tensor(t: &DenseTensor) -> Result<Self> {
        match *t.dims() {
            [r_in, i_dim, j_dim, r_out] => Self::from_fn([r_in, i_dim, j_dim, r_out], |a, i, j, b| {
                t.data()[a + r_in * (i + i_dim * (j + j_dim * b))]
            }),
            _ => Err(Error::Shape(format!("expected a 4-way tensor, got {:?}", t.dims()))),
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.r_in, self.i_dim, self.j_dim, self.r_out]
    }

    pub fn r_in(&self) -> usize {
        self.r_in
    }

    pub fn i_dim(&self) -> usize {
        self.i_dim
    }

    pub fn j_dim(&self) -> usize {
        self.j_dim
    }

    pub fn r_out(&self) -> usize {
        self.r_out
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, a: usize, i: usize, j: usize, b: usize) -> usize {
        ((i * self.r_in + a) * self.j_dim + j) * self.r_out + b
    }

    #[inline]
    pub fn get(&self, a: usize, i: usize, j: usize, b: usize) -> f64 {
        self.data[self.offset(a, i, j, b)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, i: usize, j: usize, b: usize, v: f64) {
        let o = self.offset(a, i, j, b);
        self.data[o] = v;
    }

    /// In-memory storage (row digit outermost). Gradient buffers share this
    /// layout.
    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn slice_len(&self) -> usize {
        self.r_in * self.j_dim * self.r_out
    }

    /// `r_in x j_dim x r_out` block for row digit `i`, `r_out` fastest.
    #[inline]
    pub(crate) fn slice(&self, i: usize) -> &[f64] {
        let n = self.slice_len();
        &self.data[i * n..(i + 1) * n]
    }
}

/// A validated chain of cores closed by a ring bond of size
/// `closure = cores[0].r_in == cores[N-1].r_out`. Shared machinery behind
/// [`TtMatrix`] (closure 1) and [`crate::ring::TrMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoreChain {
    cores: Vec<TtCore>,
    plan: FactorizationPlan,
    rows: MixedRadix,
    cols: MixedRadix,
}

impl CoreChain {
    pub fn new(cores: Vec<TtCore>, plan: FactorizationPlan) -> Result<Self> {
        let n = plan.n();
        if cores.len() != n {
            return Err(Error::Shape(format!("plan has {n} cores, got {}", cores.len())));
        }
        let closure = cores[0].r_in;
        if cores[n - 1].r_out != closure {
            return Err(Error::Shape(format!(
                "ring not closed: first r_in {closure} vs last r_out {}",
                cores[n - 1].r_out
            )));
        }
        for (k, core) in cores.iter().enumerate() {
            if core.i_dim != plan.row_factors()[k] || core.j_dim != plan.col_factors()[k] {
                return Err(Error::Shape(format!(
                    "core {k} has mode sizes ({}, {}), plan expects ({}, {})",
                    core.i_dim,
                    core.j_dim,
                    plan.row_factors()[k],
                    plan.col_factors()[k]
                )));
            }
            if k + 1 < n {
                if core.r_out != cores[k + 1].r_in {
                    return Err(Error::Shape(format!(
                        "rank chain broken between cores {k} and {}: {} vs {}",
                        k + 1,
                        core.r_out,
                        cores[k + 1].r_in
                    )));
                }
                if core.r_out != plan.ranks()[k] {
                    return Err(Error::Shape(format!(
                        "core {k} r_out {} disagrees with plan rank {}",
                        core.r_out,
                        plan.ranks()[k]
                    )));
                }
            }
            if !core.data.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("core {k}")));
            }
        }
        let rows = MixedRadix::new(plan.row_factors())?;
        let cols = MixedRadix::new(plan.col_factors())?;
        Ok(Self { cores, plan, rows, cols })
    }

    pub fn cores(&self) -> &[TtCore] {
        &self.cores
    }

    pub(crate) fn cores_mut(&mut self) -> &mut [TtCore] {
        &mut self.cores
    }

    pub fn into_cores(self) -> Vec<TtCore> {
        self.cores
    }

    pub fn plan(&self) -> &FactorizationPlan {
        &self.plan
    }

    pub fn closure(&self) -> usize {
        self.cores[0].r_in
    }

    pub fn n(&self) -> usize {
        self.cores.len()
    }

    pub fn padded_rows(&self) -> usize {
        self.plan.padded_rows()
    }

    pub fn cols(&self) -> usize {
        self.plan.cols()
    }

    pub fn num_params(&self) -> u64 {
        self.cores.iter().map(|c| c.len() as u64).sum()
    }

    pub fn stats(&self) -> CompressionStats {
        CompressionStats::new(self.num_params(), self.plan.padded_rows() as u64 * self.plan.cols() as u64)
    }

    fn check_row(&self, i: usize) -> Result<()> {
        if i >= self.plan.padded_rows() {
            return Err(Error::IndexOutOfRange {
                index: i,
                extent: self.plan.padded_rows(),
            });
        }
        Ok(())
    }

    /// Single entry: trace of the product of the selected slice matrices.
    pub fn element(&self, i: usize, j: usize) -> Result<f64> {
        self.check_row(i)?;
        if j >= self.plan.cols() {
            return Err(Error::IndexOutOfRange {
                index: j,
                extent: self.plan.cols(),
            });
        }
        let ri = self.rows.to_multi(i)?;
        let cj = self.cols.to_multi(j)?;
        let r0 = self.closure();
        // acc is r0 x r (row-major), starting from the identity.
        let mut acc: Vec<f64> = (0..r0 * r0).map(|x| if x / r0 == x % r0 { 1.0 } else { 0.0 }).collect();
        let mut r = r0;
        for (k, core) in self.cores.iter().enumerate() {
            let s = core.slice(ri[k]);
            let (jd, ro) = (core.j_dim, core.r_out);
            let mut next = vec![0.0; r0 * ro];
            for c in 0..r0 {
                let out = &mut next[c * ro..(c + 1) * ro];
                for a in 0..r {
                    let w = acc[c * r + a];
                    let g = &s[(a * jd + cj[k]) * ro..(a * jd + cj[k] + 1) * ro];
                    for (o, x) in out.iter_mut().zip(g) {
                        *o += w * x;
                    }
                }
            }
            acc = next;
            r = ro;
        }
        Ok((0..r0).map(|c| acc[c * r0 + c]).sum())
    }

    /// Left partial products for row `i`: entry `k` is the contraction of
    /// cores `0..k`, laid out as `(p, c, a)` with `a` (bond `R_k`) fastest,
    /// `c` the open ring index and `p` the partial column index over
    /// `j_1..j_k` (j_1 fastest). Entry 0 is the identity with `p = 0`.
    fn left_partials(&self, ri: &[usize], keep_all: bool) -> Vec<Vec<f64>> {
        let r0 = self.closure();
        let mut out = Vec::with_capacity(if keep_all { self.n() + 1 } else { 1 });
        let mut acc: Vec<f64> = (0..r0 * r0).map(|x| if x / r0 == x % r0 { 1.0 } else { 0.0 }).collect();
        let mut p_len = 1;
        for (k, core) in self.cores.iter().enumerate() {
            let s = core.slice(ri[k]);
            let (r, jd, ro) = (core.r_in, core.j_dim, core.r_out);
            let mut next = vec![0.0; p_len * jd * r0 * ro];
            for jk in 0..jd {
                for p in 0..p_len {
                    for c in 0..r0 {
                        let src = &acc[(p * r0 + c) * r..(p * r0 + c + 1) * r];
                        let dst_row = (jk * p_len + p) * r0 + c;
                        let dst = &mut next[dst_row * ro..(dst_row + 1) * ro];
                        for (a, &w) in src.iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let g = &s[(a * jd + jk) * ro..(a * jd + jk + 1) * ro];
                            for (o, x) in dst.iter_mut().zip(g) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
            if keep_all {
                out.push(std::mem::replace(&mut acc, next));
            } else {
                acc = next;
            }
            p_len *= jd;
        }
        out.push(acc);
        out
    }

    /// Row `i` of the matrix by a left-to-right sweep over the cores.
    /// Entry `j` corresponds to column digits `(j_1..j_N)` with `j_1`
    /// fastest.
    pub fn row(&self, i: usize) -> Result<Vec<f64>> {
        self.check_row(i)?;
        let ri = self.rows.to_multi(i)?;
        let full = self.left_partials(&ri, false).pop().expect("non-empty");
        Ok(self.close_trace(&full))
    }

    fn close_trace(&self, full: &[f64]) -> Vec<f64> {
        let r0 = self.closure();
        let j = self.plan.cols();
        if r0 == 1 {
            return full.to_vec();
        }
        (0..j)
            .map(|p| (0..r0).map(|c| full[(p * r0 + c) * r0 + c]).sum())
            .collect()
    }

    /// Dense `padded_rows x cols` matrix.
    pub fn materialize(&self) -> Result<DenseMatrix> {
        self.materialize_with_cap(DEFAULT_MATERIALIZE_CAP)
    }

    pub fn materialize_with_cap(&self, cap: usize) -> Result<DenseMatrix> {
        let (rows, cols) = (self.plan.padded_rows(), self.plan.cols());
        let requested = rows.saturating_mul(cols);
        if requested > cap {
            return Err(Error::CapExceeded { requested, cap });
        }
        let mut data = Vec::with_capacity(requested);
        for i in 0..rows {
            data.extend(self.row(i)?);
        }
        DenseMatrix::new(rows, cols, data)
    }

    /// Adds `d/dG sum_j upstream[j] * row(i)[j]` into `grads`, one buffer
    /// per core in [`TtCore::raw`] layout.
    pub(crate) fn accumulate_row_gradient(&self, i: usize, upstream: &[f64], grads: &mut [Vec<f64>]) -> Result<()> {
        self.check_row(i)?;
        if upstream.len() != self.plan.cols() {
            return Err(Error::Shape(format!(
                "upstream has length {}, expected {}",
                upstream.len(),
                self.plan.cols()
            )));
        }
        let ri = self.rows.to_multi(i)?;
        let lefts = self.left_partials(&ri, true);
        let r0 = self.closure();
        let n = self.n();

        // Right partial after core k, layout (b, q, c) with c fastest, b the
        // bond R_k and q the partial column index over j_{k+1}..j_N.
        let mut right: Vec<f64> = (0..r0 * r0).map(|x| if x / r0 == x % r0 { 1.0 } else { 0.0 }).collect();
        let mut q_len = 1;
        let mut p_len: usize = self.plan.cols();

        for k in (0..n).rev() {
            let core = &self.cores[k];
            let (r, jd, ro) = (core.r_in, core.j_dim, core.r_out);
            p_len /= jd;
            let left = &lefts[k];
            let s = core.slice(ri[k]);
            let off = ri[k] * core.slice_len();
            let g = &mut grads[k][off..off + core.slice_len()];

            let mut t = vec![0.0; p_len * ro];
            for jk in 0..jd {
                for c in 0..r0 {
                    // t[p, b] = sum_q u[p + P jk + P J q] * right[b, q, c]
                    t.iter_mut().for_each(|x| *x = 0.0);
                    for q in 0..q_len {
                        let base = p_len * (jk + jd * q);
                        for b in 0..ro {
                            let w = right[(b * q_len + q) * r0 + c];
                            if w == 0.0 {
                                continue;
                            }
                            for p in 0..p_len {
                                t[p * ro + b] += upstream[base + p] * w;
                            }
                        }
                    }
                    // g[a, jk, b] += sum_p left[p, c, a] * t[p, b]
                    for p in 0..p_len {
                        let lrow = &left[(p * r0 + c) * r..(p * r0 + c + 1) * r];
                        let trow = &t[p * ro..(p + 1) * ro];
                        for (a, &lw) in lrow.iter().enumerate() {
                            if lw == 0.0 {
                                continue;
                            }
                            let gs = &mut g[(a * jd + jk) * ro..(a * jd + jk + 1) * ro];
                            for (gx, tx) in gs.iter_mut().zip(trow) {
                                *gx += lw * tx;
                            }
                        }
                    }
                }
            }

            if k > 0 {
                let new_q = jd * q_len;
                let mut next = vec![0.0; r * new_q * r0];
                for a in 0..r {
                    for jk in 0..jd {
                        let gs = &s[(a * jd + jk) * ro..(a * jd + jk + 1) * ro];
                        for q in 0..q_len {
                            let dst = (a * new_q + jk + jd * q) * r0;
                            for (b, &gv) in gs.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let src = (b * q_len + q) * r0;
                                for c in 0..r0 {
                                    next[dst + c] += gv * right[src + c];
                                }
                            }
                        }
                    }
                }
                right = next;
                q_len = new_q;
            }
        }
        Ok(())
    }
}

/// Parameter accounting for a compressed matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionStats {
    /// `sum_k R_{k-1} I_k J_k R_k`
    pub tt_params: u64,
    /// `padded_rows * cols`
    pub dense_params: u64,
    /// `dense_params / tt_params`
    pub ratio: f64,
    /// `dense_params / (2 * tt_params)`: embedding and softmax compressed
    /// separately but sharing one dense matrix in the baseline.
    pub tied_ratio: f64,
}

impl CompressionStats {
    pub fn new(tt_params: u64, dense_params: u64) -> Self {
        // Both counts are exact in f64 below 2^53, so each ratio is a
        // single correctly-rounded division.
        Self {
            tt_params,
            dense_params,
            ratio: dense_params as f64 / tt_params as f64,
            tied_ratio: dense_params as f64 / (2 * tt_params) as f64,
        }
    }
}

/// A TT-matrix: a [`CoreChain`] with open ends (`R_0 = R_N = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct TtMatrix {
    chain: CoreChain,
}

impl TtMatrix {
    pub fn new(cores: Vec<TtCore>, plan: FactorizationPlan) -> Result<Self> {
        if cores.first().is_some_and(|c| c.r_in != 1) || cores.last().is_some_and(|c| c.r_out != 1) {
            return Err(Error::Shape("TT boundary ranks must be 1".into()));
        }
        Ok(Self {
            chain: CoreChain::new(cores, plan)?,
        })
    }

    /// The Kronecker-delta network: `G_k[0, i, j, 0] = [i == j]` and zero in
    /// every other bond position. The matrix entry is 1 exactly when all
    /// digit pairs agree, so square shapes give the identity.
    pub fn kronecker_delta(plan: &FactorizationPlan) -> Result<Self> {
        let bonds = plan.bond_dims();
        let cores = (0..plan.n())
            .map(|k| {
                TtCore::from_fn(
                    [bonds[k], plan.row_factors()[k], plan.col_factors()[k], bonds[k + 1]],
                    |a, i, j, b| if a == 0 && b == 0 && i == j { 1.0 } else { 0.0 },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cores, plan.clone())
    }

    pub fn chain(&self) -> &CoreChain {
        &self.chain
    }

    pub(crate) fn chain_mut(&mut self) -> &mut CoreChain {
        &mut self.chain
    }

    pub fn into_chain(self) -> CoreChain {
        self.chain
    }

    pub fn cores(&self) -> &[TtCore] {
        self.chain.cores()
    }

    pub fn plan(&self) -> &FactorizationPlan {
        self.chain.plan()
    }

    pub fn element(&self, i: usize, j: usize) -> Result<f64> {
        self.chain.element(i, j)
    }

    pub fn row(&self, i: usize) -> Result<Vec<f64>> {
        self.chain.row(i)
    }

    pub fn materialize(&self) -> Result<DenseMatrix> {
        self.chain.materialize()
    }

    pub fn materialize_with_cap(&self, cap: usize) -> Result<DenseMatrix> {
        self.chain.materialize_with_cap(cap)
    }

    pub fn stats(&self) -> CompressionStats {
        self.chain.stats()
    }
}

fn normal_cores(bonds: &[usize], plan: &FactorizationPlan, std: f64, seed: u64) -> Result<Vec<TtCore>> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!("std must be positive and finite, got {std}")));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..plan.n())
        .map(|k| {
            let dims = [bonds[k], plan.row_factors()[k], plan.col_factors()[k], bonds[k + 1]];
            // Draw in file order so the stream is independent of memory layout.
            let values: Vec<f64> = (0..dims.iter().product::<usize>()).map(|_| normal.sample(&mut rng)).collect();
            TtCore::from_row_major(dims, &values)
        })
        .collect()
}

pub(crate) fn random_chain(plan: &FactorizationPlan, closure: usize, std: f64, seed: u64) -> Result<CoreChain> {
    if closure == 0 {
        return Err(Error::InvalidArgument("closure rank must be >= 1".into()));
    }
    let mut bonds = plan.bond_dims();
    bonds[0] = closure;
    *bonds.last_mut().expect("n >= 1") = closure;
    CoreChain::new(normal_cores(&bonds, plan, std, seed)?, plan.clone())
}

/// Every core entry i.i.d. `Normal(0, std^2)` from a ChaCha8 stream seeded
/// with `seed`.
pub fn random_tt(plan: &FactorizationPlan, std: f64, seed: u64) -> Result<TtMatrix> {
    Ok(TtMatrix {
        chain: random_chain(plan, 1, std, seed)?,
    })
}

/// Glorot variance for the padded matrix, `2 / (I~ + J)`.
pub fn glorot_variance(plan: &FactorizationPlan) -> f64 {
    2.0 / (plan.padded_rows() + plan.cols()) as f64
}

/// Per-core variance `(sigma / Sigma)^(2/N)` giving entry variance
/// `sigma^2`, where `Sigma^2` is the number of bond paths: the product of
/// every core's `r_in` (for TT this is `prod R_k`, for a ring it includes
/// the closure bond).
pub fn calibrated_core_variance(plan: &FactorizationPlan, closure: usize, sigma: f64) -> f64 {
    let paths: f64 = closure as f64 * plan.ranks().iter().map(|&r| r as f64).product::<f64>();
    (sigma * sigma / paths).powf(1.0 / plan.n() as f64)
}

/// [`random_tt`] with core variance calibrated to entry variance
/// `2 / (I~ + J)`.
pub fn glorot_tt(plan: &FactorizationPlan, seed: u64) -> Result<TtMatrix> {
    glorot_tt_with_sigma(plan, glorot_variance(plan).sqrt(), seed)
}

/// [`glorot_tt`] with an explicit target standard deviation `sigma`.
pub fn glorot_tt_with_sigma(plan: &FactorizationPlan, sigma: f64, seed: u64) -> Result<TtMatrix> {
    random_tt(plan, calibrated_core_variance(plan, 1, sigma).sqrt(), seed)
}

/// Compresses a dense `padded_rows x cols` matrix by sequential truncated
/// SVDs. Ranks are capped by the plan and by the numerical rank of each
/// unfolding (cutoff [`TT_SVD_TOL`]); the returned plan carries the ranks
/// actually used.
pub fn tt_svd(m: &DenseMatrix, plan: &FactorizationPlan) -> Result<TtMatrix> {
    if m.rows() != plan.padded_rows() || m.cols() != plan.cols() {
        return Err(Error::Shape(format!(
            "matrix is {}x{}, plan expects {}x{}",
            m.rows(),
            m.cols(),
            plan.padded_rows(),
            plan.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("tt_svd input".into()));
    }
    let n = plan.n();
    let (rf, cf) = (plan.row_factors(), plan.col_factors());
    let rows = MixedRadix::new(rf)?;
    let cols = MixedRadix::new(cf)?;
    let modes: Vec<usize> = rf.iter().zip(cf).map(|(i, j)| i * j).collect();

    // N-way tensor with mode k indexed by (i_k, j_k) -> i_k + I_k j_k,
    // column-major over the modes.
    let mut tensor = vec![0.0; m.rows() * m.cols()];
    let mut ri = vec![0; n];
    let mut cj = vec![0; n];
    for i in 0..m.rows() {
        rows.to_multi_into(i, &mut ri)?;
        for j in 0..m.cols() {
            cols.to_multi_into(j, &mut cj)?;
            let mut off = 0;
            let mut stride = 1;
            for k in 0..n {
                off += (ri[k] + rf[k] * cj[k]) * stride;
                stride *= modes[k];
            }
            tensor[off] = m.get(i, j);
        }
    }

    let mut cores = Vec::with_capacity(n);
    let mut ranks = Vec::with_capacity(n.saturating_sub(1));
    let mut rest = tensor;
    let mut r_prev = 1;
    for k in 0..n - 1 {
        let unf_rows = r_prev * modes[k];
        let unf_cols = rest.len() / unf_rows;
        let unfolding = DenseMatrix::from_col_major(unf_rows, unf_cols, &rest)?;
        let dec = svd(&unfolding)?;
        let numerical = rank_from_singular_values(&dec.singular_values, TT_SVD_TOL, unf_rows.max(unf_cols));
        let r = plan.ranks()[k].min(numerical).min(dec.singular_values.len());
        let (core, next) = if r == 0 {
            (TtCore::zeros(r_prev, rf[k], cf[k], 1)?, vec![0.0; unf_cols])
        } else {
            let core = TtCore::from_fn([r_prev, rf[k], cf[k], r], |a, i, j, b| {
                dec.u.get(a + r_prev * (i + rf[k] * j), b)
            })?;
            let mut next = vec![0.0; r * unf_cols];
            for q in 0..unf_cols {
                for b in 0..r {
                    next[b + r * q] = dec.singular_values[b] * dec.vt.get(b, q);
                }
            }
            (core, next)
        };
        let r = r.max(1);
        cores.push(core);
        ranks.push(r);
        rest = next;
        r_prev = r;
    }
    let last = n - 1;
    cores.push(TtCore::from_fn([r_prev, rf[last], cf[last], 1], |a, i, j, _| {
        rest[a + r_prev * (i + rf[last] * j)]
    })?);
    TtMatrix::new(cores, plan.with_ranks(ranks)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::FactorizationPlan;

    fn plan(rows: &[usize], cols: &[usize], ranks: &[usize]) -> FactorizationPlan {
        FactorizationPlan::square_vocab(rows.to_vec(), cols.to_vec(), ranks.to_vec()).unwrap()
    }

    /// Independent oracle: explicit sum over every bond-index tuple.
    fn brute_element(m: &CoreChain, i: usize, j: usize) -> f64 {
        let p = m.plan();
        let ri = MixedRadix::new(p.row_factors()).unwrap().to_multi(i).unwrap();
        let cj = MixedRadix::new(p.col_factors()).unwrap().to_multi(j).unwrap();
        let n = m.n();
        let bonds: Vec<usize> = m.cores().iter().map(|c| c.r_in()).collect();
        let radix = MixedRadix::new(&bonds).unwrap();
        let mut total = 0.0;
        for t in 0..radix.capacity() {
            let r = radix.to_multi(t).unwrap();
            let mut prod = 1.0;
            for k in 0..n {
                prod *= m.cores()[k].get(r[k], ri[k], cj[k], r[(k + 1) % n]);
            }
            total += prod;
        }
        total
    }

    #[test]
    fn all_ones_rank_one() {
        let p = plan(&[2, 3], &[3, 2], &[1]);
        let cores = vec![
            TtCore::from_fn([1, 2, 3, 1], |_, _, _, _| 1.0).unwrap(),
            TtCore::from_fn([1, 3, 2, 1], |_, _, _, _| 1.0).unwrap(),
        ];
        let m = TtMatrix::new(cores, p).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.element(i, j).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn kronecker_delta_is_identity() {
        let p = plan(&[2, 3, 2], &[2, 3, 2], &[3, 2]);
        let m = TtMatrix::kronecker_delta(&p).unwrap();
        let d = m.materialize().unwrap();
        assert_eq!(d, DenseMatrix::identity(12).unwrap());
        let mut e3 = vec![0.0; 12];
        e3[3] = 1.0;
        assert_eq!(m.row(3).unwrap(), e3);
    }

    #[test]
    fn element_row_and_materialize_agree() {
        let p = plan(&[2, 3], &[3, 2], &[2]);
        let m = random_tt(&p, 1.0, 11).unwrap();
        let d = m.materialize().unwrap();
        for i in 0..6 {
            let row = m.row(i).unwrap();
            for j in 0..6 {
                let e = m.element(i, j).unwrap();
                let b = brute_element(m.chain(), i, j);
                assert!((e - b).abs() <= 1e-12 * b.abs().max(1e-300), "{e} vs {b}");
                assert!((row[j] - e).abs() <= 1e-12 * e.abs());
                assert_eq!(d.get(i, j), row[j]);
            }
        }
        assert!(m.element(6, 0).is_err());
        assert!(m.element(0, 6).is_err());
        assert!(m.row(6).is_err());
    }

    #[test]
    fn constant_rank_one_cores() {
        let p = plan(&[2, 2, 2], &[2, 3, 2], &[1, 1]);
        let consts = [2.0, -0.5, 3.0];
        let cores = (0..3)
            .map(|k| TtCore::from_fn([1, 2, p.col_factors()[k], 1], |_, _, _, _| consts[k]).unwrap())
            .collect();
        let m = TtMatrix::new(cores, p).unwrap();
        assert_eq!(m.row(5).unwrap(), vec![-3.0; 12]);
    }

    #[test]
    fn single_core_is_the_dense_matrix() {
        let p = plan(&[3], &[4], &[]);
        let m = random_tt(&p, 1.0, 2).unwrap();
        let d = m.materialize().unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(d.get(i, j).to_bits(), m.cores()[0].get(0, i, j, 0).to_bits());
            }
        }
    }

    #[test]
    fn materialize_cap() {
        let p = plan(&[4, 4], &[4, 4], &[2]);
        let m = random_tt(&p, 1.0, 2).unwrap();
        assert_eq!(
            m.materialize_with_cap(255),
            Err(Error::CapExceeded { requested: 256, cap: 255 })
        );
        assert!(m.materialize_with_cap(256).is_ok());
    }

    #[test]
    fn validation() {
        let p = plan(&[2, 2], &[2, 2], &[2]);
        let bad_chain = vec![TtCore::zeros(1, 2, 2, 2).unwrap(), TtCore::zeros(3, 2, 2, 1).unwrap()];
        assert!(TtMatrix::new(bad_chain, p.clone()).is_err());
        let bad_boundary = vec![TtCore::zeros(2, 2, 2, 2).unwrap(), TtCore::zeros(2, 2, 2, 2).unwrap()];
        assert!(TtMatrix::new(bad_boundary, p.clone()).is_err());
        let mut nan = TtCore::zeros(1, 2, 2, 2).unwrap();
        nan.set(0, 1, 1, 1, f64::NAN);
        assert!(TtMatrix::new(vec![nan, TtCore::zeros(2, 2, 2, 1).unwrap()], p).is_err());
    }

    #[test]
    fn core_layout_conversions() {
        let c = TtCore::from_fn([2, 3, 2, 4], |a, i, j, b| (1000 * a + 100 * i + 10 * j + b) as f64).unwrap();
        let rm = c.to_row_major();
        assert_eq!(rm[1], 1.0);
        assert_eq!(rm[4], 10.0);
        assert_eq!(TtCore::from_row_major(c.dims(), &rm).unwrap(), c);
        let t = c.to_tensor();
        assert_eq!(t.get(&[1, 2, 1, 3]).unwrap(), 1213.0);
        assert_eq!(TtCore::from_tensor(&t).unwrap(), c);
    }

    #[test]
    fn random_is_seeded() {
        let p = plan(&[2, 3], &[2, 2], &[3]);
        assert_eq!(random_tt(&p, 1.0, 5).unwrap(), random_tt(&p, 1.0, 5).unwrap());
        assert_ne!(random_tt(&p, 1.0, 5).unwrap(), random_tt(&p, 1.0, 6).unwrap());
        assert!(random_tt(&p, 0.0, 5).is_err());
        assert!(random_tt(&p, -1.0, 5).is_err());
        assert!(random_tt(&p, f64::NAN, 5).is_err());
    }

    #[test]
    fn calibrated_variance() {
        let p = plan(&[5, 5, 5, 5], &[5, 5, 5, 5], &[4, 4, 4]);
        let v = calibrated_core_variance(&p, 1, 1.0);
        assert!((v - 2f64.powf(-1.5)).abs() < 1e-15);
        assert!((v - 0.353553).abs() < 1e-6);
        let dense = plan(&[7], &[3], &[]);
        assert_eq!(calibrated_core_variance(&dense, 1, 0.3), 0.3 * 0.3);
        assert!((glorot_variance(&dense) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn stats_arithmetic() {
        let s = random_tt(&plan(&[8, 8, 8], &[8, 8, 8], &[16, 16]), 1.0, 0).unwrap().stats();
        assert_eq!(s.tt_params, 18432);
        assert_eq!(s.dense_params, 262144);
        assert!((s.ratio - 262144.0 / 18432.0).abs() < 1e-15);
        assert!((s.ratio - 14.222222222222221).abs() < 1e-12);

        let s = random_tt(&plan(&[4, 4], &[4, 4], &[1]), 1.0, 0).unwrap().stats();
        assert_eq!((s.tt_params, s.dense_params, s.ratio), (32, 256, 8.0));

        let s = random_tt(&plan(&[9], &[5], &[]), 1.0, 0).unwrap().stats();
        assert_eq!((s.ratio, s.tied_ratio), (1.0, 0.5));
    }

    #[test]
    fn tt_svd_roundtrip_and_zero() {
        let p = plan(&[2, 3, 2], &[2, 2, 3], &[3, 3]);
        let m = random_tt(&p, 1.0, 1).unwrap();
        let d = m.materialize().unwrap();
        let back = tt_svd(&d, &p).unwrap();
        assert!(back.plan().ranks().iter().zip(p.ranks()).all(|(a, b)| a <= b));
        assert!(back.materialize().unwrap().relative_error(&d).unwrap() < 1e-10);

        let z = DenseMatrix::zeros(12, 12).unwrap();
        let zt = tt_svd(&z, &p).unwrap();
        assert!(zt.cores().iter().all(|c| c.raw().iter().all(|&x| x == 0.0)));
        assert_eq!(zt.materialize().unwrap(), z);

        assert!(tt_svd(&DenseMatrix::zeros(11, 12).unwrap(), &p).is_err());
    }

    #[test]
    fn tt_svd_full_rank_is_lossless() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d = DenseMatrix::from_fn(64, 64, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let p = plan(&[4, 4, 4], &[4, 4, 4], &[16, 16]);
        let t = tt_svd(&d, &p).unwrap();
        assert!(t.materialize().unwrap().relative_error(&d).unwrap() < 1e-10);
    }
}
