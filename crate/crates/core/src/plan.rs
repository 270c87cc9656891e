//! Choosing TT-shapes for an embedding matrix.
//!
//! Factors are picked to be as balanced as possible. The search is exhaustive
//! over candidate products `s` (the exact size, or `size..=size * 6/5` when
//! padding is allowed) and over nondecreasing divisor tuples of each `s`,
//! ordered by
//!
//! 1. imbalance `max - min`,
//! 2. product (less padding wins),
//! 3. lexicographically smallest factor list.

use crate::error::{Error, Result};

/// Padding slack: candidate products range over `size..=size + size / 5`.
pub const PADDING_SLACK_DIVISOR: usize = 5;

/// TT-ranks for a plan, either one value for every bond or one per bond.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankSpec {
    Uniform(usize),
    PerBond(Vec<usize>),
}

impl RankSpec {
    /// Bond ranks `R_1..R_{n-1}` for an `n`-core network.
    pub fn resolve(&self, n: usize) -> Result<Vec<usize>> {
        let bonds = n.saturating_sub(1);
        let ranks = match self {
            RankSpec::Uniform(r) => vec![*r; bonds],
            RankSpec::PerBond(v) => {
                if v.len() != bonds {
                    return Err(Error::InvalidArgument(format!(
                        "{} ranks given for {n} cores (need {bonds})",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if ranks.contains(&0) {
            return Err(Error::InvalidArgument("ranks must be >= 1".into()));
        }
        Ok(ranks)
    }
}

impl From<usize> for RankSpec {
    fn from(r: usize) -> Self {
        RankSpec::Uniform(r)
    }
}

impl From<Vec<usize>> for RankSpec {
    fn from(v: Vec<usize>) -> Self {
        RankSpec::PerBond(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorizationPlan {
    row_factors: Vec<usize>,
    col_factors: Vec<usize>,
    vocab: usize,
    padded_rows: usize,
    cols: usize,
    ranks: Vec<usize>,
}

impl FactorizationPlan {
    /// Validates a hand-specified shape. Unlike [`plan_embedding`], factors of
    /// 1 are accepted here so that degenerate shapes can be built directly.
    pub fn new(
        row_factors: Vec<usize>,
        col_factors: Vec<usize>,
        ranks: Vec<usize>,
        vocab: usize,
    ) -> Result<Self> {
        let n = row_factors.len();
        if n == 0 || col_factors.len() != n {
            return Err(Error::Shape(format!(
                "row factors {row_factors:?} and column factors {col_factors:?} must be equally long and non-empty"
            )));
        }
        if ranks.len() != n - 1 {
            return Err(Error::Shape(format!("{n} cores need {} ranks, got {:?}", n - 1, ranks)));
        }
        if row_factors.contains(&0) || col_factors.contains(&0) || ranks.contains(&0) {
            return Err(Error::InvalidArgument("factors and ranks must be >= 1".into()));
        }
        let prod = |v: &[usize]| {
            v.iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .ok_or_else(|| Error::InvalidArgument(format!("product of {v:?} overflows")))
        };
        let padded_rows = prod(&row_factors)?;
        let cols = prod(&col_factors)?;
        if vocab == 0 || vocab > padded_rows {
            return Err(Error::InvalidArgument(format!(
                "vocab {vocab} must be in 1..={padded_rows}"
            )));
        }
        Ok(Self {
            row_factors,
            col_factors,
            vocab,
            padded_rows,
            cols,
            ranks,
        })
    }

    /// Same shape with the served vocabulary equal to the padded row count.
    pub fn square_vocab(row_factors: Vec<usize>, col_factors: Vec<usize>, ranks: Vec<usize>) -> Result<Self> {
        let vocab = row_factors.iter().product();
        Self::new(row_factors, col_factors, ranks, vocab)
    }

    pub fn with_ranks(&self, ranks: Vec<usize>) -> Result<Self> {
        Self::new(self.row_factors.clone(), self.col_factors.clone(), ranks, self.vocab)
    }

    pub fn n(&self) -> usize {
        self.row_factors.len()
    }

    pub fn row_factors(&self) -> &[usize] {
        &self.row_factors
    }

    pub fn col_factors(&self) -> &[usize] {
        &self.col_factors
    }

    /// Requested (served) row count `I`.
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// `prod(row_factors) >= vocab`.
    pub fn padded_rows(&self) -> usize {
        self.padded_rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    /// Bond dimensions including the open ends, `(1, R_1, .., R_{N-1}, 1)`.
    pub fn bond_dims(&self) -> Vec<usize> {
        let mut b = Vec::with_capacity(self.n() + 1);
        b.push(1);
        b.extend_from_slice(&self.ranks);
        b.push(1);
        b
    }

    /// Core parameter count for a chain with this plan, closing bond
    /// `closure` (1 for TT).
    pub fn tt_params(&self, closure: usize) -> u64 {
        let mut bonds = self.bond_dims();
        bonds[0] = closure;
        bonds[self.n()] = closure;
        (0..self.n())
            .map(|k| (bonds[k] * self.row_factors[k] * self.col_factors[k] * bonds[k + 1]) as u64)
            .sum()
    }
}

/// Balanced `n`-way factorization of `size`; see the module docs for the
/// ordering. Returned factors are ascending and all `>= 2` when `n >= 2`.
///
/// With padding allowed, if no product in `size..=size * 6/5` admits `n`
/// factors `>= 2` (only possible for small sizes), the range is extended up
/// to the first product that does.
pub fn factorize_balanced(size: usize, n: usize, allow_padding: bool) -> Result<Vec<usize>> {
    if size == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "size and n must be >= 1 (got size={size}, n={n})"
        )));
    }
    if n == 1 {
        return Ok(vec![size]);
    }
    let hi = if allow_padding {
        size.saturating_add(size / PADDING_SLACK_DIVISOR)
    } else {
        size
    };
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut s = size;
    loop {
        if s > hi && (best.is_some() || !allow_padding) {
            break;
        }
        let bound = best.as_ref().map(|(imb, _)| *imb);
        if bound == Some(0) {
            break;
        }
        if let Some(found) = best_tuple_for_product(s, n, bound) {
            best = Some(found);
        }
        s = match s.checked_add(1) {
            Some(v) => v,
            None => break,
        };
    }
    best.map(|(_, t)| t)
        .ok_or(Error::NoFactorization { size, n })
}

/// Lexicographically first nondecreasing tuple of `n` factors `>= 2` with
/// product `s` and minimal imbalance, restricted to imbalance `< bound`.
fn best_tuple_for_product(s: usize, n: usize, bound: Option<usize>) -> Option<(usize, Vec<usize>)> {
    let mut search = ProductSearch {
        bound,
        best: None,
        cur: Vec::with_capacity(n),
    };
    let root_floor = iroot(s, n as u32);
    let root_ceil = if root_floor.checked_pow(n as u32) == Some(s) {
        root_floor
    } else {
        root_floor + 1
    };
    let start = bound.map_or(2, |b| (root_ceil + 1).saturating_sub(b).max(2));
    for a in start..=root_floor {
        if !s.is_multiple_of(a) {
            continue;
        }
        // max factor >= ceil(s^(1/n)), so imbalance >= root_ceil - a
        if let Some(b) = search.bound {
            if root_ceil >= a + b {
                continue;
            }
        }
        search.cur.clear();
        search.cur.push(a);
        search.descend(s / a, n - 1, a, a);
    }
    search.best
}

struct ProductSearch {
    /// Strict upper bound on acceptable imbalance.
    bound: Option<usize>,
    best: Option<(usize, Vec<usize>)>,
    cur: Vec<usize>,
}

impl ProductSearch {
    fn descend(&mut self, rem: usize, k: usize, prev: usize, first: usize) {
        let fits = |f: usize, bound: Option<usize>| bound.is_none_or(|b| f < first + b);
        if k == 1 {
            if rem >= prev && fits(rem, self.bound) {
                let imb = rem - first;
                let mut t = self.cur.clone();
                t.push(rem);
                self.best = Some((imb, t));
                self.bound = Some(imb);
            }
            return;
        }
        let top = iroot(rem, k as u32);
        for f in prev..=top {
            if !fits(f, self.bound) {
                break;
            }
            if !rem.is_multiple_of(f) {
                continue;
            }
            self.cur.push(f);
            self.descend(rem / f, k - 1, f, first);
            self.cur.pop();
        }
    }
}

fn pow_le(base: usize, exp: u32, limit: usize) -> bool {
    base.checked_pow(exp).is_some_and(|p| p <= limit)
}

/// `floor(x^(1/k))`.
fn iroot(x: usize, k: u32) -> usize {
    if k == 1 {
        return x;
    }
    let mut r = (x as f64).powf(1.0 / k as f64).round() as usize;
    while r > 0 && !pow_le(r, k, x) {
        r -= 1;
    }
    while pow_le(r + 1, k, x) {
        r += 1;
    }
    r
}

/// Plans an `n`-core TT-matrix for a `vocab x dim` embedding. Rows may be
/// padded; `dim` must factor exactly into `n` factors `>= 2`.
pub fn plan_embedding(vocab: usize, dim: usize, n: usize, ranks: impl Into<RankSpec>) -> Result<FactorizationPlan> {
    if vocab == 0 || dim == 0 {
        return Err(Error::InvalidArgument("vocab and dim must be >= 1".into()));
    }
    let ranks = ranks.into().resolve(n)?;
    let rows = factorize_balanced(vocab, n, true)?;
    let cols = factorize_balanced(dim, n, false)?;
    FactorizationPlan::new(rows, cols, ranks, vocab)
}
