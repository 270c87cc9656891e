//! Tensor Ring matrices: the TT chain closed into a loop. The first core's
//! input bond and the last core's output bond share one index `r_0` of size
//! `R`, summed over, so each entry is the trace of the slice product.

use crate::error::{Error, Result};
use crate::plan::FactorizationPlan;
use crate::tensor::DenseMatrix;
use crate::tt::{calibrated_core_variance, random_chain, CompressionStats, CoreChain, TtCore, TtMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct TrMatrix {
    chain: CoreChain,
}

impl TrMatrix {
    /// `plan.ranks()` are the interior bonds; the closure rank is read from
    /// the first core.
    pub fn new(cores: Vec<TtCore>, plan: FactorizationPlan) -> Result<Self> {
        Ok(Self {
            chain: CoreChain::new(cores, plan)?,
        })
    }

    /// Cores `G_k[a, i, j, b] = [a == b][i == j]` with every bond equal to
    /// `closure`; the matrix is `closure` times the identity on square shapes.
    pub fn delta_identity(row_factors: Vec<usize>, col_factors: Vec<usize>, closure: usize) -> Result<Self> {
        let n = row_factors.len();
        let plan = FactorizationPlan::square_vocab(row_factors, col_factors, vec![closure; n.saturating_sub(1)])?;
        let cores = (0..n)
            .map(|k| {
                TtCore::from_fn(
                    [closure, plan.row_factors()[k], plan.col_factors()[k], closure],
                    |a, i, j, b| if a == b && i == j { 1.0 } else { 0.0 },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cores, plan)
    }

    pub fn chain(&self) -> &CoreChain {
        &self.chain
    }

    pub(crate) fn chain_mut(&mut self) -> &mut CoreChain {
        &mut self.chain
    }

    pub fn cores(&self) -> &[TtCore] {
        self.chain.cores()
    }

    pub fn plan(&self) -> &FactorizationPlan {
        self.chain.plan()
    }

    pub fn closure_rank(&self) -> usize {
        self.chain.closure()
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

    pub fn stats(&self) -> CompressionStats {
        self.chain.stats()
    }

    /// Rotates the cores left by `s` (mod N). Entry `(i', j')` of the result
    /// equals entry `(i, j)` of `self` when the digits of `i'`, `j'` are the
    /// digits of `i`, `j` rotated left by `s`.
    pub fn circular_shift(&self, s: usize) -> Result<Self> {
        let n = self.chain.n();
        let s = s % n;
        if s == 0 {
            return Ok(self.clone());
        }
        let rot = |v: &[usize]| -> Vec<usize> { v[s..].iter().chain(&v[..s]).copied().collect() };
        let cores: Vec<TtCore> = self.cores()[s..].iter().chain(&self.cores()[..s]).cloned().collect();
        let ranks: Vec<usize> = cores[..n - 1].iter().map(|c| c.r_out()).collect();
        let p = self.plan();
        let plan = FactorizationPlan::new(rot(p.row_factors()), rot(p.col_factors()), ranks, p.vocab())?;
        Self::new(cores, plan)
    }

    /// Closure rank 1 is exactly a TT-matrix.
    pub fn into_tt(self) -> Result<TtMatrix> {
        if self.closure_rank() != 1 {
            return Err(Error::Shape(format!(
                "closure rank {} is not 1",
                self.closure_rank()
            )));
        }
        let plan = self.chain.plan().clone();
        TtMatrix::new(self.chain.into_cores(), plan)
    }
}

impl From<TtMatrix> for TrMatrix {
    fn from(m: TtMatrix) -> Self {
        Self { chain: m.into_chain() }
    }
}

/// Ring with every core entry i.i.d. `Normal(0, std^2)`.
pub fn random_tr(plan: &FactorizationPlan, closure: usize, std: f64, seed: u64) -> Result<TrMatrix> {
    Ok(TrMatrix {
        chain: random_chain(plan, closure, std, seed)?,
    })
}

/// Ring with core variance calibrated so entries have variance `sigma^2`.
pub fn glorot_tr_with_sigma(plan: &FactorizationPlan, closure: usize, sigma: f64, seed: u64) -> Result<TrMatrix> {
    random_tr(plan, closure, calibrated_core_variance(plan, closure, sigma).sqrt(), seed)
}
