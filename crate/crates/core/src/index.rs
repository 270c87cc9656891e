//! Mixed-radix bijections between flat indices and multi-indices.
//!
//! Digit `0` is the least significant: with radices `(I_1, .., I_N)` the flat
//! index is `i = i_1 + I_1 * i_2 + I_1 I_2 * i_3 + ...`. This fixes which
//! vocabulary rows share core slices, and which embedding columns a core
//! slice writes to.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedRadix {
    factors: Vec<usize>,
    strides: Vec<usize>,
    capacity: usize,
}

impl MixedRadix {
    pub fn new(factors: &[usize]) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidArgument("mixed radix needs at least one factor".into()));
        }
        if factors.contains(&0) {
            return Err(Error::InvalidArgument(format!("factors must be >= 1: {factors:?}")));
        }
        let mut strides = Vec::with_capacity(factors.len());
        let mut acc = 1usize;
        for &f in factors {
            strides.push(acc);
            acc = acc
                .checked_mul(f)
                .ok_or_else(|| Error::InvalidArgument(format!("capacity of {factors:?} overflows")))?;
        }
        Ok(Self {
            factors: factors.to_vec(),
            strides,
            capacity: acc,
        })
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Flat index to digits, most significant digit peeled first.
    pub fn to_multi(&self, i: usize) -> Result<Vec<usize>> {
        let mut out = vec![0; self.factors.len()];
        self.to_multi_into(i, &mut out)?;
        Ok(out)
    }

    pub fn to_multi_into(&self, mut i: usize, out: &mut [usize]) -> Result<()> {
        if i >= self.capacity {
            return Err(Error::IndexOutOfRange {
                index: i,
                extent: self.capacity,
            });
        }
        debug_assert_eq!(out.len(), self.factors.len());
        for k in (0..self.factors.len()).rev() {
            out[k] = i / self.strides[k];
            i %= self.strides[k];
        }
        Ok(())
    }

    pub fn from_multi(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.factors.len() {
            return Err(Error::Shape(format!(
                "multi-index of length {} for {} factors",
                idx.len(),
                self.factors.len()
            )));
        }
        let mut i = 0;
        for ((&d, &f), &s) in idx.iter().zip(&self.factors).zip(&self.strides) {
            if d >= f {
                return Err(Error::IndexOutOfRange { index: d, extent: f });
            }
            i += d * s;
        }
        Ok(i)
    }
}
