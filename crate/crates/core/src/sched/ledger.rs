use thiserror::Error;

use crate::app::ItemKey;
use crate::util::pairs_of;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("pair ({0}, {1}) completed twice")]
    Duplicate(ItemKey, ItemKey),
    #[error("pair ({0}, {1}) is not a valid pair")]
    Invalid(ItemKey, ItemKey),
}

/// Bitmap over the C(n, 2) pairs; catches duplicates and detects completion.
#[derive(Clone, Debug)]
pub struct CompletionLedger {
    n: u64,
    bits: Vec<u64>,
    done: u64,
}

impl CompletionLedger {
    pub fn new(n: usize) -> Self {
        let total = pairs_of(n as u64);
        CompletionLedger {
            n: n as u64,
            bits: vec![0; total.div_ceil(64) as usize],
            done: 0,
        }
    }

    /// Row-major index of `(i, j)` in the strict upper triangle.
    pub fn index_of(&self, i: ItemKey, j: ItemKey) -> Option<u64> {
        let (i, j) = (i.0 as u64, j.0 as u64);
        if i >= j || j >= self.n {
            return None;
        }
        Some(i * (2 * self.n - i - 1) / 2 + (j - i - 1))
    }

    pub fn record(&mut self, i: ItemKey, j: ItemKey) -> Result<(), LedgerError> {
        let idx = self.index_of(i, j).ok_or(LedgerError::Invalid(i, j))?;
        let (w, b) = ((idx / 64) as usize, idx % 64);
        if self.bits[w] & (1 << b) != 0 {
            return Err(LedgerError::Duplicate(i, j));
        }
        self.bits[w] |= 1 << b;
        self.done += 1;
        Ok(())
    }

    pub fn contains(&self, i: ItemKey, j: ItemKey) -> bool {
        self.index_of(i, j)
            .map(|idx| self.bits[(idx / 64) as usize] & (1 << (idx % 64)) != 0)
            .unwrap_or(false)
    }

    pub fn completed(&self) -> u64 {
        self.done
    }

    pub fn total(&self) -> u64 {
        pairs_of(self.n)
    }

    pub fn is_full(&self) -> bool {
        self.done == self.total()
    }
}
