//! Knowledge-preserving stretch of a learned absolute positional table.
//!
//! The first `keep` rows are copied verbatim. Every later output row `p`
//! samples the source table at `s = keep + (p − keep) / factor` with
//! linear interpolation between rows `⌊s⌋` and `⌈s⌉` (the upper index is
//! clamped to the last row), so a table of length `L` becomes
//! `keep + (L − keep) · factor` long. With CLIP's 77-slot table, `keep = 20`
//! and `factor = 4` this yields 248 positions.

use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

pub const DEFAULT_KEEP: usize = 20;
pub const DEFAULT_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionalTable {
    entries: Matrix,
}

impl PositionalTable {
    pub fn new(entries: Matrix) -> Result<Self> {
        if entries.rows() == 0 {
            return Err(Error::InvalidParameter("positional table needs at least one row".into()));
        }
        if !entries.is_finite() {
            return Err(Error::NonFinite("positional table"));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Matrix {
        &mut self.entries
    }

    pub fn into_matrix(self) -> Matrix {
        self.entries
    }
}

/// Output length of [`stretch`] for a table of `len` rows.
pub fn stretched_len(len: usize, keep: usize, factor: usize) -> usize {
    keep + (len - keep) * factor
}

pub fn stretch(pe: &PositionalTable, keep: usize, factor: usize) -> Result<PositionalTable> {
    let len = pe.len();
    if keep >= len {
        return Err(Error::NothingToStretch);
    }
    if factor == 0 {
        return Err(Error::InvalidParameter("stretch factor must be at least 1".into()));
    }
    let src = pe.entries();
    let out_len = stretched_len(len, keep, factor);
    let mut out = Matrix::zeros(out_len, pe.dim());
    for p in 0..keep {
        out.row_mut(p).copy_from_slice(src.row(p));
    }
    for p in keep..out_len {
        let m = p - keep;
        let lo = keep + m / factor;
        let rem = m % factor;
        if rem == 0 {
            out.row_mut(p).copy_from_slice(src.row(lo));
            continue;
        }
        let w = rem as f64 / factor as f64;
        let hi = (lo + 1).min(len - 1);
        let (a, b) = (src.row(lo), src.row(hi));
        for ((o, &x), &y) in out.row_mut(p).iter_mut().zip(a).zip(b) {
            *o = (1.0 - w) * x + w * y;
        }
    }
    PositionalTable::new(out)
}
