//! Chord-protocol sparsity patterns.
//!
//! Node `i` of a ring of size `N` links to itself and to nodes at
//! power-of-two offsets `(i + 2^k) mod N`. The pattern fixes the stored
//! positions of every factor in a chain; a stored position may hold an
//! explicit zero and still counts toward the non-zero budget.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfError};

/// Which range of power-of-two offsets a row links to.
///
/// `PaperLiteral` stops at offset `2^(K-2)`, giving `log2 N` stored entries
/// per row but leaving some products structurally zero even after `log2 N`
/// hops. `FullCoverage` extends the offsets far enough that the `log2 N`-hop
/// product is structurally full; it is the default everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternMode {
    PaperLiteral,
    FullCoverage,
}

/// Per-row sorted column indices of a Chord-structured square matrix.
///
/// Immutable after construction; safe to share read-only across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    n: usize,
    k_exp: usize,
    mode: PatternMode,
    /// Non-zero ring offsets in slot order (increasing powers of two, mod n,
    /// deduplicated). The diagonal (offset 0) is implicit as slot 0.
    offsets: Vec<usize>,
    /// Ascending column indices per row.
    rows: Vec<Vec<usize>>,
    /// Prefix sums of row degrees, length n + 1.
    row_starts: Vec<usize>,
}

fn ceil_log2(n: usize) -> usize {
    let mut k = 0;
    while (1usize << k) < n {
        k += 1;
    }
    k
}

/// Build the Chord pattern for an `n x n` matrix.
pub fn build_pattern(n: usize, mode: PatternMode) -> Result<SparsityPattern> {
    if n < 2 {
        return Err(SfError::InvalidDimension(format!(
            "pattern side must be at least 2, got {n}"
        )));
    }
    let k_exp = ceil_log2(n);
    let k_max = match mode {
        // offsets 2^0 .. 2^(K-2)
        PatternMode::PaperLiteral => k_exp.saturating_sub(2),
        // offsets 2^0 .. 2^K mod n; for power-of-two n the top offset wraps
        // onto the diagonal and drops out, leaving 2^0 .. 2^(K-1)
        PatternMode::FullCoverage => k_exp,
    };
    let mut offsets = Vec::new();
    for k in 0..=k_max {
        let off = (1usize << k) % n;
        if off != 0 && !offsets.contains(&off) {
            offsets.push(off);
        }
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut cols: Vec<usize> = std::iter::once(i)
            .chain(offsets.iter().map(|&o| (i + o) % n))
            .collect();
        cols.sort_unstable();
        cols.dedup();
        rows.push(cols);
    }
    Ok(SparsityPattern::from_parts(n, k_exp, mode, offsets, rows))
}

impl SparsityPattern {
    fn from_parts(
        n: usize,
        k_exp: usize,
        mode: PatternMode,
        offsets: Vec<usize>,
        rows: Vec<Vec<usize>>,
    ) -> Self {
        let mut row_starts = Vec::with_capacity(n + 1);
        let mut acc = 0;
        row_starts.push(0);
        for r in &rows {
            acc += r.len();
            row_starts.push(acc);
        }
        Self { n, k_exp, mode, offsets, rows, row_starts }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// K = ceil(log2 n).
    pub fn k_exp(&self) -> usize {
        self.k_exp
    }

    pub fn mode(&self) -> PatternMode {
        self.mode
    }

    /// Ascending column indices of row `i`.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn row_degree(&self, i: usize) -> usize {
        self.rows[i].len()
    }

    /// Index into a flat value array of the first stored entry of row `i`.
    pub fn row_start(&self, i: usize) -> usize {
        self.row_starts[i]
    }

    /// Total stored entries of one factor.
    pub fn nnz(&self) -> usize {
        *self.row_starts.last().unwrap()
    }

    /// Ring offsets in slot order (diagonal excluded). Slot 0 of a factor row
    /// is the diagonal; slot `c >= 1` is column `(i + offsets[c-1]) mod n`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Columns of row `i` in slot order: diagonal first, then increasing
    /// power-of-two offsets. This is the order MLP outputs map to; the
    /// stored `row` order is ascending by column instead.
    pub fn slot_columns(&self, i: usize) -> Vec<usize> {
        std::iter::once(i)
            .chain(self.offsets.iter().map(|&o| (i + o) % self.n))
            .collect()
    }

    /// For each slot of row `i`, the index into the flat value array of the
    /// matching stored entry.
    pub fn slot_value_indices(&self, i: usize) -> Vec<usize> {
        let row = &self.rows[i];
        let base = self.row_starts[i];
        self.slot_columns(i)
            .iter()
            .map(|c| base + row.binary_search(c).expect("slot column present in row"))
            .collect()
    }

    /// Position in the flat value array of stored entry `(i, j)`, or `None`
    /// if the position is not stored.
    pub fn value_index(&self, i: usize, j: usize) -> Option<usize> {
        self.rows[i].binary_search(&j).ok().map(|p| self.row_starts[i] + p)
    }

    pub fn to_json(&self) -> PatternJson {
        PatternJson {
            n: self.n,
            k_exp: self.k_exp,
            mode: self.mode,
            rows: self.rows.clone(),
        }
    }

    pub fn from_json(json: &PatternJson) -> Result<Self> {
        let rebuilt = build_pattern(json.n, json.mode)?;
        if rebuilt.rows != json.rows || rebuilt.k_exp != json.k_exp {
            return Err(SfError::InvalidInput(
                "pattern rows do not match the Chord construction for (n, mode)".into(),
            ));
        }
        Ok(rebuilt)
    }
}

/// JSON wire form of a pattern: `{n, k_exp, mode, rows}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternJson {
    pub n: usize,
    pub k_exp: usize,
    pub mode: PatternMode,
    pub rows: Vec<Vec<usize>>,
}

/// Fraction of entries of the `hops`-fold Boolean product of the pattern's
/// adjacency matrix that are structurally non-zero.
pub fn structural_density(pattern: &SparsityPattern, hops: usize) -> f64 {
    assert!(hops >= 1, "hops must be at least 1");
    let n = pattern.n;
    let words = n.div_ceil(64);
    // adjacency rows as bitsets
    let adj: Vec<Vec<u64>> = (0..n)
        .map(|i| {
            let mut bits = vec![0u64; words];
            for &j in pattern.row(i) {
                bits[j / 64] |= 1u64 << (j % 64);
            }
            bits
        })
        .collect();
    let mut reach = adj.clone();
    for _ in 1..hops {
        let mut next = vec![vec![0u64; words]; n];
        for i in 0..n {
            let next_i = &mut next[i];
            for (w, &word) in reach[i].iter().enumerate() {
                let mut bitsleft = word;
                while bitsleft != 0 {
                    let j = w * 64 + bitsleft.trailing_zeros() as usize;
                    bitsleft &= bitsleft - 1;
                    for (a, b) in next_i.iter_mut().zip(&adj[j]) {
                        *a |= *b;
                    }
                }
            }
        }
        reach = next;
    }
    let set: u64 = reach
        .iter()
        .map(|row| row.iter().map(|w| w.count_ones() as u64).sum::<u64>())
        .sum();
    set as f64 / (n as f64 * n as f64)
}

/// Stored-entry counts for a chain of `m_factors` same-pattern factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NnzAccounting {
    pub per_factor: usize,
    pub total: usize,
}

pub fn nnz_accounting(pattern: &SparsityPattern, m_factors: usize) -> NnzAccounting {
    let per_factor = pattern.nnz();
    NnzAccounting { per_factor, total: m_factors * per_factor }
}
