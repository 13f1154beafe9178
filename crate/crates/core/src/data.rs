//! In-memory datasets, normalization and splitting.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng;
#[allow(unused_imports)]
use num_traits::Float;

/// Rows of features with one label each.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DesignData {
    /// `N × d`, one example per row.
    pub x: Matrix,
    pub y: Vec<f64>,
}

impl DesignData {
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.nrows(), found: y.len() });
        }
        Ok(DesignData { x, y })
    }

    pub fn empty(dim: usize) -> Self {
        DesignData { x: Matrix::zeros(0, dim), y: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> Vector {
        self.x.row(i).transpose()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let x = Matrix::from_fn(idx.len(), self.dim(), |r, c| self.x[(idx[r], c)]);
        DesignData { x, y: idx.iter().map(|&i| self.y[i]).collect() }
    }
}

/// Per-feature standardization statistics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Floor applied to standard deviations so constant columns map to zero.
pub const STD_FLOOR: f64 = 1e-8;

impl ZScore {
    /// Column statistics of `x` (population standard deviation).
    pub fn fit(x: &Matrix) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let mu = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            mean.push(mu);
            std.push(var.sqrt().max(STD_FLOOR));
        }
        Ok(ZScore { mean, std })
    }

    pub fn fit_values(values: &[f64]) -> Result<Self> {
        Self::fit(&Matrix::from_column_slice(values.len(), 1, values))
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.std[j])
    }

    pub fn apply_value(&self, j: usize, v: f64) -> f64 {
        (v - self.mean[j]) / self.std[j]
    }
}

/// Standardize train features and apply the same map to test.
pub fn zscore_fit_apply(train: &Matrix, test: &Matrix) -> Result<(Matrix, Matrix, ZScore)> {
    let z = ZScore::fit(train)?;
    if test.ncols() != train.ncols() {
        return Err(Error::DimensionMismatch { expected: train.ncols(), found: test.ncols() });
    }
    Ok((z.apply(train), z.apply(test), z))
}

/// Shuffled 80/20 index split: `⌈0.8N⌉` training and `⌊0.2N⌋` test indices.
pub fn split_80_20(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::InvalidParameter("need at least five records to split"));
    }
    let n_train = (4 * n).div_ceil(5);
    let perm = rng::permutation(&mut rng::stream(seed, 0x5917), n);
    Ok((perm[..n_train].to_vec(), perm[n_train..].to_vec()))
}

/// Sparse matrix observations `(row, col, value)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TripletData {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl TripletData {
    /// Checks index ranges and rejects repeated cells.
    pub fn new(rows: usize, cols: usize, entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        let mut seen = alloc::collections::BTreeSet::new();
        for &(i, j, _) in &entries {
            if i >= rows {
                return Err(Error::DimensionMismatch { expected: rows, found: i });
            }
            if j >= cols {
                return Err(Error::DimensionMismatch { expected: cols, found: j });
            }
            if !seen.insert((i, j)) {
                return Err(Error::InvalidParameter("duplicate matrix cell"));
            }
        }
        Ok(TripletData { rows, cols, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry indices grouped by row and by column.
    pub fn index(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let mut by_row = alloc::vec![Vec::new(); self.rows];
        let mut by_col = alloc::vec![Vec::new(); self.cols];
        for (e, &(i, j, _)) in self.entries.iter().enumerate() {
            by_row[i].push(e);
            by_col[j].push(e);
        }
        (by_row, by_col)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        TripletData { rows: self.rows, cols: self.cols, entries: idx.iter().map(|&e| self.entries[e]).collect() }
    }
}

/// One document as `(word, count)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Document {
    pub counts: Vec<(usize, u32)>,
}

impl Document {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&(_, c)| c as u64).sum()
    }

    /// Word tokens in a fixed order: each word repeated by its count.
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.total() as usize);
        for &(w, c) in &self.counts {
            t.extend(core::iter::repeat_n(w, c as usize));
        }
        t
    }

    pub fn from_tokens(vocab: usize, tokens: &[usize]) -> Self {
        let mut c = alloc::vec![0u32; vocab];
        for &w in tokens {
            c[w] += 1;
        }
        Document { counts: c.iter().enumerate().filter(|(_, &n)| n > 0).map(|(w, &n)| (w, n)).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorpusData {
    pub vocab: usize,
    pub docs: Vec<Document>,
}

impl CorpusData {
    pub fn new(vocab: usize, docs: Vec<Document>) -> Result<Self> {
        for d in &docs {
            for &(w, c) in &d.counts {
                if w >= vocab {
                    return Err(Error::DimensionMismatch { expected: vocab, found: w });
                }
                if c == 0 {
                    return Err(Error::InvalidParameter("word counts must be positive"));
                }
            }
        }
        Ok(CorpusData { vocab, docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        CorpusData { vocab: self.vocab, docs: idx.iter().map(|&d| self.docs[d].clone()).collect() }
    }

    /// Words that occur somewhere in the corpus.
    pub fn present_words(&self) -> Vec<bool> {
        let mut seen = alloc::vec![false; self.vocab];
        for d in &self.docs {
            for &(w, _) in &d.counts {
                seen[w] = true;
            }
        }
        seen
    }
}

/// Drops test words that never occur in training; empty documents are removed.
pub fn filter_test_vocab(train: &CorpusData, test: &CorpusData) -> CorpusData {
    let keep = train.present_words();
    let docs = test
        .docs
        .iter()
        .map(|d| Document { counts: d.counts.iter().copied().filter(|&(w, _)| w < keep.len() && keep[w]).collect() })
        .filter(|d| !d.counts.is_empty())
        .collect();
    CorpusData { vocab: train.vocab, docs }
}
