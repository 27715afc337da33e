//! Sample × feature sparse count matrices, the token vocabulary, and the
//! imphash indicator-column block.
//!
//! Counts stay raw (no scaling); unknown tokens at inference time are
//! dropped against the frozen vocabulary and tallied. Values live in `f64`
//! so downstream model math is uniform; counts cast exactly.

pub mod io;

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::unify::FeatureToken;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid row {row}: {msg}")]
    InvalidRow { row: usize, msg: String },
}

/// Ordered token list with a reverse index; column ids are stable
/// first-seen order over the corpus.
#[derive(Debug, Clone, Default)]
pub struct FeatureVocabulary {
    tokens: Vec<FeatureToken>,
    index: HashMap<FeatureToken, usize>,
}

impl FeatureVocabulary {
    pub fn from_tokens(tokens: Vec<FeatureToken>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, col: usize) -> &FeatureToken {
        &self.tokens[col]
    }

    pub fn tokens(&self) -> &[FeatureToken] {
        &self.tokens
    }

    pub fn column_of(&self, token: &FeatureToken) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Append a token, returning its new column id; the token must be new.
    fn push(&mut self, token: FeatureToken) -> usize {
        debug_assert!(!self.index.contains_key(&token));
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }
}

/// Row-major sparse matrix: per row, `(col, value)` pairs with strictly
/// increasing columns and no explicit zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    n_cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn new(n_cols: usize) -> Self {
        Self { n_cols, rows: Vec::new() }
    }

    /// Build from raw rows, validating the per-row invariants.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self, FeatureError> {
        for (i, row) in rows.iter().enumerate() {
            validate_row(row, n_cols).map_err(|msg| FeatureError::InvalidRow { row: i, msg })?;
        }
        Ok(Self { n_cols, rows })
    }

    pub fn push_row(&mut self, row: Vec<(usize, f64)>) -> Result<(), FeatureError> {
        validate_row(&row, self.n_cols)
            .map_err(|msg| FeatureError::InvalidRow { row: self.rows.len(), msg })?;
        self.rows.push(row);
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Value at `(row, col)`; zero when not stored.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        match self.rows[row].binary_search_by_key(&col, |&(c, _)| c) {
            Ok(idx) => self.rows[row][idx].1,
            Err(_) => 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Column-major view: per column, `(row, value)` pairs sorted by row.
    pub fn transpose_columns(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cols = vec![Vec::new(); self.n_cols];
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                cols[c].push((r, v));
            }
        }
        cols
    }

    /// Select a subset of rows (indices may repeat, e.g. bootstrap samples).
    pub fn select_rows(&self, indices: &[usize]) -> SparseMatrix {
        SparseMatrix {
            n_cols: self.n_cols,
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Keep the given columns (in order), re-indexing to 0..keep.len().
    pub fn select_columns(&self, keep: &[usize]) -> SparseMatrix {
        let mut remap = vec![usize::MAX; self.n_cols];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let mut out: Vec<(usize, f64)> = row
                    .iter()
                    .filter_map(|&(c, v)| (remap[c] != usize::MAX).then(|| (remap[c], v)))
                    .collect();
                out.sort_unstable_by_key(|&(c, _)| c);
                out
            })
            .collect();
        SparseMatrix { n_cols: keep.len(), rows }
    }
}

fn validate_row(row: &[(usize, f64)], n_cols: usize) -> Result<(), String> {
    let mut last: Option<usize> = None;
    for &(c, v) in row {
        if c >= n_cols {
            return Err(format!("column {c} out of range ({n_cols} cols)"));
        }
        if let Some(prev) = last {
            if c <= prev {
                return Err(format!("columns not strictly increasing at {c}"));
            }
        }
        if v == 0.0 {
            return Err(format!("explicit zero at column {c}"));
        }
        if !v.is_finite() {
            return Err(format!("non-finite value at column {c}"));
        }
        last = Some(c);
    }
    Ok(())
}

/// Per-row class ids plus the class-name table; ids are dense `0..k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    pub class_names: Vec<String>,
    pub ids: Vec<usize>,
}

impl LabelVector {
    /// Dense-encode labels, assigning ids by first appearance unless a
    /// fixed name table is supplied.
    pub fn from_names<S: AsRef<str>>(labels: &[S], fixed_order: Option<&[&str]>) -> Self {
        let mut class_names: Vec<String> = match fixed_order {
            Some(order) => order.iter().map(|s| s.to_string()).collect(),
            None => Vec::new(),
        };
        let mut index: HashMap<String, usize> =
            class_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let ids = labels
            .iter()
            .map(|l| {
                let l = l.as_ref();
                *index.entry(l.to_string()).or_insert_with(|| {
                    class_names.push(l.to_string());
                    class_names.len() - 1
                })
            })
            .collect();
        Self { class_names, ids }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Union of all tokens over the corpus, in first-seen order.
pub fn build_vocabulary(
    token_maps: &[IndexMap<FeatureToken, u64>],
) -> Result<FeatureVocabulary, FeatureError> {
    if token_maps.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    let mut vocab = FeatureVocabulary::default();
    for map in token_maps {
        for token in map.keys() {
            if vocab.column_of(token).is_none() {
                vocab.push(token.clone());
            }
        }
    }
    Ok(vocab)
}

/// Vectorize one token map against a frozen vocabulary.
///
/// Returns the sparse row plus the count of skipped (out-of-vocabulary)
/// tokens.
pub fn vectorize(
    token_map: &IndexMap<FeatureToken, u64>,
    vocab: &FeatureVocabulary,
) -> (Vec<(usize, f64)>, usize) {
    let mut cells: Vec<(usize, f64)> = Vec::with_capacity(token_map.len());
    let mut skipped = 0usize;
    for (token, &count) in token_map {
        match vocab.column_of(token) {
            Some(col) if count > 0 => cells.push((col, count as f64)),
            Some(_) => {}
            None => skipped += 1,
        }
    }
    cells.sort_unstable_by_key(|&(c, _)| c);
    (cells, skipped)
}

/// Vectorize a whole corpus; rows in corpus order.
pub fn build_matrix(
    token_maps: &[IndexMap<FeatureToken, u64>],
    vocab: &FeatureVocabulary,
) -> (SparseMatrix, usize) {
    let rows = crate::par::map_slice(token_maps, |map| vectorize(map, vocab));
    let mut matrix = SparseMatrix::new(vocab.len());
    let mut skipped = 0;
    for (row, s) in rows {
        skipped += s;
        matrix.rows.push(row); // vectorize output upholds the row invariants
    }
    (matrix, skipped)
}

/// Append one binary indicator column per distinct digest.
///
/// Rows with a missing digest (unparsable PE) get no indicator. Existing
/// cells are untouched; new columns take kind [`TokenKind::Imphash`] and
/// first-seen digest order.
pub fn append_imphash_columns(
    matrix: &SparseMatrix,
    vocab: &FeatureVocabulary,
    per_row_imphash: &[Option<String>],
) -> Result<(SparseMatrix, FeatureVocabulary), FeatureError> {
    if per_row_imphash.len() != matrix.n_rows() {
        return Err(FeatureError::LengthMismatch(format!(
            "{} digests for {} rows",
            per_row_imphash.len(),
            matrix.n_rows()
        )));
    }
    let mut vocab = vocab.clone();
    let mut digest_col: IndexMap<&str, usize> = IndexMap::new();
    for digest in per_row_imphash.iter().flatten() {
        if !digest_col.contains_key(digest.as_str()) {
            let col = vocab.push(FeatureToken::imphash(digest.clone()));
            digest_col.insert(digest.as_str(), col);
        }
    }
    let mut out = SparseMatrix::new(vocab.len());
    for (i, row) in matrix.rows.iter().enumerate() {
        let mut row = row.clone();
        if let Some(digest) = &per_row_imphash[i] {
            row.push((digest_col[digest.as_str()], 1.0));
        }
        out.rows.push(row);
    }
    Ok((out, vocab))
}

/// Fraction of empty cells, in `[0, 1]`.
pub fn sparsity(matrix: &SparseMatrix) -> Result<f64, FeatureError> {
    let total = matrix.n_rows() * matrix.n_cols();
    if total == 0 {
        return Err(FeatureError::EmptyMatrix);
    }
    Ok(1.0 - matrix.nnz() as f64 / total as f64)
}
