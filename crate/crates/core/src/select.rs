//! Boruta all-relevant feature selection.
//!
//! Each iteration re-randomizes one shadow (permuted) copy of every real
//! column, fits a boosted-tree importance source on the augmented matrix,
//! and records a hit for every real feature whose importance clears the
//! configured percentile of the shadow importances. After the fixed
//! iteration budget a two-sided binomial test with a Bonferroni correction
//! across features splits the set into confirmed / rejected / tentative.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::features::{FeatureVocabulary, LabelVector, SparseMatrix};
use crate::ml::{fit_gbt, GbtParams, MlError};
use crate::rng::{derive_seed, make_rng, PipelineRng};

use rand::Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BorutaParams {
    pub learning_rate: f64,
    pub max_iter: usize,
    pub max_depth: usize,
    /// Shadow-importance percentile used as the hit threshold, in (0, 100].
    pub perc: u8,
    /// Significance level of the binomial decision test.
    pub alpha: f64,
    /// Boosting rounds per iteration fit.
    pub n_rounds: usize,
    pub rng_seed: u64,
}

impl Default for BorutaParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            max_iter: 50,
            max_depth: 5,
            perc: 90,
            alpha: 0.05,
            n_rounds: 50,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureStatus {
    Confirmed,
    Rejected,
    Tentative,
}

/// Outcome of a Boruta run over the real (non-shadow) columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BorutaDecision {
    pub statuses: Vec<FeatureStatus>,
    pub hit_counts: Vec<u32>,
    pub iterations_run: usize,
}

impl BorutaDecision {
    pub fn count(&self, status: FeatureStatus) -> usize {
        self.statuses.iter().filter(|&&s| s == status).count()
    }
}

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("training data holds a single class")]
    SingleClass,
    #[error("need at least {need} rows, have {have}")]
    TooFewRows { have: usize, need: usize },
    #[error("decision covers {decision} features but the matrix has {cols} columns")]
    DecisionMismatch { decision: usize, cols: usize },
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Ml(#[from] MlError),
}

/// Append one shadow column per real column: a row-permutation of its
/// values (implicit zeros included). Original columns are untouched.
pub fn shadow_expand(matrix: &SparseMatrix, rng: &mut PipelineRng) -> SparseMatrix {
    let n = matrix.n_rows();
    let n_cols = matrix.n_cols();
    let mut rows = matrix.rows().to_vec();
    let cols = matrix.transpose_columns();
    let mut dense = vec![0.0f64; n];
    for (j, col) in cols.iter().enumerate() {
        dense.iter_mut().for_each(|v| *v = 0.0);
        for &(r, v) in col {
            dense[r] = v;
        }
        for i in (1..n).rev() {
            let k = rng.gen_range(0..=i);
            dense.swap(i, k);
        }
        for (r, &v) in dense.iter().enumerate() {
            if v != 0.0 {
                rows[r].push((n_cols + j, v));
            }
        }
    }
    SparseMatrix::from_rows(2 * n_cols, rows).expect("shadow expansion preserves row invariants")
}

/// Per-column importance: total split gain across a boosted ensemble fit
/// with the Boruta estimator settings.
pub fn importance(
    matrix: &SparseMatrix,
    labels: &LabelVector,
    params: &BorutaParams,
) -> Result<Vec<f64>, SelectError> {
    let gbt = GbtParams {
        learning_rate: params.learning_rate,
        max_depth: params.max_depth,
        subsample: 1.0,
        n_rounds: params.n_rounds,
        rng_seed: params.rng_seed,
    };
    let model = fit_gbt(matrix, labels, &gbt).map_err(|e| match e {
        MlError::SingleClass => SelectError::SingleClass,
        other => SelectError::Ml(other),
    })?;
    Ok(model.feature_importance())
}

/// Linear-interpolation percentile; `perc = 100` is the maximum.
fn percentile(values: &[f64], perc: u8) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (perc as f64 / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

fn check_params(params: &BorutaParams) -> Result<(), SelectError> {
    if params.perc == 0 || params.perc > 100 {
        return Err(SelectError::BadParams("perc must be in (0, 100]".into()));
    }
    if !(0.0..1.0).contains(&params.alpha) || params.alpha == 0.0 {
        return Err(SelectError::BadParams("alpha must be in (0, 1)".into()));
    }
    if params.max_iter == 0 {
        return Err(SelectError::BadParams("max_iter must be >= 1".into()));
    }
    Ok(())
}

/// Run the full Boruta loop.
pub fn boruta(
    matrix: &SparseMatrix,
    labels: &LabelVector,
    params: &BorutaParams,
) -> Result<BorutaDecision, SelectError> {
    check_params(params)?;
    if matrix.n_rows() < 10 {
        return Err(SelectError::TooFewRows { have: matrix.n_rows(), need: 10 });
    }
    let m = matrix.n_cols();
    let mut hits = vec![0u32; m];
    for iter in 0..params.max_iter {
        let mut shadow_rng = make_rng(derive_seed(params.rng_seed, iter as u64));
        let augmented = shadow_expand(matrix, &mut shadow_rng);
        let iter_params = BorutaParams {
            rng_seed: derive_seed(params.rng_seed, (iter as u64) | (1 << 32)),
            ..params.clone()
        };
        let imp = importance(&augmented, labels, &iter_params)?;
        let threshold = percentile(&imp[m..], params.perc);
        for (j, hit) in hits.iter_mut().enumerate() {
            if imp[j] > threshold {
                *hit += 1;
            }
        }
    }

    // two-sided binomial test at alpha, Bonferroni-corrected across features
    let n = params.max_iter as u64;
    let binom = Binomial::new(0.5, n).expect("valid binomial");
    let cutoff = params.alpha / 2.0 / m as f64;
    let statuses = hits
        .iter()
        .map(|&h| {
            let p_high = if h == 0 { 1.0 } else { binom.sf(h as u64 - 1) };
            let p_low = binom.cdf(h as u64);
            if p_high < cutoff {
                FeatureStatus::Confirmed
            } else if p_low < cutoff {
                FeatureStatus::Rejected
            } else {
                FeatureStatus::Tentative
            }
        })
        .collect();
    Ok(BorutaDecision { statuses, hit_counts: hits, iterations_run: params.max_iter })
}

/// What [`apply_selection`] returns: the reduced matrix/vocabulary pair and
/// a flag raised when nothing survived.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub matrix: SparseMatrix,
    pub vocab: FeatureVocabulary,
    pub kept_columns: Vec<usize>,
    pub empty_warning: bool,
}

/// Keep confirmed (and, optionally, tentative) columns, re-indexing the
/// vocabulary. Row values are preserved verbatim.
pub fn apply_selection(
    matrix: &SparseMatrix,
    vocab: &FeatureVocabulary,
    decision: &BorutaDecision,
    keep_tentative: bool,
) -> Result<SelectionOutcome, SelectError> {
    if decision.statuses.len() != matrix.n_cols() || vocab.len() != matrix.n_cols() {
        return Err(SelectError::DecisionMismatch {
            decision: decision.statuses.len(),
            cols: matrix.n_cols(),
        });
    }
    let kept: Vec<usize> = decision
        .statuses
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            matches!(s, FeatureStatus::Confirmed)
                || (keep_tentative && matches!(s, FeatureStatus::Tentative))
        })
        .map(|(j, _)| j)
        .collect();
    let reduced = matrix.select_columns(&kept);
    let tokens = kept.iter().map(|&j| vocab.token(j).clone()).collect();
    Ok(SelectionOutcome {
        matrix: reduced,
        vocab: FeatureVocabulary::from_tokens(tokens),
        empty_warning: kept.is_empty(),
        kept_columns: kept,
    })
}

/// Exact binomial tail probabilities; retained for cross-checking the
/// statistics dependency in tests.
#[cfg(test)]
fn binom_tail_exact(n: u64, k: u64, upper: bool) -> f64 {
    use statrs::distribution::Discrete;
    let binom = Binomial::new(0.5, n).unwrap();
    let range: Vec<u64> = if upper { (k..=n).collect() } else { (0..=k).collect() };
    range.iter().map(|&i| binom.pmf(i)).sum()
}
