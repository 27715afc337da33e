//! The three classifiers behind one train/predict contract: random forest,
//! gradient-boosted trees, and distance-weighted k-NN. Models serialize to
//! self-describing JSON and are immutable once fitted.

pub mod forest;
pub mod gbt;
pub mod knn;
pub mod tree;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{LabelVector, SparseMatrix};
use crate::par;

pub use forest::{fit_random_forest, RfModel, RfParams};
pub use gbt::{fit_gbt, GbtModel, GbtParams};
pub use knn::{fit_knn, KnnModel, KnnParams, Weighting};
pub use tree::FeatureSubset;

#[derive(Debug, Error)]
pub enum MlError {
    #[error("training data holds a single class")]
    SingleClass,
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("row width {got} does not match training width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("need {need} training rows for k-NN, have {have}")]
    TooFewNeighbors { have: usize, need: usize },
    #[error("labels cover {labels} rows but the matrix has {rows}")]
    LabelMismatch { labels: usize, rows: usize },
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("model io: {0}")]
    Io(String),
}

pub(crate) fn check_training_set(
    matrix: &SparseMatrix,
    labels: &LabelVector,
) -> Result<(), MlError> {
    if matrix.n_rows() == 0 || matrix.n_cols() == 0 {
        return Err(MlError::EmptyMatrix);
    }
    if labels.len() != matrix.n_rows() {
        return Err(MlError::LabelMismatch { labels: labels.len(), rows: matrix.n_rows() });
    }
    let mut seen = vec![false; labels.n_classes()];
    for &y in &labels.ids {
        seen[y] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(MlError::SingleClass);
    }
    Ok(())
}

/// Which classifier a configuration refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Rf,
    Gbt,
    Knn,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Rf => f.write_str("rf"),
            ModelKind::Gbt => f.write_str("gbt"),
            ModelKind::Knn => f.write_str("knn"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rf" => Ok(ModelKind::Rf),
            "gbt" | "xgboost" => Ok(ModelKind::Gbt),
            "knn" => Ok(ModelKind::Knn),
            other => Err(format!("unknown model `{other}` (expected rf|gbt|knn)")),
        }
    }
}

/// A fitted classifier of any kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainedModel {
    Rf(RfModel),
    Gbt(GbtModel),
    Knn(KnnModel),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Rf(_) => ModelKind::Rf,
            TrainedModel::Gbt(_) => ModelKind::Gbt,
            TrainedModel::Knn(_) => ModelKind::Knn,
        }
    }

    pub fn class_names(&self) -> &[String] {
        match self {
            TrainedModel::Rf(m) => &m.class_names,
            TrainedModel::Gbt(m) => &m.class_names,
            TrainedModel::Knn(m) => &m.class_names,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            TrainedModel::Rf(m) => m.n_features,
            TrainedModel::Gbt(m) => m.n_features,
            TrainedModel::Knn(m) => m.train.n_cols(),
        }
    }

    /// Per-class scores for every row; rows parallelize.
    pub fn predict_proba(&self, rows: &SparseMatrix) -> Result<Vec<Vec<f64>>, MlError> {
        if rows.n_cols() != self.n_features() {
            return Err(MlError::WidthMismatch { expected: self.n_features(), got: rows.n_cols() });
        }
        let proba = par::map_range(rows.n_rows(), |i| {
            let row = rows.row(i);
            match self {
                TrainedModel::Rf(m) => m.predict_proba_row(row),
                TrainedModel::Gbt(m) => m.predict_proba_row(row),
                TrainedModel::Knn(m) => m.predict_proba_row(row),
            }
        });
        Ok(proba)
    }

    /// Class ids; always `argmax` of [`Self::predict_proba`], ties to the
    /// smallest class id.
    pub fn predict(&self, rows: &SparseMatrix) -> Result<Vec<usize>, MlError> {
        Ok(self.predict_proba(rows)?.iter().map(|p| argmax(p)).collect())
    }
}

pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn save_model(path: &Path, model: &TrainedModel) -> Result<(), MlError> {
    let json = serde_json::to_string_pretty(model).map_err(|e| MlError::Io(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| MlError::Io(e.to_string()))
}

pub fn load_model(path: &Path) -> Result<TrainedModel, MlError> {
    let bytes = std::fs::read(path).map_err(|e| MlError::Io(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| MlError::Io(e.to_string()))
}

/// Best Gini split over every feature at the root of the given training
/// set. Diagnostic surface; runs the same split finder the forests use.
#[derive(Debug, Clone, PartialEq)]
pub struct GiniSplit {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

pub fn best_gini_split(
    matrix: &SparseMatrix,
    labels: &LabelVector,
) -> Result<Option<GiniSplit>, MlError> {
    check_training_set(matrix, labels)?;
    let store = tree::ColStore::new(matrix);
    let criterion = tree::GiniCriterion { labels: &labels.ids, n_classes: labels.n_classes() };
    let config = tree::TreeConfig {
        max_depth: 1,
        feature_subset: FeatureSubset::All,
        min_gain: 0.0,
    };
    let builder = tree::TreeBuilder::new(&store, &criterion, &config);
    let mut rng = crate::rng::make_rng(0);
    let rows: Vec<usize> = (0..matrix.n_rows()).collect();
    let tree = builder.fit(rows, &mut rng);
    Ok(match &tree.nodes[0] {
        tree::Node::Split { feature, threshold, gain, .. } => {
            Some(GiniSplit { feature: *feature, threshold: *threshold, gain: *gain })
        }
        tree::Node::Leaf { .. } => None,
    })
}
