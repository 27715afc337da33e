//! Random forest classifier: bagged Gini trees with per-split feature
//! subsampling. Trees grow independently from per-tree derived seeds, so
//! fits parallelize across trees without affecting results.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tree::{ColStore, FeatureSubset, GiniCriterion, Tree, TreeBuilder, TreeConfig};
use super::MlError;
use crate::features::{LabelVector, SparseMatrix};
use crate::par;
use crate::rng::{derive_seed, make_rng};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RfParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub features_per_split: FeatureSubset,
    pub rng_seed: u64,
}

impl Default for RfParams {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            max_depth: 20,
            features_per_split: FeatureSubset::Sqrt,
            rng_seed: 0,
        }
    }
}

/// A fitted forest: trees vote with their leaf class distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RfModel {
    pub class_names: Vec<String>,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

pub fn fit_random_forest(
    matrix: &SparseMatrix,
    labels: &LabelVector,
    params: &RfParams,
) -> Result<RfModel, MlError> {
    super::check_training_set(matrix, labels)?;
    let store = ColStore::new(matrix);
    let criterion = GiniCriterion { labels: &labels.ids, n_classes: labels.n_classes() };
    let config = TreeConfig {
        max_depth: params.max_depth,
        feature_subset: params.features_per_split,
        min_gain: 0.0,
    };
    let n = matrix.n_rows();
    let trees = par::map_range(params.n_estimators, |t| {
        let mut rng = make_rng(derive_seed(params.rng_seed, t as u64));
        let mut rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        rows.sort_unstable();
        TreeBuilder::new(&store, &criterion, &config).fit(rows, &mut rng)
    });
    Ok(RfModel {
        class_names: labels.class_names.clone(),
        n_features: matrix.n_cols(),
        trees,
    })
}

impl RfModel {
    /// Mean of the tree leaf distributions.
    pub fn predict_proba_row(&self, row: &[(usize, f64)]) -> Vec<f64> {
        let k = self.class_names.len();
        let mut acc = vec![0.0f64; k];
        for tree in &self.trees {
            let dist = tree.eval(row);
            for (a, d) in acc.iter_mut().zip(dist) {
                *a += d;
            }
        }
        let norm = self.trees.len().max(1) as f64;
        for a in &mut acc {
            *a /= norm;
        }
        acc
    }

    /// Total split gain per feature across the forest.
    pub fn feature_importance(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.n_features];
        for tree in &self.trees {
            tree.gain_by_feature(&mut acc);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ml::tree::Node;

    fn labels(ids: Vec<usize>, names: &[&str]) -> LabelVector {
        LabelVector { class_names: names.iter().map(|s| s.to_string()).collect(), ids }
    }

    fn separable() -> (SparseMatrix, LabelVector) {
        let m = SparseMatrix::from_rows(
            2,
            vec![vec![(0, 1.0)], vec![(0, 2.0)], vec![(1, 5.0)], vec![(1, 6.0)]],
        )
        .unwrap();
        (m, labels(vec![0, 0, 1, 1], &["a", "b"]))
    }

    #[test]
    fn memorizes_separable_data() {
        let (m, y) = separable();
        let model = fit_random_forest(&m, &y, &RfParams { n_estimators: 20, ..Default::default() })
            .unwrap();
        for i in 0..m.n_rows() {
            let p = model.predict_proba_row(m.row(i));
            let pred = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(pred, y.ids[i]);
        }
    }

    #[test]
    fn xor_with_depth_two() {
        let m = SparseMatrix::from_rows(
            2,
            vec![vec![], vec![(1, 1.0)], vec![(0, 1.0)], vec![(0, 1.0), (1, 1.0)]],
        )
        .unwrap();
        let y = labels(vec![0, 1, 1, 0], &["zero", "one"]);
        let params = RfParams { n_estimators: 100, max_depth: 2, rng_seed: 7, ..Default::default() };
        let model = fit_random_forest(&m, &y, &params).unwrap();
        for i in 0..4 {
            let p = model.predict_proba_row(m.row(i));
            let pred = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(pred, y.ids[i], "row {i}: {p:?}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let (m, y) = separable();
        let params = RfParams { n_estimators: 10, rng_seed: 42, ..Default::default() };
        let a = fit_random_forest(&m, &y, &params).unwrap();
        let b = fit_random_forest(&m, &y, &params).unwrap();
        assert_eq!(a.trees, b.trees);
    }

    #[test]
    fn rejects_degenerate_training_sets() {
        let (m, _) = separable();
        let single = labels(vec![0, 0, 0, 0], &["only"]);
        assert!(matches!(
            fit_random_forest(&m, &single, &RfParams::default()),
            Err(MlError::SingleClass)
        ));
        let empty = SparseMatrix::new(2);
        let none = labels(vec![], &["a", "b"]);
        assert!(matches!(
            fit_random_forest(&empty, &none, &RfParams::default()),
            Err(MlError::EmptyMatrix)
        ));
    }

    #[test]
    fn proba_is_mean_of_leaf_distributions() {
        // three hand-written stumps with known leaves
        let stump = |threshold: f64, left: Vec<f64>, right: Vec<f64>| Tree {
            nodes: vec![
                Node::Split { feature: 0, threshold, gain: 0.1, left: 1, right: 2 },
                Node::Leaf { value: left },
                Node::Leaf { value: right },
            ],
        };
        let model = RfModel {
            class_names: vec!["a".into(), "b".into()],
            n_features: 1,
            trees: vec![
                stump(1.0, vec![1.0, 0.0], vec![0.0, 1.0]),
                stump(2.0, vec![0.5, 0.5], vec![0.25, 0.75]),
                stump(3.0, vec![0.9, 0.1], vec![0.2, 0.8]),
            ],
        };
        // x = 1.5 routes: right, left, left
        let p = model.predict_proba_row(&[(0, 1.5)]);
        let want = [(0.0 + 0.5 + 0.9) / 3.0, (1.0 + 0.5 + 0.1) / 3.0];
        assert!((p[0] - want[0]).abs() < 1e-12);
        assert!((p[1] - want[1]).abs() < 1e-12);
    }
}
