//! Gradient-boosted trees with a softmax objective: one regression tree per
//! class per round, fit to the cross-entropy gradients on a row subsample,
//! Newton leaf values damped by the learning rate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tree::{ColStore, FeatureSubset, GradCriterion, Tree, TreeBuilder, TreeConfig};
use super::MlError;
use crate::features::{LabelVector, SparseMatrix};
use crate::par;
use crate::rng::{derive_seed, make_rng};

/// L2 leaf penalty; matches the reference boosting implementation default.
const LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtParams {
    pub learning_rate: f64,
    pub max_depth: usize,
    pub subsample: f64,
    pub n_rounds: usize,
    pub rng_seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            max_depth: 10,
            subsample: 0.8,
            n_rounds: 100,
            rng_seed: 0,
        }
    }
}

/// A fitted boosted ensemble. Scores start from the log class priors;
/// every round adds `learning_rate` times each class tree's leaf value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtModel {
    pub class_names: Vec<String>,
    pub n_features: usize,
    pub learning_rate: f64,
    pub init_scores: Vec<f64>,
    /// `rounds[r][k]` is round `r`'s tree for class `k`.
    pub rounds: Vec<Vec<Tree>>,
    /// Training cross-entropy after each round (index 0 = priors only).
    pub train_loss: Vec<f64>,
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

pub fn fit_gbt(
    matrix: &SparseMatrix,
    labels: &LabelVector,
    params: &GbtParams,
) -> Result<GbtModel, MlError> {
    super::check_training_set(matrix, labels)?;
    if !(0.0..=1.0).contains(&params.subsample) || params.subsample == 0.0 {
        return Err(MlError::BadParams("subsample must be in (0, 1]".into()));
    }
    let n = matrix.n_rows();
    let k = labels.n_classes();
    let store = ColStore::new(matrix);
    let config = TreeConfig {
        max_depth: params.max_depth,
        feature_subset: FeatureSubset::All,
        min_gain: 1e-12,
    };

    // log-prior init keeps zero-round predictions at the class priors
    let mut counts = vec![0usize; k];
    for &y in &labels.ids {
        counts[y] += 1;
    }
    let init_scores: Vec<f64> =
        counts.iter().map(|&c| ((c as f64 / n as f64).max(1e-12)).ln()).collect();

    // scores[i][k], probabilities refreshed once per round
    let mut scores: Vec<Vec<f64>> = vec![init_scores.clone(); n];
    let mut proba: Vec<Vec<f64>> = scores.clone();
    for p in &mut proba {
        softmax_in_place(p);
    }
    let train_loss_of = |proba: &[Vec<f64>]| -> f64 {
        let mut loss = 0.0;
        for (i, &y) in labels.ids.iter().enumerate() {
            loss -= proba[i][y].max(1e-300).ln();
        }
        loss / n as f64
    };

    let mut model = GbtModel {
        class_names: labels.class_names.clone(),
        n_features: matrix.n_cols(),
        learning_rate: params.learning_rate,
        init_scores,
        rounds: Vec::with_capacity(params.n_rounds),
        train_loss: vec![train_loss_of(&proba)],
    };

    let subsample_len = ((params.subsample * n as f64).floor() as usize).clamp(1, n);
    for round in 0..params.n_rounds {
        let round_seed = derive_seed(params.rng_seed, round as u64);
        let rows: Vec<usize> = if subsample_len == n {
            (0..n).collect()
        } else {
            let mut rng = make_rng(derive_seed(round_seed, u64::MAX));
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..subsample_len {
                let j = rng.gen_range(i..n);
                pool.swap(i, j);
            }
            let mut rows = pool[..subsample_len].to_vec();
            rows.sort_unstable();
            rows
        };

        // per-class trees are independent given this round's probabilities
        let class_trees: Vec<Tree> = par::map_range(k, |class| {
            let mut grad = vec![0.0f64; n];
            let mut hess = vec![0.0f64; n];
            for &i in &rows {
                let p = proba[i][class];
                let y = if labels.ids[i] == class { 1.0 } else { 0.0 };
                grad[i] = p - y;
                hess[i] = p * (1.0 - p);
            }
            let criterion = GradCriterion { grad: &grad, hess: &hess, lambda: LAMBDA };
            let mut rng = make_rng(derive_seed(round_seed, class as u64));
            TreeBuilder::new(&store, &criterion, &config).fit(rows.clone(), &mut rng)
        });

        for (i, score) in scores.iter_mut().enumerate() {
            for (class, tree) in class_trees.iter().enumerate() {
                score[class] += params.learning_rate * tree.eval(matrix.row(i))[0];
            }
        }
        proba = scores.clone();
        for p in &mut proba {
            softmax_in_place(p);
        }
        model.rounds.push(class_trees);
        model.train_loss.push(train_loss_of(&proba));
    }
    Ok(model)
}

impl GbtModel {
    pub fn predict_proba_row(&self, row: &[(usize, f64)]) -> Vec<f64> {
        let mut scores = self.init_scores.clone();
        for round in &self.rounds {
            for (class, tree) in round.iter().enumerate() {
                scores[class] += self.learning_rate * tree.eval(row)[0];
            }
        }
        softmax_in_place(&mut scores);
        scores
    }

    /// Total split gain per feature across every round and class.
    pub fn feature_importance(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.n_features];
        for round in &self.rounds {
            for tree in round {
                tree.gain_by_feature(&mut acc);
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(ids: Vec<usize>, names: &[&str]) -> LabelVector {
        LabelVector { class_names: names.iter().map(|s| s.to_string()).collect(), ids }
    }

    fn separable(n_per_class: usize) -> (SparseMatrix, LabelVector) {
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        for i in 0..n_per_class {
            rows.push(vec![(0, 1.0 + (i % 3) as f64)]);
            ids.push(0);
            rows.push(vec![(1, 4.0 + (i % 3) as f64)]);
            ids.push(1);
        }
        (SparseMatrix::from_rows(2, rows).unwrap(), labels(ids, &["neg", "pos"]))
    }

    #[test]
    fn separable_data_reaches_full_training_accuracy() {
        let (m, y) = separable(10);
        let params = GbtParams { n_rounds: 50, learning_rate: 0.1, max_depth: 3, subsample: 1.0, rng_seed: 1 };
        let model = fit_gbt(&m, &y, &params).unwrap();
        for i in 0..m.n_rows() {
            let p = model.predict_proba_row(m.row(i));
            let pred = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(pred, y.ids[i]);
        }
        // loss strictly decreases on this fixture
        for w in model.train_loss.windows(2) {
            assert!(w[1] < w[0], "loss not strictly decreasing: {:?}", model.train_loss);
        }
    }

    #[test]
    fn zero_learning_rate_predicts_priors() {
        let m = SparseMatrix::from_rows(
            1,
            vec![vec![(0, 1.0)], vec![(0, 2.0)], vec![(0, 3.0)], vec![(0, 4.0)]],
        )
        .unwrap();
        let y = labels(vec![0, 1, 1, 1], &["a", "b"]);
        let params = GbtParams { learning_rate: 0.0, n_rounds: 5, subsample: 1.0, ..Default::default() };
        let model = fit_gbt(&m, &y, &params).unwrap();
        let p = model.predict_proba_row(&[(0, 9.0)]);
        assert!((p[0] - 0.25).abs() < 1e-9);
        assert!((p[1] - 0.75).abs() < 1e-9);
    }

    #[test]
    fn deterministic_with_subsample_and_seed() {
        let (m, y) = separable(12);
        let params = GbtParams { n_rounds: 8, subsample: 0.75, rng_seed: 5, ..Default::default() };
        let a = fit_gbt(&m, &y, &params).unwrap();
        let b = fit_gbt(&m, &y, &params).unwrap();
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.train_loss, b.train_loss);
    }

    #[test]
    fn loss_non_increasing_at_full_subsample() {
        let (m, y) = separable(15);
        let params = GbtParams { n_rounds: 40, subsample: 1.0, rng_seed: 3, ..Default::default() };
        let model = fit_gbt(&m, &y, &params).unwrap();
        for w in model.train_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {:?}", model.train_loss);
        }
    }

    #[test]
    fn multiclass_softmax_sums_to_one() {
        let m = SparseMatrix::from_rows(
            2,
            vec![vec![(0, 1.0)], vec![(1, 1.0)], vec![(0, 1.0), (1, 1.0)], vec![]],
        )
        .unwrap();
        let y = labels(vec![0, 1, 2, 0], &["a", "b", "c"]);
        let params = GbtParams { n_rounds: 10, subsample: 1.0, ..Default::default() };
        let model = fit_gbt(&m, &y, &params).unwrap();
        for i in 0..m.n_rows() {
            let p = model.predict_proba_row(m.row(i));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
