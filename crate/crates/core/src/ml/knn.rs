//! Distance-weighted k-nearest-neighbour classifier over sparse count
//! vectors. Euclidean distance on raw counts; an exact match short-circuits
//! to that neighbour's label.

use serde::{Deserialize, Serialize};

use super::MlError;
use crate::features::{LabelVector, SparseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    Distance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnParams {
    pub n_neighbors: usize,
    pub weighting: Weighting,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self { n_neighbors: 5, weighting: Weighting::Distance }
    }
}

/// The model is the training set itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnModel {
    pub class_names: Vec<String>,
    pub params: KnnParams,
    pub train: SparseMatrix,
    pub train_ids: Vec<usize>,
}

pub fn fit_knn(
    matrix: &SparseMatrix,
    labels: &LabelVector,
    params: &KnnParams,
) -> Result<KnnModel, MlError> {
    super::check_training_set(matrix, labels)?;
    if matrix.n_rows() < params.n_neighbors {
        return Err(MlError::TooFewNeighbors { have: matrix.n_rows(), need: params.n_neighbors });
    }
    Ok(KnnModel {
        class_names: labels.class_names.clone(),
        params: params.clone(),
        train: matrix.clone(),
        train_ids: labels.ids.clone(),
    })
}

/// Squared Euclidean distance between two sorted sparse rows.
fn sq_distance(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j) = (0usize, 0usize);
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => {
                acc += a[i].1 * a[i].1;
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                acc += b[j].1 * b[j].1;
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                let d = a[i].1 - b[j].1;
                acc += d * d;
                i += 1;
                j += 1;
            }
        }
    }
    for &(_, v) in &a[i..] {
        acc += v * v;
    }
    for &(_, v) in &b[j..] {
        acc += v * v;
    }
    acc
}

impl KnnModel {
    pub fn predict_proba_row(&self, row: &[(usize, f64)]) -> Vec<f64> {
        let k = self.params.n_neighbors;
        let mut dists: Vec<(f64, usize)> = (0..self.train.n_rows())
            .map(|i| (sq_distance(row, self.train.row(i)).sqrt(), i))
            .collect();
        // ties resolved by training-row index for determinism
        dists.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nearest = &dists[..k];

        let mut proba = vec![0.0f64; self.class_names.len()];
        if nearest[0].0 == 0.0 {
            // exact match: lowest-index zero-distance neighbour decides
            proba[self.train_ids[nearest[0].1]] = 1.0;
            return proba;
        }
        let mut total = 0.0;
        for &(d, i) in nearest {
            let w = match self.params.weighting {
                Weighting::Uniform => 1.0,
                Weighting::Distance => 1.0 / d,
            };
            proba[self.train_ids[i]] += w;
            total += w;
        }
        for p in &mut proba {
            *p /= total;
        }
        proba
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(ids: Vec<usize>, names: &[&str]) -> LabelVector {
        LabelVector { class_names: names.iter().map(|s| s.to_string()).collect(), ids }
    }

    /// 1-d training points 0, 1, 3, 4, 6 with classes 0, 0, 1, 1, 0.
    fn five_points() -> KnnModel {
        let rows = [0.0, 1.0, 3.0, 4.0, 6.0]
            .iter()
            .map(|&v| if v == 0.0 { vec![] } else { vec![(0usize, v)] })
            .collect();
        let m = SparseMatrix::from_rows(1, rows).unwrap();
        let y = labels(vec![0, 0, 1, 1, 0], &["lo", "hi"]);
        fit_knn(&m, &y, &KnnParams::default()).unwrap()
    }

    #[test]
    fn weighted_vote_matches_hand_computation() {
        let model = five_points();
        // query x=2: distances 2,1,1,2,4 -> weights 1/2,1,1,1/2,1/4
        // class 0: 1/2 + 1 + 1/4 = 1.75; class 1: 1 + 1/2 = 1.5
        let p = model.predict_proba_row(&[(0, 2.0)]);
        assert!((p[0] - 1.75 / 3.25).abs() < 1e-9, "{p:?}");
        assert!((p[1] - 1.5 / 3.25).abs() < 1e-9, "{p:?}");
    }

    #[test]
    fn exact_match_short_circuits() {
        let model = five_points();
        let p = model.predict_proba_row(&[(0, 3.0)]);
        assert_eq!(p, vec![0.0, 1.0]);
        // a query equal to a training row returns that row's label
        let p = model.predict_proba_row(&[]);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn k_one_returns_nearest_label() {
        let rows = vec![vec![], vec![(0usize, 10.0)]];
        let m = SparseMatrix::from_rows(1, rows).unwrap();
        let y = labels(vec![0, 1], &["near", "far"]);
        let model = fit_knn(&m, &y, &KnnParams { n_neighbors: 1, weighting: Weighting::Distance })
            .unwrap();
        let p = model.predict_proba_row(&[(0, 2.0)]);
        assert_eq!(p, vec![1.0, 0.0]);
        // equidistant tie at k=1 goes to the lower training index
        let p = model.predict_proba_row(&[(0, 5.0)]);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn too_few_rows_rejected() {
        let m = SparseMatrix::from_rows(1, vec![vec![(0, 1.0)], vec![]]).unwrap();
        let y = labels(vec![0, 1], &["a", "b"]);
        assert!(matches!(
            fit_knn(&m, &y, &KnnParams { n_neighbors: 5, weighting: Weighting::Distance }),
            Err(MlError::TooFewNeighbors { .. })
        ));
    }
}
