//! The shared CART tree builder.
//!
//! Classification trees split on Gini impurity decrease; the regression
//! trees used inside boosting split on second-order gain. Both run over a
//! column-major sparse view with implicit zeros: candidate thresholds are
//! midpoints between consecutive distinct sorted values, with the zero
//! block spliced between negatives and positives.
//!
//! Exact gain ties are broken uniformly at random from the tree's seeded
//! RNG, so duplicated columns share splits instead of starving by index
//! order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::SparseMatrix;
use crate::rng::PipelineRng;

/// A fitted tree node. Rows route left when `value < threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split { feature: usize, threshold: f64, gain: f64, left: usize, right: usize },
    Leaf { value: Vec<f64> },
}

/// A fitted decision tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Evaluate the tree on one sparse row.
    pub fn eval<'a>(&'a self, row: &[(usize, f64)]) -> &'a [f64] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Split { feature, threshold, left, right, .. } => {
                    let v = lookup(row, *feature);
                    at = if v < *threshold { *left } else { *right };
                }
                Node::Leaf { value } => return value,
            }
        }
    }

    /// Sum of split gains per feature over `n_features` columns.
    pub fn gain_by_feature(&self, acc: &mut [f64]) {
        for node in &self.nodes {
            if let Node::Split { feature, gain, .. } = node {
                acc[*feature] += *gain;
            }
        }
    }
}

fn lookup(row: &[(usize, f64)], col: usize) -> f64 {
    match row.binary_search_by_key(&col, |&(c, _)| c) {
        Ok(i) => row[i].1,
        Err(_) => 0.0,
    }
}

/// Column-major sparse view shared by every tree of one fit.
pub(crate) struct ColStore {
    pub cols: Vec<Vec<(usize, f64)>>,
}

impl ColStore {
    pub fn new(matrix: &SparseMatrix) -> Self {
        Self { cols: matrix.transpose_columns() }
    }

    /// Values of column `j` aligned with the (sorted, possibly repeating)
    /// `rows` index set; implicit zeros materialized.
    fn gather(&self, j: usize, rows: &[usize]) -> Vec<f64> {
        let col = &self.cols[j];
        let mut out = Vec::with_capacity(rows.len());
        let mut p = 0usize;
        for &r in rows {
            while p < col.len() && col[p].0 < r {
                p += 1;
            }
            if p < col.len() && col[p].0 == r {
                out.push(col[p].1);
            } else {
                out.push(0.0);
            }
        }
        out
    }
}

/// Split quality measure over per-row targets.
pub(crate) trait Criterion {
    /// Accumulated statistics for a row set.
    type Stats: Clone;

    fn empty(&self) -> Self::Stats;
    fn add(&self, stats: &mut Self::Stats, row: usize);
    fn subtract(&self, total: &Self::Stats, left: &Self::Stats) -> Self::Stats;
    /// Gain of splitting `parent` into `left`/`right`; `None` when a side
    /// is unsplittable (e.g. empty).
    fn gain(&self, parent: &Self::Stats, left: &Self::Stats, right: &Self::Stats) -> Option<f64>;
    fn leaf_value(&self, stats: &Self::Stats) -> Vec<f64>;
    /// Nothing left to gain at this node.
    fn is_pure(&self, stats: &Self::Stats) -> bool;
}

/// Gini impurity decrease over dense class ids.
pub(crate) struct GiniCriterion<'a> {
    pub labels: &'a [usize],
    pub n_classes: usize,
}

#[derive(Clone)]
pub(crate) struct ClassCounts {
    counts: Vec<u32>,
    total: u32,
}

impl ClassCounts {
    fn gini(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let n = self.total as f64;
        let sum_sq: f64 = self.counts.iter().map(|&c| {
            let p = c as f64 / n;
            p * p
        }).sum();
        1.0 - sum_sq
    }

    pub fn distribution(&self) -> Vec<f64> {
        let n = self.total.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

impl Criterion for GiniCriterion<'_> {
    type Stats = ClassCounts;

    fn empty(&self) -> ClassCounts {
        ClassCounts { counts: vec![0; self.n_classes], total: 0 }
    }

    fn add(&self, stats: &mut ClassCounts, row: usize) {
        stats.counts[self.labels[row]] += 1;
        stats.total += 1;
    }

    fn subtract(&self, total: &ClassCounts, left: &ClassCounts) -> ClassCounts {
        ClassCounts {
            counts: total.counts.iter().zip(&left.counts).map(|(t, l)| t - l).collect(),
            total: total.total - left.total,
        }
    }

    fn gain(&self, parent: &ClassCounts, left: &ClassCounts, right: &ClassCounts) -> Option<f64> {
        if left.total == 0 || right.total == 0 {
            return None;
        }
        let n = parent.total as f64;
        let weighted =
            left.total as f64 / n * left.gini() + right.total as f64 / n * right.gini();
        Some(parent.gini() - weighted)
    }

    fn leaf_value(&self, stats: &ClassCounts) -> Vec<f64> {
        stats.distribution()
    }

    fn is_pure(&self, stats: &ClassCounts) -> bool {
        stats.counts.iter().filter(|&&c| c > 0).count() <= 1
    }
}

/// Second-order boosting gain over per-row gradient/hessian pairs, with an
/// L2 leaf penalty.
pub(crate) struct GradCriterion<'a> {
    pub grad: &'a [f64],
    pub hess: &'a [f64],
    pub lambda: f64,
}

#[derive(Clone)]
pub(crate) struct GradSums {
    g: f64,
    h: f64,
    n: u32,
}

impl Criterion for GradCriterion<'_> {
    type Stats = GradSums;

    fn empty(&self) -> GradSums {
        GradSums { g: 0.0, h: 0.0, n: 0 }
    }

    fn add(&self, stats: &mut GradSums, row: usize) {
        stats.g += self.grad[row];
        stats.h += self.hess[row];
        stats.n += 1;
    }

    fn subtract(&self, total: &GradSums, left: &GradSums) -> GradSums {
        GradSums { g: total.g - left.g, h: total.h - left.h, n: total.n - left.n }
    }

    fn gain(&self, parent: &GradSums, left: &GradSums, right: &GradSums) -> Option<f64> {
        if left.n == 0 || right.n == 0 {
            return None;
        }
        let score = |s: &GradSums| s.g * s.g / (s.h + self.lambda);
        Some(0.5 * (score(left) + score(right) - score(parent)))
    }

    fn leaf_value(&self, stats: &GradSums) -> Vec<f64> {
        vec![-stats.g / (stats.h + self.lambda)]
    }

    fn is_pure(&self, stats: &GradSums) -> bool {
        // all-equal gradients still profit from no split; rely on gain cutoff
        stats.n <= 1
    }
}

/// How many features each split considers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubset {
    /// `max(1, floor(sqrt(n_cols)))` random features per split.
    Sqrt,
    /// Every feature at every split.
    All,
    /// A fixed count, clamped to `n_cols`.
    Fixed(usize),
}

impl FeatureSubset {
    fn count(&self, n_cols: usize) -> usize {
        match self {
            FeatureSubset::Sqrt => ((n_cols as f64).sqrt().floor() as usize).max(1),
            FeatureSubset::All => n_cols,
            FeatureSubset::Fixed(k) => (*k).clamp(1, n_cols),
        }
    }
}

pub(crate) struct TreeConfig {
    pub max_depth: usize,
    pub feature_subset: FeatureSubset,
    /// Splits with gain below this are not taken. Gini trees use 0.0 so
    /// zero-gain partitions of impure nodes still happen (XOR-style data
    /// needs them); boosting trees demand strictly positive gain.
    pub min_gain: f64,
}

pub(crate) struct TreeBuilder<'a, C: Criterion> {
    store: &'a ColStore,
    criterion: &'a C,
    config: &'a TreeConfig,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl<'a, C: Criterion> TreeBuilder<'a, C> {
    pub fn new(store: &'a ColStore, criterion: &'a C, config: &'a TreeConfig) -> Self {
        Self { store, criterion, config }
    }

    /// Fit one tree on the (sorted, possibly repeating) row index set.
    pub fn fit(&self, rows: Vec<usize>, rng: &mut PipelineRng) -> Tree {
        let mut nodes = Vec::new();
        self.grow(rows, 0, &mut nodes, rng);
        Tree { nodes }
    }

    fn grow(&self, rows: Vec<usize>, depth: usize, nodes: &mut Vec<Node>, rng: &mut PipelineRng) -> usize {
        let mut stats = self.criterion.empty();
        for &r in &rows {
            self.criterion.add(&mut stats, r);
        }
        let make_leaf = |nodes: &mut Vec<Node>, stats: &C::Stats| {
            let id = nodes.len();
            nodes.push(Node::Leaf { value: self.criterion.leaf_value(stats) });
            id
        };
        if depth >= self.config.max_depth || rows.len() < 2 || self.criterion.is_pure(&stats) {
            return make_leaf(nodes, &stats);
        }
        let best = self.find_best_split(&rows, &stats, rng);
        let Some(best) = best else {
            return make_leaf(nodes, &stats);
        };

        let values = self.store.gather(best.feature, &rows);
        let mut left_rows = Vec::new();
        let mut right_rows = Vec::new();
        for (i, &r) in rows.iter().enumerate() {
            if values[i] < best.threshold {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }
        drop(values);
        drop(rows);

        let id = nodes.len();
        nodes.push(Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            gain: best.gain,
            left: 0,
            right: 0,
        });
        let left = self.grow(left_rows, depth + 1, nodes, rng);
        let right = self.grow(right_rows, depth + 1, nodes, rng);
        if let Node::Split { left: l, right: r, .. } = &mut nodes[id] {
            *l = left;
            *r = right;
        }
        id
    }

    fn candidate_features(&self, rng: &mut PipelineRng) -> Vec<usize> {
        let n_cols = self.store.cols.len();
        let k = self.config.feature_subset.count(n_cols);
        if k >= n_cols {
            return (0..n_cols).collect();
        }
        // partial Fisher-Yates draw, then canonical order
        let mut pool: Vec<usize> = (0..n_cols).collect();
        for i in 0..k {
            let j = rng.gen_range(i..n_cols);
            pool.swap(i, j);
        }
        let mut chosen = pool[..k].to_vec();
        chosen.sort_unstable();
        chosen
    }

    fn find_best_split(
        &self,
        rows: &[usize],
        parent: &C::Stats,
        rng: &mut PipelineRng,
    ) -> Option<BestSplit> {
        let mut best: Option<BestSplit> = None;
        let mut ties = 0u32;
        for j in self.candidate_features(rng) {
            if let Some((threshold, gain)) = self.scan_feature(j, rows, parent) {
                if gain < self.config.min_gain {
                    continue;
                }
                match &best {
                    Some(b) if gain < b.gain => {}
                    Some(b) if gain == b.gain => {
                        // uniform choice among exact ties
                        ties += 1;
                        if rng.gen_range(0..=ties) == 0 {
                            best = Some(BestSplit { feature: j, threshold, gain });
                        }
                    }
                    _ => {
                        ties = 0;
                        best = Some(BestSplit { feature: j, threshold, gain });
                    }
                }
            }
        }
        best
    }

    /// Best threshold and gain for one feature, or `None` when constant.
    fn scan_feature(&self, j: usize, rows: &[usize], parent: &C::Stats) -> Option<(f64, f64)> {
        let values = self.store.gather(j, rows);
        // (value, position) pairs sorted by value then row for determinism
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_unstable_by(|&a, &b| {
            values[a].total_cmp(&values[b]).then_with(|| rows[a].cmp(&rows[b]))
        });

        let mut best: Option<(f64, f64)> = None;
        let mut left = self.criterion.empty();
        let mut i = 0usize;
        while i < rows.len() {
            let v = values[order[i]];
            // absorb the whole equal-value group
            while i < rows.len() && values[order[i]] == v {
                self.criterion.add(&mut left, rows[order[i]]);
                i += 1;
            }
            if i >= rows.len() {
                break;
            }
            let next = values[order[i]];
            let threshold = 0.5 * (v + next);
            // guard against rounding onto a boundary value
            if !(threshold > v && threshold <= next) {
                continue;
            }
            let right = self.criterion.subtract(parent, &left);
            if let Some(gain) = self.criterion.gain(parent, &left, &right) {
                if best.map_or(true, |(_, g)| gain > g) {
                    best = Some((threshold, gain));
                }
            }
        }
        best
    }
}
