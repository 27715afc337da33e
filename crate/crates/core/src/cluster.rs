//! kmeans++ clustering of malware families from multiclass confusion data,
//! with silhouette scoring for picking `k`.
//!
//! A family's embedding is its row of the averaged confusion matrix,
//! normalized to proportions: families confused with the same predictions
//! land close together. Empty clusters are dropped, not re-seeded, which is
//! why fewer groups than `k` can come back.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalReport;
use crate::par;
use crate::rng::{derive_seed, make_rng, PipelineRng};

use rand::Rng;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k = {k} exceeds {n} points")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be >= 1")]
    KZero,
    #[error("need at least two nonempty clusters for a silhouette")]
    SingleCluster,
    #[error("dimension mismatch: point {point} has {got} entries, expected {expected}")]
    DimensionMismatch { point: usize, got: usize, expected: usize },
    #[error("the report carries no confusion data")]
    NoConfusion,
}

/// One family embedded as its normalized confusion row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyPoint {
    pub family: String,
    pub vector: Vec<f64>,
}

/// Outcome of one kmeans run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clustering {
    pub k_requested: usize,
    /// Point index to cluster id (cluster ids are compacted, 0-based, in
    /// order of first appearance).
    pub assignments: Vec<usize>,
    /// Point indices per nonempty cluster, sorted by descending size.
    pub nonempty_groups: Vec<Vec<usize>>,
    /// Mean silhouette of the assignment, when at least two clusters are
    /// nonempty.
    pub silhouette: Option<f64>,
    /// Total within-cluster squared distance at convergence.
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(points: &[Vec<f64>]) -> Result<usize, ClusterError> {
    let dim = points.first().map(|p| p.len()).unwrap_or(0);
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(ClusterError::DimensionMismatch { point: i, got: p.len(), expected: dim });
        }
    }
    Ok(dim)
}

/// D²-weighted centroid seeding. The first centroid is uniform; each next
/// one is drawn with probability proportional to the squared distance to
/// its nearest chosen centroid. When every remaining distance is zero the
/// draw falls back to uniform.
pub fn kmeanspp_init(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut PipelineRng,
) -> Result<Vec<Vec<f64>>, ClusterError> {
    if k == 0 {
        return Err(ClusterError::KZero);
    }
    if k > points.len() {
        return Err(ClusterError::KTooLarge { k, n: points.len() });
    }
    check_dims(points)?;
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut best_d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = best_d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &d2) in best_d2.iter().enumerate() {
                if target < d2 {
                    chosen = i;
                    break;
                }
                target -= d2;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (i, point) in points.iter().enumerate() {
            let d2 = sq_dist(point, centroids.last().unwrap());
            if d2 < best_d2[i] {
                best_d2[i] = d2;
            }
        }
    }
    Ok(centroids)
}

/// Lloyd iterations from a kmeans++ seeding.
///
/// Runs until the largest centroid shift drops below `tol` or `max_iter`
/// passes. Emptied clusters keep their previous centroid during the run and
/// are dropped from the reported groups.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut PipelineRng,
    max_iter: usize,
    tol: f64,
) -> Result<Clustering, ClusterError> {
    let dim = check_dims(points)?;
    let mut centroids = kmeanspp_init(points, k, rng)?;
    let mut assignments = vec![0usize; points.len()];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        // assignment step
        let new_assignments = par::map_slice(points, |p| nearest(p, &centroids));
        // update step
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in new_assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(&points[i]) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // stale centroid stays where it was
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        assignments = new_assignments.iter().map(|&(c, _)| c).collect();
        if shift < tol {
            break;
        }
    }
    let inertia: f64 =
        points.iter().zip(&assignments).map(|(p, &c)| sq_dist(p, &centroids[c])).sum();

    // compact cluster ids in order of first appearance
    let mut remap: Vec<Option<usize>> = vec![None; k];
    let mut compact = Vec::new();
    let mut next = 0usize;
    for &c in &assignments {
        let id = *remap[c].get_or_insert_with(|| {
            let id = next;
            next += 1;
            id
        });
        compact.push(id);
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); next];
    for (i, &c) in compact.iter().enumerate() {
        groups[c].push(i);
    }
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));

    let silhouette = silhouette(points, &compact).ok();
    Ok(Clustering {
        k_requested: k,
        assignments: compact,
        nonempty_groups: groups,
        silhouette,
        inertia,
        iterations,
    })
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d2 = sq_dist(point, centroid);
        if d2 < best.1 {
            best = (c, d2);
        }
    }
    best
}

/// Mean silhouette `(b - a) / max(a, b)` over all points; singleton
/// clusters contribute zero.
pub fn silhouette(points: &[Vec<f64>], assignments: &[usize]) -> Result<f64, ClusterError> {
    if points.len() != assignments.len() || points.is_empty() {
        return Err(ClusterError::SingleCluster);
    }
    let n_clusters = assignments.iter().max().unwrap() + 1;
    let mut sizes = vec![0usize; n_clusters];
    for &c in assignments {
        sizes[c] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(ClusterError::SingleCluster);
    }
    let scores = par::map_range(points.len(), |i| {
        if sizes[assignments[i]] <= 1 {
            return 0.0;
        }
        // mean distance to every cluster
        let mut dist_sum = vec![0.0f64; n_clusters];
        for (j, p) in points.iter().enumerate() {
            if j != i {
                dist_sum[assignments[j]] += sq_dist(&points[i], p).sqrt();
            }
        }
        let own = assignments[i];
        let a = dist_sum[own] / (sizes[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for (c, &size) in sizes.iter().enumerate() {
            if c != own && size > 0 {
                b = b.min(dist_sum[c] / size as f64);
            }
        }
        if a.max(b) == 0.0 {
            0.0
        } else {
            (b - a) / a.max(b)
        }
    });
    Ok(scores.iter().sum::<f64>() / points.len() as f64)
}

/// Row-normalized family embeddings from an aggregated multiclass report.
pub fn family_points(report: &EvalReport) -> Result<Vec<FamilyPoint>, ClusterError> {
    if report.confusion_mean.is_empty() {
        return Err(ClusterError::NoConfusion);
    }
    let points = report
        .class_names
        .iter()
        .zip(&report.confusion_mean)
        .map(|(name, row)| {
            let total: f64 = row.iter().sum();
            let vector = if total > 0.0 {
                row.iter().map(|v| v / total).collect()
            } else {
                vec![0.0; row.len()]
            };
            FamilyPoint { family: name.clone(), vector }
        })
        .collect();
    Ok(points)
}

/// Named family groups from one clustering run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyClustering {
    pub k_requested: usize,
    pub n_groups: usize,
    pub silhouette: Option<f64>,
    /// Family names per group, largest group first.
    pub groups: Vec<Vec<String>>,
}

/// Cluster the families of a multiclass report with kmeans++.
pub fn cluster_families(
    report: &EvalReport,
    k: usize,
    seed: u64,
) -> Result<FamilyClustering, ClusterError> {
    let points = family_points(report)?;
    let vectors: Vec<Vec<f64>> = points.iter().map(|p| p.vector.clone()).collect();
    let mut rng = make_rng(derive_seed(seed, k as u64));
    let clustering = kmeans(&vectors, k, &mut rng, 300, 1e-6)?;
    let groups = clustering
        .nonempty_groups
        .iter()
        .map(|group| group.iter().map(|&i| points[i].family.clone()).collect())
        .collect();
    Ok(FamilyClustering {
        k_requested: k,
        n_groups: clustering.nonempty_groups.len(),
        silhouette: clustering.silhouette,
        groups,
    })
}

/// Silhouette-vs-k sweep; entries are `(k, silhouette, n_groups)`.
pub fn sweep_k(
    report: &EvalReport,
    k_range: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<(usize, f64, usize)>, ClusterError> {
    let mut out = Vec::new();
    for k in k_range {
        let clustering = cluster_families(report, k, seed)?;
        out.push((k, clustering.silhouette.unwrap_or(0.0), clustering.n_groups));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_pairs() -> Vec<Vec<f64>> {
        vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 10.0],
            vec![10.0, 11.0],
        ]
    }

    #[test]
    fn init_with_k_equal_n_returns_all_points() {
        let points = two_pairs();
        let centroids = kmeanspp_init(&points, 4, &mut make_rng(3)).unwrap();
        let mut got = centroids.clone();
        let mut want = points.clone();
        let key = |v: &Vec<f64>| (v[0] * 1000.0 + v[1]) as i64;
        got.sort_by_key(key);
        want.sort_by_key(key);
        assert_eq!(got, want);
    }

    #[test]
    fn init_splits_far_pairs_with_high_probability() {
        let points = two_pairs();
        let mut split = 0;
        for seed in 0..100 {
            let c = kmeanspp_init(&points, 2, &mut make_rng(seed)).unwrap();
            let near = |p: &[f64]| p[0] < 5.0;
            if near(&c[0]) != near(&c[1]) {
                split += 1;
            }
        }
        assert!(split >= 99, "split {split}/100");
    }

    #[test]
    fn init_on_identical_points_falls_back_to_uniform() {
        let points = vec![vec![1.0, 1.0]; 5];
        let centroids = kmeanspp_init(&points, 3, &mut make_rng(1)).unwrap();
        assert_eq!(centroids.len(), 3);
        assert!(centroids.iter().all(|c| c == &vec![1.0, 1.0]));
    }

    #[test]
    fn kmeans_recovers_two_tight_pairs() {
        let points = two_pairs();
        let clustering = kmeans(&points, 2, &mut make_rng(5), 300, 1e-6).unwrap();
        assert_eq!(clustering.assignments[0], clustering.assignments[1]);
        assert_eq!(clustering.assignments[2], clustering.assignments[3]);
        assert_ne!(clustering.assignments[0], clustering.assignments[2]);
        assert_eq!(clustering.nonempty_groups.len(), 2);
        // that partition minimizes inertia over all 2-partitions, with
        // centroids at the pair means
        assert!((clustering.inertia - 1.0).abs() < 1e-9, "{}", clustering.inertia);
        assert!(clustering.silhouette.unwrap() > 0.9);
    }

    #[test]
    fn k_one_single_group_mean() {
        let points = vec![vec![0.0], vec![2.0], vec![4.0]];
        let clustering = kmeans(&points, 1, &mut make_rng(1), 100, 1e-9).unwrap();
        assert_eq!(clustering.nonempty_groups.len(), 1);
        // inertia around the mean (2.0)
        assert!((clustering.inertia - 8.0).abs() < 1e-9);
        assert!(clustering.silhouette.is_none());
    }

    #[test]
    fn large_k_may_drop_empty_clusters() {
        // 6 points in two tight blobs; k=5 leaves some clusters empty after
        // Lloyd converges
        let mut points = Vec::new();
        for i in 0..3 {
            points.push(vec![0.0 + i as f64 * 0.01]);
            points.push(vec![100.0 + i as f64 * 0.01]);
        }
        let clustering = kmeans(&points, 5, &mut make_rng(2), 300, 1e-9).unwrap();
        assert!(clustering.nonempty_groups.len() <= 5);
        let covered: usize = clustering.nonempty_groups.iter().map(Vec::len).sum();
        assert_eq!(covered, 6);
    }

    #[test]
    fn silhouette_prefers_correct_assignment() {
        let points = two_pairs();
        let correct = silhouette(&points, &[0, 0, 1, 1]).unwrap();
        let wrong = silhouette(&points, &[0, 1, 0, 1]).unwrap();
        assert!(correct > 0.9, "{correct}");
        assert!(wrong < correct);
        // hand check: a = 1, b = sqrt(200)-ish for the first point
        let a: f64 = 1.0;
        let b = ((200.0f64).sqrt() + (221.0f64).sqrt()) / 2.0;
        let expected_first = (b - a) / b;
        // all four points are symmetric up to the inner distance
        assert!((correct - expected_first).abs() < 0.02);
    }

    #[test]
    fn singleton_contributes_zero() {
        let points = vec![vec![0.0], vec![0.5], vec![9.0]];
        let s = silhouette(&points, &[0, 0, 1]).unwrap();
        // third point is a singleton -> 0; the other two have positive scores
        let s0 = {
            let a: f64 = 0.5;
            let b: f64 = 9.0;
            (b - a) / b
        };
        let s1 = {
            let a: f64 = 0.5;
            let b: f64 = 8.5;
            (b - a) / b
        };
        let expected = (s0 + s1 + 0.0) / 3.0;
        assert!((s - expected).abs() < 1e-9);
    }

    #[test]
    fn single_cluster_silhouette_is_error() {
        let points = vec![vec![0.0], vec![1.0]];
        assert!(matches!(silhouette(&points, &[0, 0]), Err(ClusterError::SingleCluster)));
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let points = two_pairs();
        let a = kmeans(&points, 2, &mut make_rng(11), 300, 1e-6).unwrap();
        let b = kmeans(&points, 2, &mut make_rng(11), 300, 1e-6).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.inertia, b.inertia);
    }

    #[test]
    fn lloyd_never_increases_inertia() {
        // run kmeans step by step on random points and track the objective
        let mut rng = make_rng(7);
        let points: Vec<Vec<f64>> =
            (0..40).map(|_| vec![rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)]).collect();
        let mut centroids = kmeanspp_init(&points, 5, &mut rng).unwrap();
        let inertia_of = |centroids: &[Vec<f64>]| -> f64 {
            points.iter().map(|p| nearest(p, centroids).1).sum()
        };
        let mut last = f64::INFINITY;
        for _ in 0..20 {
            // assignment
            let assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
            let after_assign: f64 =
                points.iter().zip(&assign).map(|(p, &c)| sq_dist(p, &centroids[c])).sum();
            assert!(after_assign <= last + 1e-9, "assignment step increased inertia");
            // update
            let mut sums = vec![vec![0.0; 2]; 5];
            let mut counts = vec![0usize; 5];
            for (p, &c) in points.iter().zip(&assign) {
                counts[c] += 1;
                for (s, v) in sums[c].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..5 {
                if counts[c] > 0 {
                    centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
            let after_update = inertia_of(&centroids);
            assert!(after_update <= after_assign + 1e-9, "update step increased inertia");
            last = after_update;
        }
    }

    fn fake_report(confusion_mean: Vec<Vec<f64>>, names: Vec<String>) -> EvalReport {
        use crate::eval::{AvgSummary, MeanStd, Protocol};
        use crate::ml::ModelKind;
        let zero = MeanStd { mean: 0.0, std: 0.0 };
        let avg = AvgSummary { precision: zero, recall: zero, f1: zero };
        EvalReport {
            protocol: Protocol::Multiclass,
            model: ModelKind::Rf,
            class_names: names,
            per_class: vec![],
            micro: avg.clone(),
            macro_avg: avg,
            confusion_sum: confusion_mean
                .iter()
                .map(|r| r.iter().map(|&v| v as u64).collect())
                .collect(),
            confusion_mean,
            folds: 10,
            repeats: 1,
            n_fits: 10,
            seed: 0,
            balanced_draws: None,
            degraded_folds: false,
        }
    }

    #[test]
    fn identity_confusion_gives_singleton_groups() {
        let n = 4;
        let confusion: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 100.0 } else { 0.0 }).collect())
            .collect();
        let names = (0..n).map(|i| format!("F{i}")).collect();
        let report = fake_report(confusion, names);
        let clustering = cluster_families(&report, n, 42).unwrap();
        assert_eq!(clustering.n_groups, n);
        assert!(clustering.groups.iter().all(|g| g.len() == 1));
    }

    #[test]
    fn confused_pair_lands_together() {
        // families A and B predict into each other; C and D are clean
        let confusion = vec![
            vec![50.0, 50.0, 0.0, 0.0],
            vec![50.0, 50.0, 0.0, 0.0],
            vec![0.0, 0.0, 100.0, 0.0],
            vec![0.0, 0.0, 0.0, 100.0],
        ];
        let names = vec!["A".into(), "B".into(), "C".into(), "D".into()];
        let report = fake_report(confusion, names);
        let clustering = cluster_families(&report, 3, 7).unwrap();
        let group_of = |f: &str| {
            clustering.groups.iter().position(|g| g.iter().any(|x| x == f)).unwrap()
        };
        assert_eq!(group_of("A"), group_of("B"));
        assert_ne!(group_of("C"), group_of("D"));
    }

    #[test]
    fn row_normalization_is_permutation_equivariant() {
        let report = fake_report(
            vec![vec![30.0, 70.0], vec![60.0, 40.0]],
            vec!["X".into(), "Y".into()],
        );
        let points = family_points(&report).unwrap();
        assert_eq!(points[0].vector, vec![0.3, 0.7]);
        assert_eq!(points[1].vector, vec![0.6, 0.4]);
        // permuting confusion columns permutes vector entries identically
        let permuted = fake_report(
            vec![vec![70.0, 30.0], vec![40.0, 60.0]],
            vec!["X".into(), "Y".into()],
        );
        let permuted_points = family_points(&permuted).unwrap();
        let d = sq_dist(&points[0].vector, &points[1].vector);
        let d_permuted = sq_dist(&permuted_points[0].vector, &permuted_points[1].vector);
        assert!((d - d_permuted).abs() < 1e-12);
    }
}
