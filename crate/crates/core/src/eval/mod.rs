//! Experiment protocols: unbalanced binary, 1:1 resampled binary, and
//! balanced multiclass, all under repeated stratified k-fold
//! cross-validation with per-fold metric pooling.
//!
//! A master seed derives per-repeat seeds through a counter, so any repeat
//! can be re-run in isolation; repeats and folds execute concurrently and
//! aggregate in a deterministic order.

pub mod metrics;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{LabelVector, SparseMatrix};
use crate::ml::{
    fit_gbt, fit_knn, fit_random_forest, GbtParams, KnnParams, MlError, ModelKind, RfParams,
    TrainedModel,
};
use crate::par;
use crate::rng::{derive_seed, make_rng, PipelineRng};

pub use metrics::{classification_report, confusion_matrix, mean_std, ClassMetrics, MeanStd, Report};

use rand::Rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("empty input")]
    Empty,
    #[error("k = {k} folds exceed {n} rows")]
    KTooLarge { k: usize, n: usize },
    #[error("both classes must be present")]
    SingleClass,
    #[error("balanced sampling needs at least {benign} malicious rows, have {malicious}")]
    InsufficientMalicious { benign: usize, malicious: usize },
    #[error("no family meets the eligibility threshold")]
    NoEligibleFamilies,
    #[error("bad config: {0}")]
    BadParams(String),
    #[error(transparent)]
    Ml(#[from] MlError),
}

/// Which experiment is run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    BinaryFull,
    BinaryBalanced,
    Multiclass,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::BinaryFull => f.write_str("binary-full"),
            Protocol::BinaryBalanced => f.write_str("binary-balanced"),
            Protocol::Multiclass => f.write_str("multiclass"),
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary-full" => Ok(Protocol::BinaryFull),
            "binary-balanced" => Ok(Protocol::BinaryBalanced),
            "multiclass" => Ok(Protocol::Multiclass),
            other => Err(format!(
                "unknown protocol `{other}` (expected binary-full|binary-balanced|multiclass)"
            )),
        }
    }
}

/// Full experiment configuration; JSON configs may set any subset of
/// fields, the rest take these defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub folds: usize,
    pub repeats: usize,
    /// Minimum family size for multiclass eligibility.
    pub family_threshold: usize,
    /// Rows sampled per family and repeat in the multiclass protocol.
    pub sample_per_family: usize,
    pub rng_seed: u64,
    pub models: Vec<ModelKind>,
    pub rf: RfParams,
    pub gbt: GbtParams,
    pub knn: KnnParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::BinaryFull,
            folds: 10,
            repeats: 3,
            family_threshold: 100,
            sample_per_family: 100,
            rng_seed: 0,
            models: vec![ModelKind::Rf, ModelKind::Gbt, ModelKind::Knn],
            rf: RfParams::default(),
            gbt: GbtParams::default(),
            knn: KnnParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.folds < 2 {
            return Err(EvalError::BadParams("folds must be >= 2".into()));
        }
        if self.repeats < 1 {
            return Err(EvalError::BadParams("repeats must be >= 1".into()));
        }
        if self.models.is_empty() {
            return Err(EvalError::BadParams("at least one model required".into()));
        }
        if self.protocol == Protocol::Multiclass {
            if self.sample_per_family == 0 || self.sample_per_family > self.family_threshold {
                return Err(EvalError::BadParams(
                    "sample_per_family must be in 1..=family_threshold".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Stratified fold assignment.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    /// Disjoint test-fold index sets covering every row exactly once.
    pub folds: Vec<Vec<usize>>,
    /// Raised when some class has fewer members than folds; proportions are
    /// then best-effort.
    pub degraded: bool,
}

/// Split `labels` into `k` disjoint folds with per-class proportions within
/// one sample of the global ones. Remainders rotate across folds so fold
/// sizes stay within one row of each other.
pub fn stratified_kfold(
    labels: &[usize],
    k: usize,
    rng: &mut PipelineRng,
) -> Result<FoldPlan, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    if k < 2 {
        return Err(EvalError::BadParams("k must be >= 2".into()));
    }
    if k > labels.len() {
        return Err(EvalError::KTooLarge { k, n: labels.len() });
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        per_class[c].push(i);
    }
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut degraded = false;
    let mut start = 0usize;
    for rows in per_class.iter_mut() {
        if rows.is_empty() {
            continue;
        }
        if rows.len() < k {
            degraded = true;
        }
        // shuffle within the class
        for i in (1..rows.len()).rev() {
            let j = rng.gen_range(0..=i);
            rows.swap(i, j);
        }
        for (i, &row) in rows.iter().enumerate() {
            folds[(start + i) % k].push(row);
        }
        start = (start + rows.len()) % k;
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(FoldPlan { folds, degraded })
}

/// One repeat's evaluation unit: a row subset of the full matrix plus fold
/// assignments local to that subset.
#[derive(Debug, Clone)]
struct RepeatPlan {
    rows: Vec<usize>,
    folds: Vec<Vec<usize>>,
    degraded: bool,
}

/// Aggregated outcome of one protocol for one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub model: ModelKind,
    /// Axis order of the confusion matrices.
    pub class_names: Vec<String>,
    /// Multiclass reports sort descending by mean F1; binary reports keep
    /// class order.
    pub per_class: Vec<ClassSummary>,
    pub micro: AvgSummary,
    pub macro_avg: AvgSummary,
    pub confusion_sum: Vec<Vec<u64>>,
    /// Per-cell mean over repeats.
    pub confusion_mean: Vec<Vec<f64>>,
    pub folds: usize,
    pub repeats: usize,
    /// Fit/evaluate cycles actually executed.
    pub n_fits: usize,
    pub seed: u64,
    /// Malicious rows drawn per repeat (balanced protocol only).
    pub balanced_draws: Option<Vec<usize>>,
    pub degraded_folds: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSummary {
    pub name: String,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub support_total: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AvgSummary {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

fn fit_model(
    kind: ModelKind,
    matrix: &SparseMatrix,
    labels: &LabelVector,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<TrainedModel, MlError> {
    Ok(match kind {
        ModelKind::Rf => TrainedModel::Rf(fit_random_forest(
            matrix,
            labels,
            &RfParams { rng_seed: seed, ..config.rf.clone() },
        )?),
        ModelKind::Gbt => TrainedModel::Gbt(fit_gbt(
            matrix,
            labels,
            &GbtParams { rng_seed: seed, ..config.gbt.clone() },
        )?),
        ModelKind::Knn => TrainedModel::Knn(fit_knn(matrix, labels, &config.knn)?),
    })
}

/// Run every configured model over the per-repeat plans and aggregate.
fn run_plans(
    matrix: &SparseMatrix,
    class_names: &[String],
    row_class_ids: &[usize],
    plans: &[RepeatPlan],
    config: &ExperimentConfig,
    protocol: Protocol,
    balanced_draws: Option<Vec<usize>>,
) -> Result<Vec<EvalReport>, EvalError> {
    let n_classes = class_names.len();
    let degraded = plans.iter().any(|p| p.degraded);
    let mut out = Vec::with_capacity(config.models.len());
    for (model_idx, &kind) in config.models.iter().enumerate() {
        let jobs: Vec<(usize, usize)> = (0..plans.len())
            .flat_map(|r| (0..config.folds).map(move |f| (r, f)))
            .collect();
        let results = par::map_slice(&jobs, |&(r, f)| -> Result<(Report, Vec<Vec<u64>>, usize), EvalError> {
            let plan = &plans[r];
            let test_local = &plan.folds[f];
            let mut in_test = vec![false; plan.rows.len()];
            for &i in test_local {
                in_test[i] = true;
            }
            let train_global: Vec<usize> = (0..plan.rows.len())
                .filter(|&i| !in_test[i])
                .map(|i| plan.rows[i])
                .collect();
            let test_global: Vec<usize> = test_local.iter().map(|&i| plan.rows[i]).collect();

            let train_matrix = matrix.select_rows(&train_global);
            let train_labels = LabelVector {
                class_names: class_names.to_vec(),
                ids: train_global.iter().map(|&i| row_class_ids[i]).collect(),
            };
            let repeat_seed = derive_seed(config.rng_seed, r as u64);
            let fit_seed = derive_seed(repeat_seed, (f * 8 + model_idx) as u64 + 1);
            let model = fit_model(kind, &train_matrix, &train_labels, config, fit_seed)?;

            let test_matrix = matrix.select_rows(&test_global);
            let y_pred = model.predict(&test_matrix)?;
            let y_true: Vec<usize> = test_global.iter().map(|&i| row_class_ids[i]).collect();
            let report = classification_report(&y_true, &y_pred, n_classes)?;
            let confusion = confusion_matrix(&y_true, &y_pred, n_classes)?;
            Ok((report, confusion, r))
        });

        let mut fold_reports = Vec::with_capacity(results.len());
        let mut confusion_sum = vec![vec![0u64; n_classes]; n_classes];
        for item in results {
            let (report, confusion, _) = item?;
            for (acc, row) in confusion_sum.iter_mut().zip(&confusion) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            fold_reports.push(report);
        }
        let n_fits = fold_reports.len();
        out.push(aggregate(
            protocol,
            kind,
            class_names,
            &fold_reports,
            confusion_sum,
            config,
            n_fits,
            balanced_draws.clone(),
            degraded,
        ));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn aggregate(
    protocol: Protocol,
    model: ModelKind,
    class_names: &[String],
    fold_reports: &[Report],
    confusion_sum: Vec<Vec<u64>>,
    config: &ExperimentConfig,
    n_fits: usize,
    balanced_draws: Option<Vec<usize>>,
    degraded_folds: bool,
) -> EvalReport {
    let n_classes = class_names.len();
    let summarize = |pick: &dyn Fn(&Report) -> ClassMetrics, name: &str| -> ClassSummary {
        let precision: Vec<f64> = fold_reports.iter().map(|r| pick(r).precision).collect();
        let recall: Vec<f64> = fold_reports.iter().map(|r| pick(r).recall).collect();
        let f1: Vec<f64> = fold_reports.iter().map(|r| pick(r).f1).collect();
        let support: u64 = fold_reports.iter().map(|r| pick(r).support as u64).sum();
        ClassSummary {
            name: name.to_string(),
            precision: mean_std(&precision),
            recall: mean_std(&recall),
            f1: mean_std(&f1),
            support_total: support,
        }
    };
    let mut per_class: Vec<ClassSummary> = (0..n_classes)
        .map(|c| summarize(&move |r: &Report| r.per_class[c], &class_names[c]))
        .collect();
    if protocol == Protocol::Multiclass {
        per_class.sort_by(|a, b| b.f1.mean.total_cmp(&a.f1.mean).then(a.name.cmp(&b.name)));
    }
    let micro_summary = summarize(&|r: &Report| r.micro, "micro");
    let macro_summary = summarize(&|r: &Report| r.macro_avg, "macro");
    let confusion_mean = confusion_sum
        .iter()
        .map(|row| row.iter().map(|&v| v as f64 / config.repeats as f64).collect())
        .collect();
    EvalReport {
        protocol,
        model,
        class_names: class_names.to_vec(),
        per_class,
        micro: AvgSummary {
            precision: micro_summary.precision,
            recall: micro_summary.recall,
            f1: micro_summary.f1,
        },
        macro_avg: AvgSummary {
            precision: macro_summary.precision,
            recall: macro_summary.recall,
            f1: macro_summary.f1,
        },
        confusion_sum,
        confusion_mean,
        folds: config.folds,
        repeats: config.repeats,
        n_fits,
        seed: config.rng_seed,
        balanced_draws,
        degraded_folds,
    }
}

/// Labelled input shared by the protocols.
#[derive(Debug, Clone, Copy)]
pub struct ProtocolInput<'a> {
    pub matrix: &'a SparseMatrix,
    /// Benign/malicious labels; id 0 = benign, 1 = malicious.
    pub classes: &'a LabelVector,
    /// Per-row family names aligned with the matrix.
    pub families: &'a [String],
}

/// Repeated stratified CV over the full, unbalanced corpus.
pub fn run_binary_full(
    input: ProtocolInput<'_>,
    config: &ExperimentConfig,
) -> Result<Vec<EvalReport>, EvalError> {
    config.validate()?;
    check_both_classes(input.classes)?;
    let n = input.matrix.n_rows();
    let plans: Vec<RepeatPlan> = (0..config.repeats)
        .map(|r| {
            let repeat_seed = derive_seed(config.rng_seed, r as u64);
            let mut rng = make_rng(derive_seed(repeat_seed, 0));
            let plan = stratified_kfold(&input.classes.ids, config.folds, &mut rng)?;
            Ok(RepeatPlan { rows: (0..n).collect(), folds: plan.folds, degraded: plan.degraded })
        })
        .collect::<Result<_, EvalError>>()?;
    run_plans(
        input.matrix,
        &input.classes.class_names,
        &input.classes.ids,
        &plans,
        config,
        Protocol::BinaryFull,
        None,
    )
}

/// Per repeat, draw as many malicious rows as there are benign rows (without
/// replacement), then run stratified CV on the 1:1 subset.
pub fn run_binary_balanced(
    input: ProtocolInput<'_>,
    config: &ExperimentConfig,
) -> Result<Vec<EvalReport>, EvalError> {
    config.validate()?;
    check_both_classes(input.classes)?;
    let benign: Vec<usize> =
        (0..input.classes.len()).filter(|&i| input.classes.ids[i] == 0).collect();
    let malicious: Vec<usize> =
        (0..input.classes.len()).filter(|&i| input.classes.ids[i] == 1).collect();
    if malicious.len() < benign.len() {
        return Err(EvalError::InsufficientMalicious {
            benign: benign.len(),
            malicious: malicious.len(),
        });
    }
    let mut draws = Vec::with_capacity(config.repeats);
    let plans: Vec<RepeatPlan> = (0..config.repeats)
        .map(|r| {
            let repeat_seed = derive_seed(config.rng_seed, r as u64);
            let mut rng = make_rng(derive_seed(repeat_seed, 1));
            let sampled = sample_without_replacement(&malicious, benign.len(), &mut rng);
            draws.push(sampled.len());
            let mut rows = benign.clone();
            rows.extend(sampled);
            rows.sort_unstable();
            let local_ids: Vec<usize> = rows.iter().map(|&i| input.classes.ids[i]).collect();
            let mut fold_rng = make_rng(derive_seed(repeat_seed, 0));
            let plan = stratified_kfold(&local_ids, config.folds, &mut fold_rng)?;
            Ok(RepeatPlan { rows, folds: plan.folds, degraded: plan.degraded })
        })
        .collect::<Result<_, EvalError>>()?;
    run_plans(
        input.matrix,
        &input.classes.class_names,
        &input.classes.ids,
        &plans,
        config,
        Protocol::BinaryBalanced,
        Some(draws),
    )
}

/// Family classification over eligible families: threshold filtering,
/// per-repeat balanced sampling, stratified CV. The benign family never
/// participates.
pub fn run_multiclass(
    input: ProtocolInput<'_>,
    config: &ExperimentConfig,
) -> Result<Vec<EvalReport>, EvalError> {
    config.validate()?;
    if input.families.len() != input.matrix.n_rows() {
        return Err(EvalError::LengthMismatch {
            a: input.families.len(),
            b: input.matrix.n_rows(),
        });
    }
    // count malicious families
    let mut counts: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for (i, family) in input.families.iter().enumerate() {
        if input.classes.ids[i] == 1 {
            *counts.entry(family.as_str()).or_insert(0) += 1;
        }
    }
    // eligible families by descending count, name as tie-break
    let mut eligible: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, n)| n >= config.family_threshold)
        .collect();
    eligible.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    if eligible.len() < 2 {
        return Err(EvalError::NoEligibleFamilies);
    }
    let class_names: Vec<String> = eligible.iter().map(|(name, _)| name.to_string()).collect();
    let family_id: std::collections::HashMap<&str, usize> =
        eligible.iter().enumerate().map(|(id, &(name, _))| (name, id)).collect();

    // global per-row ids; rows outside the eligible set never enter a plan
    let row_ids: Vec<usize> = input
        .families
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if input.classes.ids[i] == 1 {
                family_id.get(f.as_str()).copied().unwrap_or(usize::MAX)
            } else {
                usize::MAX
            }
        })
        .collect();
    let mut rows_per_family: Vec<Vec<usize>> = vec![Vec::new(); class_names.len()];
    for (i, &id) in row_ids.iter().enumerate() {
        if id != usize::MAX {
            rows_per_family[id].push(i);
        }
    }

    let plans: Vec<RepeatPlan> = (0..config.repeats)
        .map(|r| {
            let repeat_seed = derive_seed(config.rng_seed, r as u64);
            let mut rng = make_rng(derive_seed(repeat_seed, 2));
            let mut rows = Vec::with_capacity(class_names.len() * config.sample_per_family);
            for family_rows in &rows_per_family {
                rows.extend(sample_without_replacement(
                    family_rows,
                    config.sample_per_family,
                    &mut rng,
                ));
            }
            rows.sort_unstable();
            let local_ids: Vec<usize> = rows.iter().map(|&i| row_ids[i]).collect();
            let mut fold_rng = make_rng(derive_seed(repeat_seed, 0));
            let plan = stratified_kfold(&local_ids, config.folds, &mut fold_rng)?;
            Ok(RepeatPlan { rows, folds: plan.folds, degraded: plan.degraded })
        })
        .collect::<Result<_, EvalError>>()?;
    run_plans(input.matrix, &class_names, &row_ids, &plans, config, Protocol::Multiclass, None)
}

fn check_both_classes(classes: &LabelVector) -> Result<(), EvalError> {
    let has_benign = classes.ids.iter().any(|&c| c == 0);
    let has_malicious = classes.ids.iter().any(|&c| c == 1);
    if !has_benign || !has_malicious {
        return Err(EvalError::SingleClass);
    }
    Ok(())
}

/// Draw `k` distinct elements of `pool` (all of them when `k >= len`),
/// returned sorted.
fn sample_without_replacement(pool: &[usize], k: usize, rng: &mut PipelineRng) -> Vec<usize> {
    if k >= pool.len() {
        let mut all = pool.to_vec();
        all.sort_unstable();
        return all;
    }
    let mut scratch = pool.to_vec();
    for i in 0..k {
        let j = rng.gen_range(i..scratch.len());
        scratch.swap(i, j);
    }
    let mut chosen = scratch[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Serialize reports (one per model) to pretty JSON.
pub fn write_reports_json(path: &std::path::Path, reports: &[EvalReport]) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(reports).expect("reports serialize");
    std::fs::write(path, json)
}

pub fn read_reports_json(path: &std::path::Path) -> Result<Vec<EvalReport>, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

/// Confusion matrix as CSV: header row of predicted class names, one line
/// per true class, mean counts.
pub fn confusion_csv(report: &EvalReport) -> String {
    let mut out = String::from("family");
    for name in &report.class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, name) in report.class_names.iter().enumerate() {
        out.push_str(name);
        for v in &report.confusion_mean[i] {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn folds_partition_with_exact_divisibility() {
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let plan = stratified_kfold(&labels, 5, &mut make_rng(1)).unwrap();
        assert!(!plan.degraded);
        for fold in &plan.folds {
            assert_eq!(fold.len(), 2);
            let classes: Vec<usize> = fold.iter().map(|&i| labels[i]).collect();
            assert_eq!(classes.iter().filter(|&&c| c == 0).count(), 1);
            assert_eq!(classes.iter().filter(|&&c| c == 1).count(), 1);
        }
        let all: HashSet<usize> = plan.folds.iter().flatten().copied().collect();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn fold_sizes_differ_by_at_most_one() {
        let labels = vec![0usize; 101];
        let plan = stratified_kfold(&labels, 10, &mut make_rng(2)).unwrap();
        let mut sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![10, 10, 10, 10, 10, 10, 10, 10, 10, 11]);
    }

    #[test]
    fn folds_are_seed_deterministic() {
        let labels: Vec<usize> = (0..37).map(|i| i % 3).collect();
        let a = stratified_kfold(&labels, 5, &mut make_rng(9)).unwrap();
        let b = stratified_kfold(&labels, 5, &mut make_rng(9)).unwrap();
        assert_eq!(a.folds, b.folds);
    }

    #[test]
    fn tiny_class_degrades_with_warning() {
        let mut labels = vec![0usize; 30];
        labels.push(1); // a single row of class 1
        let plan = stratified_kfold(&labels, 5, &mut make_rng(3)).unwrap();
        assert!(plan.degraded);
        let total: usize = plan.folds.iter().map(Vec::len).sum();
        assert_eq!(total, 31);
    }

    #[test]
    fn k_larger_than_rows_rejected() {
        assert!(matches!(
            stratified_kfold(&[0, 1], 5, &mut make_rng(0)),
            Err(EvalError::KTooLarge { k: 5, n: 2 })
        ));
    }

    fn synthetic_binary(n_benign: usize, n_malicious: usize, seed: u64) -> (SparseMatrix, LabelVector, Vec<String>) {
        // benign rows light on feature 0, malicious rows heavy on feature 1
        let mut rng = make_rng(seed);
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        let mut families = Vec::new();
        for _ in 0..n_benign {
            rows.push(vec![(0, 1.0 + rng.gen_range(0..3) as f64)]);
            ids.push(0);
            families.push("Benign".to_string());
        }
        for i in 0..n_malicious {
            rows.push(vec![(1, 4.0 + rng.gen_range(0..3) as f64)]);
            ids.push(1);
            families.push(format!("Fam{}", i % 2));
        }
        let matrix = SparseMatrix::from_rows(2, rows).unwrap();
        let classes = LabelVector {
            class_names: vec!["benign".into(), "malicious".into()],
            ids,
        };
        (matrix, classes, families)
    }

    fn quick_config(models: Vec<ModelKind>) -> ExperimentConfig {
        ExperimentConfig {
            folds: 5,
            repeats: 2,
            models,
            rf: RfParams { n_estimators: 10, ..Default::default() },
            gbt: GbtParams { n_rounds: 5, ..Default::default() },
            knn: KnnParams { n_neighbors: 3, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn binary_full_counts_fits_exactly() {
        let (matrix, classes, families) = synthetic_binary(20, 30, 5);
        let input = ProtocolInput { matrix: &matrix, classes: &classes, families: &families };
        let config = quick_config(vec![ModelKind::Rf, ModelKind::Knn]);
        let reports = run_binary_full(input, &config).unwrap();
        assert_eq!(reports.len(), 2);
        for report in &reports {
            assert_eq!(report.n_fits, config.folds * config.repeats);
            // separable fixture: perfect on both classes
            assert!(report.per_class.iter().all(|c| c.f1.mean > 0.99), "{report:?}");
            // every fold metric present
            assert_eq!(report.confusion_sum.iter().flatten().sum::<u64>() as usize,
                50 * config.repeats);
        }
    }

    #[test]
    fn binary_full_needs_both_classes() {
        let (matrix, mut classes, families) = synthetic_binary(5, 5, 1);
        classes.ids = vec![1; 10];
        let input = ProtocolInput { matrix: &matrix, classes: &classes, families: &families };
        assert!(matches!(
            run_binary_full(input, &quick_config(vec![ModelKind::Rf])),
            Err(EvalError::SingleClass)
        ));
    }

    #[test]
    fn balanced_draws_exactly_benign_count() {
        let (matrix, classes, families) = synthetic_binary(10, 40, 7);
        let input = ProtocolInput { matrix: &matrix, classes: &classes, families: &families };
        let mut config = quick_config(vec![ModelKind::Rf]);
        config.repeats = 3;
        let reports = run_binary_balanced(input, &config).unwrap();
        let report = &reports[0];
        assert_eq!(report.balanced_draws, Some(vec![10, 10, 10]));
        // per repeat, 10 benign + 10 malicious rows evaluated once each
        assert_eq!(report.confusion_sum.iter().flatten().sum::<u64>(), 3 * 20);

        // distinct repeats draw different malicious subsets (w.h.p.)
        let (m2, c2, f2) = synthetic_binary(3, 200, 8);
        let input = ProtocolInput { matrix: &m2, classes: &c2, families: &f2 };
        let mut cfg = quick_config(vec![ModelKind::Knn]);
        cfg.repeats = 2;
        cfg.folds = 3;
        cfg.knn.n_neighbors = 1;
        let r = run_binary_balanced(input, &cfg).unwrap();
        assert_eq!(r[0].balanced_draws, Some(vec![3, 3]));
    }

    #[test]
    fn balanced_requires_enough_malicious() {
        let (matrix, classes, families) = synthetic_binary(20, 10, 2);
        let input = ProtocolInput { matrix: &matrix, classes: &classes, families: &families };
        assert!(matches!(
            run_binary_balanced(input, &quick_config(vec![ModelKind::Rf])),
            Err(EvalError::InsufficientMalicious { benign: 20, malicious: 10 })
        ));
    }

    fn synthetic_families(
        families: &[(&str, usize, usize)],
        seed: u64,
    ) -> (SparseMatrix, LabelVector, Vec<String>) {
        // one indicator feature per family at the given column
        let mut rng = make_rng(seed);
        let n_cols = families.len() + 1;
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        let mut names = Vec::new();
        for &(name, count, col) in families {
            for _ in 0..count {
                let mut row = vec![(col, 3.0 + rng.gen_range(0..2) as f64)];
                if rng.gen_bool(0.3) {
                    let noise_col = families.len();
                    row.push((noise_col, 1.0));
                }
                row.sort_unstable_by_key(|&(c, _)| c);
                rows.push(row);
                ids.push(1);
                names.push(name.to_string());
            }
        }
        let matrix = SparseMatrix::from_rows(n_cols, rows).unwrap();
        let classes = LabelVector {
            class_names: vec!["benign".into(), "malicious".into()],
            ids,
        };
        (matrix, classes, names)
    }

    #[test]
    fn multiclass_excludes_small_families_and_sorts_by_f1() {
        let (matrix, classes, families) = synthetic_families(
            &[("Alpha", 30, 0), ("Beta", 25, 1), ("Tiny", 4, 2)],
            11,
        );
        let input = ProtocolInput { matrix: &matrix, classes: &classes, families: &families };
        let config = ExperimentConfig {
            protocol: Protocol::Multiclass,
            folds: 5,
            repeats: 2,
            family_threshold: 20,
            sample_per_family: 20,
            models: vec![ModelKind::Rf],
            rf: RfParams { n_estimators: 15, ..Default::default() },
            ..Default::default()
        };
        let reports = run_multiclass(input, &config).unwrap();
        let report = &reports[0];
        assert_eq!(report.class_names, vec!["Alpha".to_string(), "Beta".to_string()]);
        // row sums of the aggregated confusion = repeats * sample_per_family
        for row in &report.confusion_sum {
            assert_eq!(row.iter().sum::<u64>(), (config.repeats * config.sample_per_family) as u64);
        }
        // mean confusion row sums = sample_per_family
        for row in &report.confusion_mean {
            assert!((row.iter().sum::<f64>() - config.sample_per_family as f64).abs() < 1e-9);
        }
        // descending F1 report order
        for pair in report.per_class.windows(2) {
            assert!(pair[0].f1.mean >= pair[1].f1.mean);
        }
        // macro F1 bounded by per-class extremes
        let f1s: Vec<f64> = report.per_class.iter().map(|c| c.f1.mean).collect();
        let lo = f1s.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = f1s.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        assert!(report.macro_avg.f1.mean >= lo - 1e-12);
        assert!(report.macro_avg.f1.mean <= hi + 1e-12);
    }

    #[test]
    fn multiclass_requires_two_eligible_families() {
        let (matrix, classes, families) =
            synthetic_families(&[("OnlyOne", 30, 0), ("Small", 3, 1)], 4);
        let input = ProtocolInput { matrix: &matrix, classes: &classes, families: &families };
        let config = ExperimentConfig {
            protocol: Protocol::Multiclass,
            family_threshold: 20,
            sample_per_family: 20,
            models: vec![ModelKind::Rf],
            ..Default::default()
        };
        assert!(matches!(run_multiclass(input, &config), Err(EvalError::NoEligibleFamilies)));
    }

    #[test]
    fn sigma_zero_for_degenerate_repeat() {
        // deterministic separable fixture, repeats=1: every fold yields
        // identical (perfect) metrics, so sigma must be exactly zero
        let (matrix, classes, families) = synthetic_binary(10, 10, 3);
        let input = ProtocolInput { matrix: &matrix, classes: &classes, families: &families };
        let mut config = quick_config(vec![ModelKind::Knn]);
        config.repeats = 1;
        config.knn.n_neighbors = 1;
        let reports = run_binary_full(input, &config).unwrap();
        let r = &reports[0];
        assert_eq!(r.per_class[0].f1.mean, 1.0);
        assert_eq!(r.per_class[0].f1.std, 0.0);
        assert_eq!(r.micro.f1.std, 0.0);
    }

    #[test]
    fn reports_roundtrip_through_json() {
        let (matrix, classes, families) = synthetic_binary(8, 12, 6);
        let input = ProtocolInput { matrix: &matrix, classes: &classes, families: &families };
        let mut config = quick_config(vec![ModelKind::Rf]);
        config.folds = 4;
        let reports = run_binary_full(input, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_reports_json(&path, &reports).unwrap();
        let loaded = read_reports_json(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].n_fits, reports[0].n_fits);
        assert_eq!(loaded[0].confusion_sum, reports[0].confusion_sum);
        let csv = confusion_csv(&loaded[0]);
        assert!(csv.starts_with("family,benign,malicious\n"));
    }
}
