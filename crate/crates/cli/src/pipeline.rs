//! The end-to-end pipeline behind `emu-triage run`.
//!
//! Stages are file-to-file: datagen (optional) → ingest → featurize →
//! select → the three eval protocols → cluster. Every stage writes a
//! provenance manifest (tool version, config hash, master seed, input and
//! output content hashes) and is skipped on re-runs while those still
//! match. Timestamps never enter any artifact, so equal configurations
//! produce byte-identical trees.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use emu_triage_core::datagen::{self, SynthSpec};
use emu_triage_core::eval::{
    run_binary_balanced, run_binary_full, run_multiclass, confusion_csv, EvalReport,
    ExperimentConfig, Protocol, ProtocolInput,
};
use emu_triage_core::features::io::{write_matrix_dir, read_matrix_dir, LabelsFile, MatrixBundle};
use emu_triage_core::features::{
    append_imphash_columns, build_matrix, build_vocabulary, sparsity, LabelVector,
};
use emu_triage_core::ingest::{corpus_stats, load_corpus, Corpus, SampleClass};
use emu_triage_core::ml::ModelKind;
use emu_triage_core::pe_static::{imphash, parse_imports};
use emu_triage_core::select::{apply_selection, boruta, BorutaParams};
use emu_triage_core::unify::{featurize_report, AliasTable};
use emu_triage_core::cluster::{cluster_families, sweep_k};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything a full run needs. Paths are resolved relative to the
/// invoking process; the artifact tree lives under `workdir`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Generate the corpus from a named preset ...
    pub preset: Option<String>,
    /// ... or from a synth-spec JSON file ...
    pub synth_spec: Option<PathBuf>,
    /// ... or ingest an existing corpus.
    pub manifest: Option<PathBuf>,
    pub reports: Option<PathBuf>,
    /// CRT alias table; the built-in table when unset.
    pub aliases: Option<PathBuf>,
    pub workdir: PathBuf,
    pub master_seed: u64,
    pub strict: bool,
    pub boruta: BorutaParams,
    pub keep_tentative: bool,
    /// Binary protocols run on the Boruta-selected matrix.
    pub eval_binary: ExperimentConfig,
    pub balanced_repeats: usize,
    /// The multiclass protocol runs on the full, unselected matrix.
    pub eval_multiclass: ExperimentConfig,
    pub cluster_k: usize,
    pub cluster_sweep: Option<(usize, usize)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: None,
            synth_spec: None,
            manifest: None,
            reports: None,
            aliases: None,
            workdir: PathBuf::from("emu-triage-out"),
            master_seed: 0,
            strict: false,
            boruta: BorutaParams::default(),
            keep_tentative: false,
            eval_binary: ExperimentConfig {
                protocol: Protocol::BinaryFull,
                ..ExperimentConfig::default()
            },
            balanced_repeats: 5,
            eval_multiclass: ExperimentConfig {
                protocol: Protocol::Multiclass,
                models: vec![ModelKind::Rf],
                ..ExperimentConfig::default()
            },
            cluster_k: 5,
            cluster_sweep: Some((2, 8)),
        }
    }
}

/// Ready-made configuration for a named datagen preset.
pub fn preset_config(name: &str) -> Option<PipelineConfig> {
    datagen::preset(name)?;
    let mut config = PipelineConfig { preset: Some(name.to_string()), ..Default::default() };
    match name {
        "easy" => {
            config.cluster_k = 2;
            config.cluster_sweep = None;
            // one malicious family: multiclass cannot run
            config.eval_multiclass.models.clear();
        }
        "confusable" => {
            config.eval_multiclass.family_threshold = 50;
            config.eval_multiclass.sample_per_family = 50;
            config.cluster_k = 4;
            config.cluster_sweep = Some((2, 5));
        }
        "paper-mini" => {
            config.eval_multiclass.family_threshold = 100;
            config.eval_multiclass.sample_per_family = 100;
            config.cluster_k = 4;
            config.cluster_sweep = Some((2, 5));
        }
        _ => {}
    }
    Some(config)
}

/// Configuration digest that survives relocation: file-path fields are
/// replaced by the hashes of their contents, the workdir is excluded.
fn semantic_config_hash(config: &PipelineConfig) -> Result<String> {
    let mut value = serde_json::to_value(config).context("serialize config")?;
    let object = value.as_object_mut().expect("config is an object");
    object.remove("workdir");
    for key in ["synth_spec", "manifest", "reports", "aliases"] {
        let replacement = match object.get(key) {
            Some(serde_json::Value::String(path)) => {
                let p = PathBuf::from(path);
                if p.is_file() {
                    Some(hash_file(&p)?)
                } else {
                    // directories contribute through stage input hashes
                    Some(format!("dir:{path}"))
                }
            }
            _ => None,
        };
        if let Some(r) = replacement {
            object.insert(key.to_string(), serde_json::Value::String(r));
        }
    }
    Ok(sha256_hex(serde_json::to_string(&value)?.as_bytes()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("read {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Per-stage provenance record, `stage.json` in each stage directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageManifest {
    stage: String,
    tool_version: String,
    config_hash: String,
    master_seed: u64,
    /// Workdir-relative path -> content hash.
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

struct StageCtx<'a> {
    config: &'a PipelineConfig,
    config_hash: String,
    force: bool,
}

impl StageCtx<'_> {
    fn stage_dir(&self, stage: &str) -> PathBuf {
        self.config.workdir.join(stage)
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.config.workdir)
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|_| path.to_string_lossy().into_owned())
    }

    fn resolve(&self, rel: &str) -> PathBuf {
        let p = PathBuf::from(rel);
        if p.is_absolute() {
            p
        } else {
            self.config.workdir.join(p)
        }
    }

    /// True when the recorded manifest still matches reality.
    fn up_to_date(&self, stage: &str, input_paths: &[PathBuf]) -> bool {
        if self.force {
            return false;
        }
        let path = self.stage_dir(stage).join("stage.json");
        let Ok(bytes) = fs::read(&path) else { return false };
        let Ok(manifest) = serde_json::from_slice::<StageManifest>(&bytes) else { return false };
        if manifest.tool_version != TOOL_VERSION
            || manifest.config_hash != self.config_hash
            || manifest.master_seed != self.config.master_seed
        {
            return false;
        }
        let current: BTreeMap<String, String> = match self.hash_all(input_paths) {
            Ok(h) => h,
            Err(_) => return false,
        };
        if current != manifest.inputs {
            return false;
        }
        manifest
            .outputs
            .iter()
            .all(|(rel, hash)| hash_file(&self.resolve(rel)).map(|h| &h == hash).unwrap_or(false))
    }

    fn hash_all(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for path in paths {
            if path.is_dir() {
                let mut files: Vec<PathBuf> = fs::read_dir(path)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file())
                    .collect();
                files.sort();
                for file in files {
                    out.insert(self.relative(&file), hash_file(&file)?);
                }
            } else {
                out.insert(self.relative(path), hash_file(path)?);
            }
        }
        Ok(out)
    }

    fn write_manifest(
        &self,
        stage: &str,
        input_paths: &[PathBuf],
        output_paths: &[PathBuf],
    ) -> Result<()> {
        let manifest = StageManifest {
            stage: stage.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_hash: self.config_hash.clone(),
            master_seed: self.config.master_seed,
            inputs: self.hash_all(input_paths)?,
            outputs: self.hash_all(output_paths)?,
        };
        let path = self.stage_dir(stage).join("stage.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Machine-readable failure record written next to the artifacts.
#[derive(Debug, Serialize)]
pub struct PipelineError {
    pub stage: String,
    pub error: String,
}

pub fn write_error_json(workdir: &Path, stage: &str, error: &anyhow::Error) {
    let record = PipelineError { stage: stage.to_string(), error: format!("{error:#}") };
    if fs::create_dir_all(workdir).is_ok() {
        let _ = fs::write(
            workdir.join("error.json"),
            serde_json::to_string_pretty(&record).unwrap_or_default(),
        );
    }
}

/// Run all stages. Returns the list of `(stage, skipped)` pairs in order.
pub fn run_pipeline(config: &PipelineConfig, force: bool) -> Result<Vec<(String, bool)>> {
    fs::create_dir_all(&config.workdir)
        .with_context(|| format!("create workdir {}", config.workdir.display()))?;
    let ctx = StageCtx { config, config_hash: semantic_config_hash(config)?, force };
    let mut log = Vec::new();

    // -- corpus source ------------------------------------------------
    let (manifest_path, reports_dir) = match (&config.preset, &config.synth_spec) {
        (Some(_), _) | (_, Some(_)) => {
            let dir = ctx.stage_dir("corpus");
            let manifest = dir.join("manifest.csv");
            let reports = dir.join("reports");
            let spec = load_synth_spec(config)?;
            let skipped = ctx.up_to_date("corpus", &[]);
            if !skipped {
                fs::create_dir_all(&dir)?;
                let (generated, corpus_manifest) =
                    datagen::generate(&spec).map_err(|e| anyhow!(e).context("datagen"))?;
                datagen::write_corpus(&dir, &generated, &corpus_manifest)?;
                let outputs = [manifest.clone(), reports.clone()];
                ctx.write_manifest("corpus", &[], &outputs)?;
            }
            log.push(("corpus".to_string(), skipped));
            (manifest, reports)
        }
        _ => {
            let manifest = config
                .manifest
                .clone()
                .ok_or_else(|| anyhow!("config needs a preset, synth_spec, or manifest"))?;
            let reports = config
                .reports
                .clone()
                .ok_or_else(|| anyhow!("config needs a reports directory"))?;
            (manifest, reports)
        }
    };

    // -- ingest --------------------------------------------------------
    let ingest_dir = ctx.stage_dir("ingest");
    let stats_path = ingest_dir.join("stats.json");
    let ingest_inputs = [manifest_path.clone(), reports_dir.clone()];
    let skipped = ctx.up_to_date("ingest", &ingest_inputs);
    if !skipped {
        fs::create_dir_all(&ingest_dir)?;
        let corpus = load_corpus(&manifest_path, &reports_dir, config.strict)
            .map_err(|e| anyhow!(e).context("ingest"))?;
        let stats = corpus_stats(&corpus).map_err(|e| anyhow!(e).context("ingest"))?;
        let payload = serde_json::json!({
            "stats": stats,
            "failures": corpus.failures,
        });
        fs::write(&stats_path, serde_json::to_string_pretty(&payload)?)?;
        ctx.write_manifest("ingest", &ingest_inputs, &[stats_path.clone()])?;
    }
    log.push(("ingest".to_string(), skipped));

    // -- featurize -----------------------------------------------------
    let features_dir = ctx.stage_dir("features");
    let feature_inputs = [manifest_path.clone(), reports_dir.clone()];
    let skipped = ctx.up_to_date("features", &feature_inputs);
    if !skipped {
        let corpus = load_corpus(&manifest_path, &reports_dir, config.strict)
            .map_err(|e| anyhow!(e).context("featurize"))?;
        let bundle = featurize_corpus(&corpus, config, &manifest_path)
            .map_err(|e| e.context("featurize"))?;
        write_matrix_dir(&features_dir, &bundle).map_err(|e| anyhow!(e).context("featurize"))?;
        let meta = serde_json::json!({
            "n_rows": bundle.matrix.n_rows(),
            "n_cols": bundle.matrix.n_cols(),
            "sparsity": sparsity(&bundle.matrix).ok(),
            "master_seed": config.master_seed,
        });
        fs::write(features_dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        ctx.write_manifest(
            "features",
            &feature_inputs,
            &[
                features_dir.join("vocabulary.json"),
                features_dir.join("rows.jsonl"),
                features_dir.join("labels.json"),
                features_dir.join("meta.json"),
            ],
        )?;
    }
    log.push(("features".to_string(), skipped));

    // -- select ----------------------------------------------------------
    let select_dir = ctx.stage_dir("select");
    let select_inputs = [
        features_dir.join("vocabulary.json"),
        features_dir.join("rows.jsonl"),
        features_dir.join("labels.json"),
    ];
    let skipped = ctx.up_to_date("select", &select_inputs);
    if !skipped {
        fs::create_dir_all(&select_dir)?;
        let bundle = read_matrix_dir(&features_dir).map_err(|e| anyhow!(e).context("select"))?;
        let classes = class_labels(&bundle.labels);
        let mut params = config.boruta.clone();
        params.rng_seed = config.master_seed;
        let decision =
            boruta(&bundle.matrix, &classes, &params).map_err(|e| anyhow!(e).context("select"))?;
        let outcome = apply_selection(&bundle.matrix, &bundle.vocab, &decision, config.keep_tentative)
            .map_err(|e| anyhow!(e).context("select"))?;
        if outcome.empty_warning {
            eprintln!("select: warning: no features survived selection");
        }
        let decision_json: Vec<serde_json::Value> = bundle
            .vocab
            .tokens()
            .iter()
            .zip(&decision.statuses)
            .zip(&decision.hit_counts)
            .map(|((token, status), hits)| {
                serde_json::json!({"token": token, "status": status, "hits": hits})
            })
            .collect();
        fs::write(
            select_dir.join("decision.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "iterations": decision.iterations_run,
                "params": params,
                "features": decision_json,
            }))?,
        )?;
        let selected = MatrixBundle {
            matrix: outcome.matrix,
            vocab: outcome.vocab,
            sample_ids: bundle.sample_ids.clone(),
            labels: bundle.labels.clone(),
        };
        write_matrix_dir(&select_dir.join("matrix"), &selected)
            .map_err(|e| anyhow!(e).context("select"))?;
        ctx.write_manifest(
            "select",
            &select_inputs,
            &[
                select_dir.join("decision.json"),
                select_dir.join("matrix/vocabulary.json"),
                select_dir.join("matrix/rows.jsonl"),
                select_dir.join("matrix/labels.json"),
            ],
        )?;
    }
    log.push(("select".to_string(), skipped));

    // -- eval ------------------------------------------------------------
    let eval_dir = ctx.stage_dir("eval");
    let selected_dir = select_dir.join("matrix");
    let eval_inputs = [
        selected_dir.join("rows.jsonl"),
        selected_dir.join("vocabulary.json"),
        selected_dir.join("labels.json"),
        features_dir.join("rows.jsonl"),
        features_dir.join("labels.json"),
    ];
    let skipped = ctx.up_to_date("eval", &eval_inputs);
    if !skipped {
        fs::create_dir_all(&eval_dir)?;
        let selected = read_matrix_dir(&selected_dir).map_err(|e| anyhow!(e).context("eval"))?;
        let full = read_matrix_dir(&features_dir).map_err(|e| anyhow!(e).context("eval"))?;
        let mut outputs = Vec::new();

        let sel_classes = class_labels(&selected.labels);
        let sel_families = family_names(&selected.labels);
        let input = ProtocolInput {
            matrix: &selected.matrix,
            classes: &sel_classes,
            families: &sel_families,
        };
        let mut binary_config = config.eval_binary.clone();
        binary_config.protocol = Protocol::BinaryFull;
        binary_config.rng_seed = config.master_seed;
        let reports = run_binary_full(input, &binary_config).map_err(|e| anyhow!(e).context("eval binary-full"))?;
        outputs.extend(write_eval_outputs(&eval_dir, "binary_full", &reports)?);

        let mut balanced_config = binary_config.clone();
        balanced_config.protocol = Protocol::BinaryBalanced;
        balanced_config.repeats = config.balanced_repeats;
        let reports = run_binary_balanced(input, &balanced_config)
            .map_err(|e| anyhow!(e).context("eval binary-balanced"))?;
        outputs.extend(write_eval_outputs(&eval_dir, "binary_balanced", &reports)?);

        if !config.eval_multiclass.models.is_empty() {
            let full_classes = class_labels(&full.labels);
            let full_families = family_names(&full.labels);
            let input = ProtocolInput {
                matrix: &full.matrix,
                classes: &full_classes,
                families: &full_families,
            };
            let mut multiclass_config = config.eval_multiclass.clone();
            multiclass_config.protocol = Protocol::Multiclass;
            multiclass_config.rng_seed = config.master_seed;
            let reports = run_multiclass(input, &multiclass_config)
                .map_err(|e| anyhow!(e).context("eval multiclass"))?;
            outputs.extend(write_eval_outputs(&eval_dir, "multiclass", &reports)?);
        }
        ctx.write_manifest("eval", &eval_inputs, &outputs)?;
    }
    log.push(("eval".to_string(), skipped));

    // -- cluster ---------------------------------------------------------
    let multiclass_path = eval_dir.join("multiclass.json");
    if multiclass_path.is_file() {
        let cluster_dir = ctx.stage_dir("cluster");
        let cluster_inputs = [multiclass_path.clone()];
        let skipped = ctx.up_to_date("cluster", &cluster_inputs);
        if !skipped {
            fs::create_dir_all(&cluster_dir)?;
            let reports = emu_triage_core::eval::read_reports_json(&multiclass_path)
                .map_err(|e| anyhow!(e).context("cluster"))?;
            let report = reports
                .first()
                .ok_or_else(|| anyhow!("multiclass report is empty"))?;
            let clustering = cluster_families(report, config.cluster_k, config.master_seed)
                .map_err(|e| anyhow!(e).context("cluster"))?;
            fs::write(
                cluster_dir.join("groups.json"),
                serde_json::to_string_pretty(&clustering)?,
            )?;
            let mut outputs = vec![cluster_dir.join("groups.json")];
            if let Some((lo, hi)) = config.cluster_sweep {
                let sweep = sweep_k(report, lo..=hi, config.master_seed)
                    .map_err(|e| anyhow!(e).context("cluster sweep"))?;
                let mut csv = String::from("k,silhouette,n_groups\n");
                for (k, s, g) in sweep {
                    csv.push_str(&format!("{k},{s},{g}\n"));
                }
                let sweep_path = cluster_dir.join("silhouette_k.csv");
                fs::write(&sweep_path, csv)?;
                outputs.push(sweep_path);
            }
            ctx.write_manifest("cluster", &cluster_inputs, &outputs)?;
        }
        log.push(("cluster".to_string(), skipped));
    }

    Ok(log)
}

fn load_synth_spec(config: &PipelineConfig) -> Result<SynthSpec> {
    let mut spec = match (&config.preset, &config.synth_spec) {
        (Some(name), _) => datagen::preset(name)
            .ok_or_else(|| anyhow!("unknown preset `{name}` (expected one of {:?})", datagen::PRESET_NAMES))?,
        (None, Some(path)) => {
            let bytes = fs::read(path).with_context(|| format!("read {}", path.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parse {}", path.display()))?
        }
        (None, None) => bail!("no synthetic source configured"),
    };
    spec.rng_seed = config.master_seed;
    Ok(spec)
}

/// Unify and vectorize a loaded corpus; appends imphash indicator columns
/// when manifest entries carry binary paths.
pub fn featurize_corpus(
    corpus: &Corpus,
    config: &PipelineConfig,
    manifest_path: &Path,
) -> Result<MatrixBundle> {
    let aliases = match &config.aliases {
        Some(path) => AliasTable::from_csv_path(path)
            .map_err(|e| anyhow!(e).context(format!("alias table {}", path.display())))?,
        None => AliasTable::builtin(),
    };
    let maps: Vec<_> =
        corpus.samples.iter().map(|s| featurize_report(&s.report, &aliases)).collect();
    let vocab = build_vocabulary(&maps).map_err(|e| anyhow!(e))?;
    let (matrix, _skipped) = build_matrix(&maps, &vocab);

    // one static feature per sample when binaries are available
    let manifest_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let digests: Vec<Option<String>> = corpus
        .samples
        .iter()
        .map(|sample| {
            sample.binary_path.as_ref().and_then(|rel| {
                let path = if rel.is_absolute() { rel.clone() } else { manifest_dir.join(rel) };
                let bytes = fs::read(path).ok()?;
                let table = parse_imports(&bytes).ok()?;
                Some(imphash(&table))
            })
        })
        .collect();
    let (matrix, vocab) = if digests.iter().any(Option::is_some) {
        append_imphash_columns(&matrix, &vocab, &digests).map_err(|e| anyhow!(e))?
    } else {
        (matrix, vocab)
    };

    let mut family_names: Vec<String> = Vec::new();
    let mut family_ids = Vec::with_capacity(corpus.len());
    for sample in &corpus.samples {
        let id = match family_names.iter().position(|f| f == &sample.family) {
            Some(id) => id,
            None => {
                family_names.push(sample.family.clone());
                family_names.len() - 1
            }
        };
        family_ids.push(id);
    }
    Ok(MatrixBundle {
        matrix,
        vocab,
        sample_ids: corpus.samples.iter().map(|s| s.report.sample_id.clone()).collect(),
        labels: LabelsFile {
            class_names: vec!["benign".into(), "malicious".into()],
            class_ids: corpus
                .samples
                .iter()
                .map(|s| usize::from(s.class == SampleClass::Malicious))
                .collect(),
            family_names,
            family_ids,
        },
    })
}

/// Benign/malicious label vector from a labels file.
pub fn class_labels(labels: &LabelsFile) -> LabelVector {
    LabelVector { class_names: labels.class_names.clone(), ids: labels.class_ids.clone() }
}

/// Per-row family names from a labels file.
pub fn family_names(labels: &LabelsFile) -> Vec<String> {
    labels.family_ids.iter().map(|&id| labels.family_names[id].clone()).collect()
}

/// Write `<name>.json` plus one confusion CSV per model; returns the paths.
pub fn write_eval_outputs(
    dir: &Path,
    name: &str,
    reports: &[EvalReport],
) -> Result<Vec<PathBuf>> {
    let mut outputs = Vec::new();
    let json_path = dir.join(format!("{name}.json"));
    emu_triage_core::eval::write_reports_json(&json_path, reports)?;
    outputs.push(json_path);
    for report in reports {
        let csv_path = dir.join(format!("{name}_confusion_{}.csv", report.model));
        fs::write(&csv_path, confusion_csv(report))?;
        outputs.push(csv_path);
    }
    Ok(outputs)
}
