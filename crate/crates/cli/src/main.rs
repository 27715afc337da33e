//! `emu-triage`: batch pipeline turning binary-emulation API-call reports
//! into unified feature vectors, classifiers, evaluation reports, and
//! family clusterings.

mod pipeline;

use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use emu_triage_core::cluster::{cluster_families, sweep_k};
use emu_triage_core::datagen;
use emu_triage_core::eval::{
    read_reports_json, run_binary_balanced, run_binary_full, run_multiclass, EvalReport,
    ExperimentConfig, Protocol, ProtocolInput,
};
use emu_triage_core::features::io::{read_matrix_dir, write_matrix_dir, MatrixBundle};
use emu_triage_core::ingest::{corpus_stats, load_corpus};
use emu_triage_core::ml::{
    fit_gbt, fit_knn, fit_random_forest, save_model, GbtParams, KnnParams, ModelKind, RfParams,
    TrainedModel,
};
use emu_triage_core::pe_static::{imphash, parse_imports};
use emu_triage_core::select::{apply_selection, boruta, BorutaParams};

use pipeline::{
    class_labels, family_names, featurize_corpus, preset_config, run_pipeline, write_error_json,
    write_eval_outputs, PipelineConfig,
};

#[derive(Parser)]
#[command(name = "emu-triage", version, about = "Malware triage over binary-emulation API-call reports")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GlobalOpts {
    /// Master seed for every randomized stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-thread cap for data-parallel loops.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Abort on the first per-sample failure instead of recording it.
    #[arg(long, global = true)]
    strict: bool,
    /// Re-run pipeline stages even when up to date.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a report corpus, printing its statistics.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        reports: PathBuf,
        /// Write the stats JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the import-table digest of a PE file.
    Imphash { pe_file: PathBuf },
    /// Unify a corpus into a sparse feature-matrix directory.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        reports: PathBuf,
        /// CRT alias table CSV; built-in table when omitted.
        #[arg(long)]
        aliases: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Boruta feature selection over a matrix directory.
    Select {
        #[arg(long = "in")]
        input: PathBuf,
        /// Boruta parameter JSON; defaults when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Keep tentative features alongside confirmed ones.
        #[arg(long)]
        keep_tentative: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one classifier on a matrix directory.
    Train {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: ModelKind,
        /// Model parameter JSON; defaults when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Label column: benign/malicious or family.
        #[arg(long, default_value = "class")]
        target: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one evaluation protocol over a matrix directory.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        protocol: Protocol,
        /// Experiment config JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// kmeans++ family clustering from a multiclass eval report.
    Cluster {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        k: usize,
        /// Also sweep k over an inclusive range, e.g. 2..30.
        #[arg(long)]
        sweep: Option<String>,
        /// Output directory for groups.json (and silhouette_k.csv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus.
    Datagen {
        /// Synth-spec JSON file ...
        #[arg(long)]
        spec: Option<PathBuf>,
        /// ... or a named preset: easy, confusable, paper-mini.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline: corpus, ingest, featurize, select, eval, cluster.
    Run {
        /// Pipeline config JSON ...
        #[arg(long)]
        config: Option<PathBuf>,
        /// ... or a named preset.
        #[arg(long)]
        preset: Option<String>,
        /// Artifact directory (overrides the config's workdir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretty-print an evaluation report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Also dump the confusion matrix CSV here.
        #[arg(long)]
        confusion_csv: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    init_threads(cli.global.jobs);
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(feature = "parallel")]
fn init_threads(jobs: Option<usize>) {
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn init_threads(jobs: Option<usize>) {
    if jobs.is_some() {
        eprintln!("note: built without the `parallel` feature; --jobs has no effect");
    }
}

fn load_json_or_default<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<T> {
    match path {
        Some(path) => {
            let bytes = fs::read(path)
                .with_context(|| format!("config missing at {}", path.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parse {}", path.display()))
        }
        None => Ok(T::default()),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let global = cli.global.clone();
    match cli.command {
        Command::Ingest { manifest, reports, out } => {
            let corpus = load_corpus(&manifest, &reports, global.strict)?;
            let stats = corpus_stats(&corpus)?;
            let payload = serde_json::json!({ "stats": stats, "failures": corpus.failures });
            let json = serde_json::to_string_pretty(&payload)?;
            match out {
                Some(path) => fs::write(path, json)?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Imphash { pe_file } => {
            let bytes =
                fs::read(&pe_file).with_context(|| format!("read {}", pe_file.display()))?;
            let table = parse_imports(&bytes)?;
            println!("{}", imphash(&table));
            Ok(())
        }
        Command::Featurize { manifest, reports, aliases, out } => {
            let corpus = load_corpus(&manifest, &reports, global.strict)?;
            let config = PipelineConfig { aliases, ..Default::default() };
            let bundle = featurize_corpus(&corpus, &config, &manifest)?;
            write_matrix_dir(&out, &bundle)?;
            let sparsity = emu_triage_core::features::sparsity(&bundle.matrix).ok();
            eprintln!(
                "featurized {} samples x {} features (sparsity {})",
                bundle.matrix.n_rows(),
                bundle.matrix.n_cols(),
                sparsity.map(|s| format!("{s:.4}")).unwrap_or_else(|| "n/a".into()),
            );
            Ok(())
        }
        Command::Select { input, params, keep_tentative, out } => {
            let bundle = read_matrix_dir(&input)?;
            let mut boruta_params: BorutaParams = load_json_or_default(&params)?;
            if let Some(seed) = global.seed {
                boruta_params.rng_seed = seed;
            }
            let classes = class_labels(&bundle.labels);
            let decision = boruta(&bundle.matrix, &classes, &boruta_params)?;
            let outcome =
                apply_selection(&bundle.matrix, &bundle.vocab, &decision, keep_tentative)?;
            if outcome.empty_warning {
                eprintln!("warning: no features survived selection");
            }
            fs::create_dir_all(&out)?;
            let rows: Vec<serde_json::Value> = bundle
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
                out.join("decision.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "iterations": decision.iterations_run,
                    "params": boruta_params,
                    "features": rows,
                }))?,
            )?;
            let n_tentative = decision.count(emu_triage_core::select::FeatureStatus::Tentative);
            let selected = MatrixBundle {
                matrix: outcome.matrix,
                vocab: outcome.vocab,
                sample_ids: bundle.sample_ids,
                labels: bundle.labels,
            };
            write_matrix_dir(&out.join("matrix"), &selected)?;
            eprintln!(
                "kept {} of {} features ({} tentative, kept: {})",
                selected.matrix.n_cols(),
                bundle.matrix.n_cols(),
                n_tentative,
                keep_tentative,
            );
            Ok(())
        }
        Command::Train { input, model, params, target, out } => {
            let bundle = read_matrix_dir(&input)?;
            let labels = match target.as_str() {
                "class" => class_labels(&bundle.labels),
                "family" => emu_triage_core::features::LabelVector {
                    class_names: bundle.labels.family_names.clone(),
                    ids: bundle.labels.family_ids.clone(),
                },
                other => bail!("unknown target `{other}` (expected class|family)"),
            };
            let trained = match model {
                ModelKind::Rf => {
                    let mut p: RfParams = load_json_or_default(&params)?;
                    if let Some(seed) = global.seed {
                        p.rng_seed = seed;
                    }
                    TrainedModel::Rf(fit_random_forest(&bundle.matrix, &labels, &p)?)
                }
                ModelKind::Gbt => {
                    let mut p: GbtParams = load_json_or_default(&params)?;
                    if let Some(seed) = global.seed {
                        p.rng_seed = seed;
                    }
                    TrainedModel::Gbt(fit_gbt(&bundle.matrix, &labels, &p)?)
                }
                ModelKind::Knn => {
                    let p: KnnParams = load_json_or_default(&params)?;
                    TrainedModel::Knn(fit_knn(&bundle.matrix, &labels, &p)?)
                }
            };
            save_model(&out, &trained)?;
            eprintln!("saved {} model to {}", trained.kind(), out.display());
            Ok(())
        }
        Command::Eval { input, protocol, config, out } => {
            let bundle = read_matrix_dir(&input)?;
            let mut experiment: ExperimentConfig = load_json_or_default(&config)?;
            experiment.protocol = protocol;
            if let Some(seed) = global.seed {
                experiment.rng_seed = seed;
            }
            if protocol == Protocol::Multiclass && config.is_none() {
                experiment.models = vec![ModelKind::Rf];
            }
            let classes = class_labels(&bundle.labels);
            let families = family_names(&bundle.labels);
            let input = ProtocolInput {
                matrix: &bundle.matrix,
                classes: &classes,
                families: &families,
            };
            let reports = match protocol {
                Protocol::BinaryFull => run_binary_full(input, &experiment)?,
                Protocol::BinaryBalanced => run_binary_balanced(input, &experiment)?,
                Protocol::Multiclass => run_multiclass(input, &experiment)?,
            };
            let dir = out.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
            let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
            fs::create_dir_all(&dir)?;
            let stem = out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "report".into());
            let written = write_eval_outputs(&dir, &stem, &reports)?;
            for path in &written {
                eprintln!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Cluster { report, k, sweep, out } => {
            let reports = read_reports_json(&report).map_err(|e| anyhow!(e))?;
            let target = reports
                .iter()
                .find(|r| r.protocol == Protocol::Multiclass)
                .or_else(|| reports.first())
                .ok_or_else(|| anyhow!("report file holds no entries"))?;
            let seed = global.seed.unwrap_or(target.seed);
            let clustering = cluster_families(target, k, seed)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("groups.json"), serde_json::to_string_pretty(&clustering)?)?;
            println!(
                "k={} -> {} groups (silhouette {})",
                k,
                clustering.n_groups,
                clustering.silhouette.map(|s| format!("{s:.4}")).unwrap_or_else(|| "n/a".into()),
            );
            for (i, group) in clustering.groups.iter().enumerate() {
                println!("group {}: {}", i + 1, group.join(", "));
            }
            if let Some(range) = sweep {
                let (lo, hi) = parse_range(&range)?;
                let rows = sweep_k(target, lo..=hi, seed)?;
                let mut csv = String::from("k,silhouette,n_groups\n");
                for (k, s, g) in rows {
                    csv.push_str(&format!("{k},{s},{g}\n"));
                }
                fs::write(out.join("silhouette_k.csv"), csv)?;
            }
            Ok(())
        }
        Command::Datagen { spec, preset, out } => {
            let mut synth = match (&preset, &spec) {
                (Some(name), None) => datagen::preset(name).ok_or_else(|| {
                    anyhow!("unknown preset `{name}` (expected one of {:?})", datagen::PRESET_NAMES)
                })?,
                (None, Some(path)) => {
                    let bytes = fs::read(path)
                        .with_context(|| format!("read {}", path.display()))?;
                    serde_json::from_slice(&bytes)
                        .with_context(|| format!("parse {}", path.display()))?
                }
                _ => bail!("pass exactly one of --preset or --spec"),
            };
            if let Some(seed) = global.seed {
                synth.rng_seed = seed;
            }
            let (reports, manifest) = datagen::generate(&synth)?;
            datagen::write_corpus(&out, &reports, &manifest)?;
            eprintln!(
                "wrote {} reports + manifest.csv under {}",
                reports.len(),
                out.display()
            );
            Ok(())
        }
        Command::Run { config, preset, out } => {
            let mut pipeline_config: PipelineConfig = match (&preset, &config) {
                (Some(name), None) => preset_config(name).ok_or_else(|| {
                    anyhow!("unknown preset `{name}` (expected one of {:?})", datagen::PRESET_NAMES)
                })?,
                (None, Some(path)) => {
                    let bytes = fs::read(path)
                        .with_context(|| format!("config missing at {}", path.display()))?;
                    serde_json::from_slice(&bytes)
                        .with_context(|| format!("parse {}", path.display()))?
                }
                _ => bail!("pass exactly one of --preset or --config"),
            };
            if let Some(seed) = global.seed {
                pipeline_config.master_seed = seed;
            }
            if let Some(dir) = out {
                pipeline_config.workdir = dir;
            }
            if global.strict {
                pipeline_config.strict = true;
            }
            match run_pipeline(&pipeline_config, global.force) {
                Ok(stages) => {
                    for (stage, skipped) in stages {
                        println!("{stage}: {}", if skipped { "up-to-date" } else { "done" });
                    }
                    Ok(())
                }
                Err(e) => {
                    let stage = e
                        .chain()
                        .last()
                        .map(|c| c.to_string())
                        .unwrap_or_else(|| "pipeline".into());
                    write_error_json(&pipeline_config.workdir, &stage, &e);
                    Err(e)
                }
            }
        }
        Command::Report { input, confusion_csv } => {
            let reports = read_reports_json(&input).map_err(|e| anyhow!(e))?;
            for report in &reports {
                print_report(report);
            }
            if let Some(path) = confusion_csv {
                let first = reports.first().ok_or_else(|| anyhow!("empty report file"))?;
                fs::write(&path, emu_triage_core::eval::confusion_csv(first))?;
                eprintln!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| anyhow!("range must look like 2..30"))?;
    let lo: usize = lo.trim().parse().context("range start")?;
    let hi: usize = hi.trim().trim_start_matches('=').parse().context("range end")?;
    if lo < 1 || hi < lo {
        bail!("range must satisfy 1 <= start <= end");
    }
    Ok((lo, hi))
}

fn print_report(report: &EvalReport) {
    println!(
        "== {} / {} (folds={}, repeats={}, fits={}, seed={})",
        report.protocol, report.model, report.folds, report.repeats, report.n_fits, report.seed
    );
    println!(
        "{:<24} {:>9} {:>7} {:>9} {:>7} {:>9} {:>7} {:>9}",
        "class", "prec", "sd", "recall", "sd", "f1", "sd", "support"
    );
    for class in &report.per_class {
        println!(
            "{:<24} {:>9.3} {:>7.3} {:>9.3} {:>7.3} {:>9.3} {:>7.3} {:>9}",
            class.name,
            class.precision.mean,
            class.precision.std,
            class.recall.mean,
            class.recall.std,
            class.f1.mean,
            class.f1.std,
            class.support_total
        );
    }
    println!(
        "{:<24} {:>9.3} {:>7.3} {:>9.3} {:>7.3} {:>9.3} {:>7.3}",
        "micro",
        report.micro.precision.mean,
        report.micro.precision.std,
        report.micro.recall.mean,
        report.micro.recall.std,
        report.micro.f1.mean,
        report.micro.f1.std
    );
    println!(
        "{:<24} {:>9.3} {:>7.3} {:>9.3} {:>7.3} {:>9.3} {:>7.3}",
        "macro",
        report.macro_avg.precision.mean,
        report.macro_avg.precision.std,
        report.macro_avg.recall.mean,
        report.macro_avg.recall.std,
        report.macro_avg.f1.mean,
        report.macro_avg.f1.std
    );
    if let Some(draws) = &report.balanced_draws {
        println!("balanced draws per repeat: {draws:?}");
    }
    println!();
}
