//! Emulation-report ingestion: the report schema, the corpus manifest that
//! binds reports to labels and families, and corpus-level statistics.
//!
//! One report is one JSON document per sample. Repeated calls may arrive
//! pre-aggregated through the `count` field; downstream features only ever
//! consume counts, so call order is preserved but never interpreted.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

/// Wall-clock budget the emulator gives one sample, in seconds.
pub const DEFAULT_TIMEOUT_S: f64 = 60.0;

/// How a sample's emulation ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExitKind {
    Graceful,
    Timeout,
    Crash,
}

impl fmt::Display for ExitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitKind::Graceful => f.write_str("graceful"),
            ExitKind::Timeout => f.write_str("timeout"),
            ExitKind::Crash => f.write_str("crash"),
        }
    }
}

/// One recorded API call with string-rendered arguments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiCallRecord {
    pub api_name: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// Occurrences, if the emulator pre-aggregates repeated calls.
    #[serde(default = "one")]
    pub count: u64,
}

fn one() -> u64 {
    1
}

impl ApiCallRecord {
    pub fn new(api_name: impl Into<String>, args: Vec<String>, count: u64) -> Self {
        Self {
            api_name: api_name.into(),
            args,
            count,
        }
    }
}

/// One sample's full emulation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulationReport {
    /// sha256 of the binary, 64 lowercase hex chars.
    pub sample_id: String,
    pub exit_kind: ExitKind,
    pub duration_s: f64,
    pub calls: Vec<ApiCallRecord>,
}

/// Errors from [`parse_report`].
#[derive(Debug, Error)]
pub enum ReportError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation in field `{0}`: {1}")]
    SchemaViolation(String, String),
    #[error("invalid sample digest `{0}`: expected 64 lowercase hex chars")]
    InvalidDigest(String),
}

/// Knobs for report validation.
#[derive(Debug, Clone)]
pub struct ParseOptions {
    /// When set, a `timeout` exit must not report a longer duration.
    pub timeout_s: Option<f64>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            timeout_s: Some(DEFAULT_TIMEOUT_S),
        }
    }
}

fn is_valid_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Parse and validate one report document with default options.
pub fn parse_report(raw: &[u8]) -> Result<EmulationReport, ReportError> {
    parse_report_with(raw, &ParseOptions::default())
}

/// Parse and validate one report document.
///
/// Call order is preserved as given; no de-duplication happens here.
pub fn parse_report_with(raw: &[u8], opts: &ParseOptions) -> Result<EmulationReport, ReportError> {
    // Two-phase parse so syntax errors and schema errors stay distinguishable.
    let value: serde_json::Value = serde_json::from_slice(raw)
        .map_err(|e| ReportError::MalformedJson(e.to_string()))?;
    let report: EmulationReport = serde_json::from_value(value)
        .map_err(|e| ReportError::SchemaViolation("<document>".into(), e.to_string()))?;
    validate_report(&report, opts)?;
    Ok(report)
}

fn validate_report(report: &EmulationReport, opts: &ParseOptions) -> Result<(), ReportError> {
    if !is_valid_digest(&report.sample_id) {
        return Err(ReportError::InvalidDigest(report.sample_id.clone()));
    }
    if !report.duration_s.is_finite() || report.duration_s < 0.0 {
        return Err(ReportError::SchemaViolation(
            "duration_s".into(),
            format!("must be a nonnegative real, got {}", report.duration_s),
        ));
    }
    if report.exit_kind == ExitKind::Timeout {
        if let Some(t) = opts.timeout_s {
            if report.duration_s > t {
                return Err(ReportError::SchemaViolation(
                    "duration_s".into(),
                    format!("timeout exit reports {}s > configured timeout {}s", report.duration_s, t),
                ));
            }
        }
    }
    for (i, call) in report.calls.iter().enumerate() {
        if call.api_name.is_empty() {
            return Err(ReportError::SchemaViolation(
                format!("calls[{i}].api_name"),
                "must be nonempty".into(),
            ));
        }
        if call.count == 0 {
            return Err(ReportError::SchemaViolation(
                format!("calls[{i}].count"),
                "must be >= 1".into(),
            ));
        }
    }
    Ok(())
}

/// Canonical serialization; `parse_report` of the output returns the input.
pub fn serialize_report(report: &EmulationReport) -> Vec<u8> {
    serde_json::to_vec_pretty(report).expect("report serialization cannot fail")
}

/// Benign-vs-malicious label of a corpus entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleClass {
    Benign,
    Malicious,
}

impl fmt::Display for SampleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleClass::Benign => f.write_str("benign"),
            SampleClass::Malicious => f.write_str("malicious"),
        }
    }
}

/// The family name manifests assign to benign entries.
pub const BENIGN_FAMILY: &str = "Benign";

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub class: SampleClass,
    /// Vendor-style family name, or `Unknown`; always `Benign` for benign rows.
    pub family: String,
    pub report_path: PathBuf,
    pub binary_path: Option<PathBuf>,
}

/// The corpus manifest: a CSV with header
/// `sample_id,class,family,report_path,binary_path`.
#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

/// Errors from manifest parsing and corpus loading.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest missing at {0}")]
    ManifestMissing(PathBuf),
    #[error("manifest row {row}: {msg}")]
    ManifestSchema { row: usize, msg: String },
    #[error("duplicate sample_id `{0}` in manifest")]
    DuplicateSampleId(String),
    #[error("report missing for sample `{0}` at {1}")]
    ReportMissing(String, PathBuf),
    #[error("report for sample `{sample_id}` failed to load: {msg}")]
    ReportLoad { sample_id: String, msg: String },
    #[error("corpus is empty")]
    EmptyCorpus,
}

impl CorpusManifest {
    /// Parse the manifest CSV at `path`.
    pub fn from_csv_path(path: &Path) -> Result<Self, CorpusError> {
        let bytes = fs::read(path).map_err(|_| CorpusError::ManifestMissing(path.to_path_buf()))?;
        Self::from_csv_bytes(&bytes)
    }

    /// Render back to the canonical CSV form.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("sample_id,class,family,report_path,binary_path\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.sample_id,
                e.class,
                e.family,
                e.report_path.display(),
                e.binary_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
            ));
        }
        out
    }

    pub fn from_csv_bytes(bytes: &[u8]) -> Result<Self, CorpusError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(bytes);
        let headers = reader
            .headers()
            .map_err(|e| CorpusError::ManifestSchema { row: 0, msg: e.to_string() })?
            .clone();
        let expected = ["sample_id", "class", "family", "report_path", "binary_path"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(CorpusError::ManifestSchema {
                row: 0,
                msg: format!("header must be `{}`", expected.join(",")),
            });
        }
        let mut entries = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let record = record.map_err(|e| CorpusError::ManifestSchema { row, msg: e.to_string() })?;
            let get = |idx: usize| record.get(idx).unwrap_or("").trim().to_string();
            let sample_id = get(0);
            if !is_valid_digest(&sample_id) {
                return Err(CorpusError::ManifestSchema {
                    row,
                    msg: format!("sample_id `{sample_id}` is not a sha256 digest"),
                });
            }
            if !seen.insert(sample_id.clone()) {
                return Err(CorpusError::DuplicateSampleId(sample_id));
            }
            let class = match get(1).as_str() {
                "benign" => SampleClass::Benign,
                "malicious" => SampleClass::Malicious,
                other => {
                    return Err(CorpusError::ManifestSchema {
                        row,
                        msg: format!("class must be benign|malicious, got `{other}`"),
                    })
                }
            };
            let family = get(2);
            if class == SampleClass::Benign && family != BENIGN_FAMILY {
                return Err(CorpusError::ManifestSchema {
                    row,
                    msg: format!("benign entries must use family `{BENIGN_FAMILY}`, got `{family}`"),
                });
            }
            if family.is_empty() {
                return Err(CorpusError::ManifestSchema { row, msg: "family must be nonempty".into() });
            }
            let report_path = PathBuf::from(get(3));
            let binary = get(4);
            entries.push(ManifestEntry {
                sample_id,
                class,
                family,
                report_path,
                binary_path: if binary.is_empty() { None } else { Some(PathBuf::from(binary)) },
            });
        }
        Ok(Self { entries })
    }
}

/// A labelled, loaded report.
#[derive(Debug, Clone)]
pub struct CorpusSample {
    pub report: EmulationReport,
    pub class: SampleClass,
    pub family: String,
    pub binary_path: Option<PathBuf>,
}

/// A per-entry load failure recorded under lenient loading.
#[derive(Debug, Clone, Serialize)]
pub struct LoadFailure {
    pub sample_id: String,
    pub path: PathBuf,
    pub error: String,
}

/// The loaded corpus, ordered as in the manifest, plus the failure ledger.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub samples: Vec<CorpusSample>,
    pub failures: Vec<LoadFailure>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Load every manifest entry's report from `report_root`.
///
/// Lenient mode (`strict = false`, the default posture: hung and failed
/// emulations are normal) records per-entry failures in the ledger instead
/// of aborting. Strict mode turns the first failure into an error.
pub fn load_corpus(
    manifest_path: &Path,
    report_root: &Path,
    strict: bool,
) -> Result<Corpus, CorpusError> {
    let manifest = CorpusManifest::from_csv_path(manifest_path)?;
    load_corpus_from_manifest(&manifest, report_root, strict)
}

pub fn load_corpus_from_manifest(
    manifest: &CorpusManifest,
    report_root: &Path,
    strict: bool,
) -> Result<Corpus, CorpusError> {
    // Parsing is pure per entry; the merge below is the single writer.
    let loaded = par::map_slice(&manifest.entries, |entry| {
        let path = report_root.join(&entry.report_path);
        let raw = match fs::read(&path) {
            Ok(raw) => raw,
            Err(_) => {
                let err = CorpusError::ReportMissing(entry.sample_id.clone(), path.clone());
                return Err((entry.sample_id.clone(), path, err));
            }
        };
        let report = match parse_report(&raw) {
            Ok(report) => report,
            Err(e) => {
                let err =
                    CorpusError::ReportLoad { sample_id: entry.sample_id.clone(), msg: e.to_string() };
                return Err((entry.sample_id.clone(), path, err));
            }
        };
        if report.sample_id != entry.sample_id {
            let err = CorpusError::ReportLoad {
                sample_id: entry.sample_id.clone(),
                msg: format!("report sample_id `{}` does not match manifest", report.sample_id),
            };
            return Err((entry.sample_id.clone(), path, err));
        }
        Ok(CorpusSample {
            report,
            class: entry.class,
            family: entry.family.clone(),
            binary_path: entry.binary_path.clone(),
        })
    });

    let mut corpus = Corpus::default();
    for item in loaded {
        match item {
            Ok(sample) => corpus.samples.push(sample),
            Err((sample_id, path, err)) => {
                if strict {
                    return Err(err);
                }
                corpus.failures.push(LoadFailure { sample_id, path, error: err.to_string() });
            }
        }
    }
    Ok(corpus)
}

/// Headline corpus statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub n_benign: usize,
    pub n_malicious: usize,
    pub families: BTreeMap<String, usize>,
    pub mean_duration_s: f64,
}

/// Compute totals per class and family plus the mean emulation duration.
pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut stats = CorpusStats {
        n_benign: 0,
        n_malicious: 0,
        families: BTreeMap::new(),
        mean_duration_s: 0.0,
    };
    let mut total = 0.0;
    for sample in &corpus.samples {
        match sample.class {
            SampleClass::Benign => stats.n_benign += 1,
            SampleClass::Malicious => stats.n_malicious += 1,
        }
        *stats.families.entry(sample.family.clone()).or_insert(0) += 1;
        total += sample.report.duration_s;
    }
    stats.mean_duration_s = total / corpus.len() as f64;
    Ok(stats)
}
