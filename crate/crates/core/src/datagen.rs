//! Deterministic synthetic corpora.
//!
//! Plants per-family signature tokens, shared noise, and deliberately
//! confusable family pairs so every pipeline protocol can be verified at
//! desk scale. Signatures are written in unified-token space; when raw
//! variants are enabled the generator emits `A`/`W`/`Ex` spellings that
//! must collapse back onto the signature, which exercises unification end
//! to end. Everything derives from per-sample seeds, so generation is
//! reproducible and order-independent.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{
    ApiCallRecord, CorpusManifest, EmulationReport, ExitKind, ManifestEntry, SampleClass,
    BENIGN_FAMILY,
};
use crate::par;
use crate::rng::{derive_seed, make_rng, PipelineRng};
use crate::unify::{unify_name, AliasTable, TokenKind};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One malware family to synthesize.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilySpec {
    pub name: String,
    pub n_samples: usize,
    /// Unified-space tokens; `Api->arg` plants an interesting-API argument.
    pub signature_tokens: Vec<String>,
    /// Per-token emission probability, in (0, 1].
    pub signature_rate: f64,
    /// Poisson mean of shared-pool noise tokens per sample.
    pub shared_noise_tokens: u32,
    /// Adopt a share of this family's signature to make the pair confusable.
    pub confuse_with: Option<String>,
}

/// The benign side of the corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenignSpec {
    pub n_samples: usize,
    /// Shared pool: benign samples draw from it, malicious noise does too.
    pub token_pool: Vec<String>,
    #[serde(default = "default_benign_mean")]
    pub mean_tokens: f64,
}

fn default_benign_mean() -> f64 {
    8.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub families: Vec<FamilySpec>,
    pub benign: BenignSpec,
    pub rng_seed: u64,
    /// Emit raw `A`/`W`/`Ex` spellings of signature tokens.
    #[serde(default = "default_true")]
    pub emit_raw_variants: bool,
    /// Fraction of the target signature a confusable family adopts.
    #[serde(default = "default_confuse_share")]
    pub confuse_share: f64,
}

fn default_true() -> bool {
    true
}

fn default_confuse_share() -> f64 {
    0.8
}

const ARG_APIS: [&str; 3] = ["LoadLibrary", "GetModuleHandle", "GetProcAddress"];

fn validate_token(token: &str, aliases: &AliasTable) -> Result<(), DatagenError> {
    if token.is_empty() {
        return Err(DatagenError::InvalidSpec("empty signature token".into()));
    }
    if let Some((api, arg)) = token.split_once("->") {
        if !ARG_APIS.contains(&api) {
            return Err(DatagenError::InvalidSpec(format!(
                "argument token `{token}` must use one of {ARG_APIS:?}"
            )));
        }
        if arg.is_empty() || arg.chars().any(|c| c.is_ascii_uppercase()) {
            return Err(DatagenError::InvalidSpec(format!(
                "argument of `{token}` must be nonempty lowercase"
            )));
        }
        return Ok(());
    }
    let unified = unify_name(token, aliases);
    if unified.kind != TokenKind::Api || unified.text != token {
        return Err(DatagenError::InvalidSpec(format!(
            "signature token `{token}` is not unification-stable (resolves to `{}`)",
            unified.text
        )));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let aliases = AliasTable::builtin();
        let mut names = HashSet::new();
        if self.families.is_empty() {
            return Err(DatagenError::InvalidSpec("at least one family required".into()));
        }
        for family in &self.families {
            if family.name == BENIGN_FAMILY {
                return Err(DatagenError::InvalidSpec("family may not be named Benign".into()));
            }
            if !names.insert(family.name.as_str()) {
                return Err(DatagenError::InvalidSpec(format!("duplicate family `{}`", family.name)));
            }
            if !(family.signature_rate > 0.0 && family.signature_rate <= 1.0) {
                return Err(DatagenError::InvalidSpec(format!(
                    "signature_rate of `{}` must be in (0, 1]",
                    family.name
                )));
            }
            if family.n_samples == 0 || family.signature_tokens.is_empty() {
                return Err(DatagenError::InvalidSpec(format!(
                    "family `{}` needs samples and signature tokens",
                    family.name
                )));
            }
            for token in &family.signature_tokens {
                validate_token(token, &aliases)?;
            }
            if let Some(target) = &family.confuse_with {
                if target == &family.name
                    || !self.families.iter().any(|f| &f.name == target)
                {
                    return Err(DatagenError::InvalidSpec(format!(
                        "confuse_with of `{}` must name another family",
                        family.name
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.confuse_share) {
            return Err(DatagenError::InvalidSpec("confuse_share must be in [0, 1]".into()));
        }
        for token in &self.benign.token_pool {
            validate_token(token, &aliases)?;
        }
        if self.benign.token_pool.is_empty() || self.benign.n_samples == 0 {
            return Err(DatagenError::InvalidSpec("benign pool and samples required".into()));
        }
        Ok(())
    }

    /// Effective signature of a family: its own tokens plus the adopted
    /// share of the confusion target's.
    fn effective_signature(&self, family: &FamilySpec) -> Vec<String> {
        let mut tokens = family.signature_tokens.clone();
        if let Some(target) = &family.confuse_with {
            if let Some(target) = self.families.iter().find(|f| &f.name == target) {
                let adopt =
                    (self.confuse_share * target.signature_tokens.len() as f64).ceil() as usize;
                for token in target.signature_tokens.iter().take(adopt) {
                    if !tokens.contains(token) {
                        tokens.push(token.clone());
                    }
                }
            }
        }
        tokens
    }
}

fn sample_digest(seed: u64, family: &str, index: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("{seed}/{family}/{index}"));
    let out = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in out {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Raw spellings that unify back onto `token`; used to exercise the merge
/// rules from the generator side.
fn raw_variants(token: &str, aliases: &AliasTable) -> Vec<String> {
    let mut variants = vec![token.to_string()];
    for suffix in ["A", "W", "Ex", "ExA", "ExW"] {
        let candidate = format!("{token}{suffix}");
        let unified = unify_name(&candidate, aliases);
        if unified.kind == TokenKind::Api && unified.text == token {
            variants.push(candidate);
        }
    }
    variants
}

fn emit_call(token: &str, spec: &SynthSpec, aliases: &AliasTable, rng: &mut PipelineRng) -> ApiCallRecord {
    let count = rng.gen_range(1..=4u64);
    if let Some((api, arg)) = token.split_once("->") {
        return match api {
            "GetProcAddress" => {
                // spell the looked-up symbol in raw form; unification will
                // bring it back to the planted argument token
                let raw_arg = if spec.emit_raw_variants && rng.gen_bool(0.5) {
                    let canonical = capitalize_symbol(arg);
                    let variants = raw_variants(&canonical, aliases);
                    variants[rng.gen_range(0..variants.len())].clone()
                } else {
                    arg.to_string()
                };
                ApiCallRecord::new("GetProcAddress", vec!["0x7ffa1000".into(), raw_arg], count)
            }
            _ => {
                let module = if rng.gen_bool(0.5) {
                    format!("C:\\Windows\\System32\\{arg}")
                } else {
                    arg.to_string()
                };
                let api_raw = if spec.emit_raw_variants && rng.gen_bool(0.5) {
                    format!("{api}A")
                } else {
                    api.to_string()
                };
                ApiCallRecord::new(api_raw, vec![module], count)
            }
        };
    }
    let name = if spec.emit_raw_variants {
        let variants = raw_variants(token, aliases);
        variants[rng.gen_range(0..variants.len())].clone()
    } else {
        token.to_string()
    };
    ApiCallRecord::new(name, vec![], count)
}

/// Best-effort raw spelling of a lowercased planted argument: the
/// unification chain lowercases `GetProcAddress` arguments, so any
/// capitalization that unifies onto the same lowercase text is fair game.
fn capitalize_symbol(lower: &str) -> String {
    let mut out = String::with_capacity(lower.len());
    let mut upper_next = true;
    for c in lower.chars() {
        if upper_next && c.is_ascii_alphabetic() {
            out.push(c.to_ascii_uppercase());
            upper_next = false;
        } else {
            out.push(c);
        }
    }
    out
}

fn generate_one(
    spec: &SynthSpec,
    aliases: &AliasTable,
    family: Option<&FamilySpec>,
    signature: &[String],
    digest: String,
    sample_seed: u64,
) -> EmulationReport {
    let mut rng = make_rng(sample_seed);
    let mut calls = Vec::new();
    match family {
        Some(family) => {
            for token in signature {
                if rng.gen_bool(family.signature_rate) {
                    calls.push(emit_call(token, spec, aliases, &mut rng));
                }
            }
            let noise = Poisson::new(f64::from(family.shared_noise_tokens).max(1e-9))
                .expect("valid poisson mean");
            let n_noise = noise.sample(&mut rng) as usize;
            for _ in 0..n_noise {
                let token = &spec.benign.token_pool[rng.gen_range(0..spec.benign.token_pool.len())];
                calls.push(emit_call(token, spec, aliases, &mut rng));
            }
        }
        None => {
            let n = Poisson::new(spec.benign.mean_tokens.max(1e-9)).expect("valid poisson mean");
            let n_tokens = n.sample(&mut rng) as usize;
            for _ in 0..n_tokens {
                let token = &spec.benign.token_pool[rng.gen_range(0..spec.benign.token_pool.len())];
                calls.push(emit_call(token, spec, aliases, &mut rng));
            }
        }
    }
    let timeout = rng.gen_bool(0.02);
    EmulationReport {
        sample_id: digest,
        exit_kind: if timeout { ExitKind::Timeout } else { ExitKind::Graceful },
        duration_s: if timeout { 60.0 } else { rng.gen_range(0.5..20.5) },
        calls,
    }
}

/// Generate the corpus: reports plus the manifest binding them to labels.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<EmulationReport>, CorpusManifest), DatagenError> {
    spec.validate()?;
    let aliases = AliasTable::builtin();

    // plan: (family index or benign, per-family sample index, global stream)
    let mut plan: Vec<(Option<usize>, usize)> = Vec::new();
    for (f, family) in spec.families.iter().enumerate() {
        for i in 0..family.n_samples {
            plan.push((Some(f), i));
        }
    }
    for i in 0..spec.benign.n_samples {
        plan.push((None, i));
    }
    let signatures: Vec<Vec<String>> =
        spec.families.iter().map(|f| spec.effective_signature(f)).collect();

    let reports: Vec<EmulationReport> = par::map_range(plan.len(), |g| {
        let (family_idx, i) = plan[g];
        let (family, signature, name) = match family_idx {
            Some(f) => (Some(&spec.families[f]), signatures[f].as_slice(), spec.families[f].name.as_str()),
            None => (None, &[] as &[String], BENIGN_FAMILY),
        };
        let digest = sample_digest(spec.rng_seed, name, i);
        generate_one(spec, &aliases, family, signature, digest, derive_seed(spec.rng_seed, g as u64))
    });

    let mut entries = Vec::with_capacity(plan.len());
    for (g, &(family_idx, _)) in plan.iter().enumerate() {
        let (class, family) = match family_idx {
            Some(f) => (SampleClass::Malicious, spec.families[f].name.clone()),
            None => (SampleClass::Benign, BENIGN_FAMILY.to_string()),
        };
        entries.push(ManifestEntry {
            sample_id: reports[g].sample_id.clone(),
            class,
            family,
            report_path: PathBuf::from(format!("{}.json", reports[g].sample_id)),
            binary_path: None,
        });
    }
    Ok((reports, CorpusManifest { entries }))
}

/// Write `manifest.csv` plus a `reports/` directory under `dir`.
pub fn write_corpus(
    dir: &Path,
    reports: &[EmulationReport],
    manifest: &CorpusManifest,
) -> Result<(), DatagenError> {
    let reports_dir = dir.join("reports");
    std::fs::create_dir_all(&reports_dir)?;
    for report in reports {
        let path = reports_dir.join(format!("{}.json", report.sample_id));
        std::fs::write(path, crate::ingest::serialize_report(report))?;
    }
    std::fs::write(dir.join("manifest.csv"), manifest.to_csv_string())?;
    Ok(())
}

/// Named presets exercised by the test suites and the CLI.
pub fn preset(name: &str) -> Option<SynthSpec> {
    match name {
        "easy" => Some(easy()),
        "confusable" => Some(confusable()),
        "paper-mini" => Some(paper_mini()),
        _ => None,
    }
}

pub const PRESET_NAMES: [&str; 3] = ["easy", "confusable", "paper-mini"];

fn benign_pool() -> Vec<String> {
    [
        "GetTickCount", "Sleep", "CloseHandle", "GetLastError", "HeapAlloc", "HeapFree",
        "GetCurrentProcess", "GetSystemTime", "ReadFile", "WriteFile", "CreateFile",
        "GetModuleFileName", "GetCommandLine", "ExitProcess", "TlsGetValue", "GetStdHandle",
        "FormatMessage", "LocalFree", "GetProcessHeap", "QueryPerformanceCounter",
        "InitializeCriticalSection", "EnterCriticalSection", "LeaveCriticalSection",
        "MultiByteToWideChar", "WideCharToMultiByte",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Perfectly separable binary corpus: 200 benign, 200 malicious with a
/// disjoint always-on signature.
pub fn easy() -> SynthSpec {
    SynthSpec {
        families: vec![FamilySpec {
            name: "AlphaLoader".into(),
            n_samples: 200,
            signature_tokens: vec![
                "VirtualAlloc".into(),
                "WriteProcessMemory".into(),
                "CreateRemoteThread".into(),
                "OpenProcess".into(),
                "LoadLibrary->ws2_32.dll".into(),
                "GetProcAddress->virtualalloc".into(),
                "InternetOpen".into(),
                "HttpSendRequest".into(),
            ],
            signature_rate: 1.0,
            shared_noise_tokens: 4,
            confuse_with: None,
        }],
        benign: BenignSpec { n_samples: 200, token_pool: benign_pool(), mean_tokens: 8.0 },
        rng_seed: 0,
        emit_raw_variants: true,
        confuse_share: 0.8,
    }
}

/// Two deliberately confusable family pairs plus one isolated family.
pub fn confusable() -> SynthSpec {
    let fam = |name: &str, tokens: &[&str], confuse: Option<&str>| FamilySpec {
        name: name.into(),
        n_samples: 60,
        signature_tokens: tokens.iter().map(|s| s.to_string()).collect(),
        signature_rate: 0.9,
        shared_noise_tokens: 5,
        confuse_with: confuse.map(|s| s.to_string()),
    };
    SynthSpec {
        families: vec![
            fam(
                "AlphaRAT",
                &["CreateRemoteThread", "WriteProcessMemory", "OpenProcess", "VirtualAlloc", "GetAsyncKeyState"],
                None,
            ),
            fam(
                "BravoRAT",
                &["RegSetValue", "GetForegroundWindow"],
                Some("AlphaRAT"),
            ),
            fam(
                "CharlieLocker",
                &["CryptEncrypt", "FindFirstFile", "FindNextFile", "DeleteFile", "MoveFile"],
                None,
            ),
            fam(
                "DeltaLocker",
                &["CryptGenKey", "GetLogicalDrives"],
                Some("CharlieLocker"),
            ),
            fam(
                "EchoStealer",
                &["InternetOpen", "InternetConnect", "HttpOpenRequest", "HttpSendRequest", "GetClipboardData"],
                None,
            ),
        ],
        benign: BenignSpec { n_samples: 60, token_pool: benign_pool(), mean_tokens: 8.0 },
        rng_seed: 0,
        emit_raw_variants: true,
        confuse_share: 0.8,
    }
}

/// Five disjoint families of 100 samples plus 100 benign; the desk-scale
/// stand-in for the full experiment grid.
pub fn paper_mini() -> SynthSpec {
    let fam = |name: &str, tokens: &[&str]| FamilySpec {
        name: name.into(),
        n_samples: 100,
        signature_tokens: tokens.iter().map(|s| s.to_string()).collect(),
        signature_rate: 0.95,
        shared_noise_tokens: 5,
        confuse_with: None,
    };
    SynthSpec {
        families: vec![
            fam(
                "AlphaRAT",
                &["CreateRemoteThread", "WriteProcessMemory", "OpenProcess", "GetAsyncKeyState", "SetWindowsHook"],
            ),
            fam(
                "BravoLoader",
                &["VirtualAlloc", "LoadLibrary->ws2_32.dll", "GetProcAddress->virtualalloc", "VirtualProtect", "FlushInstructionCache"],
            ),
            fam(
                "CharlieLocker",
                &["CryptEncrypt", "CryptGenKey", "FindFirstFile", "FindNextFile", "DeleteFile"],
            ),
            fam(
                "DeltaStealer",
                &["InternetOpen", "InternetConnect", "HttpSendRequest", "GetClipboardData", "RegQueryValue"],
            ),
            fam(
                "EchoBot",
                &["ConnectNamedPipe", "CreateNamedPipe", "PeekNamedPipe", "RegSetValue", "CreateService"],
            ),
        ],
        benign: BenignSpec { n_samples: 100, token_pool: benign_pool(), mean_tokens: 8.0 },
        rng_seed: 0,
        emit_raw_variants: true,
        confuse_share: 0.8,
    }
}
