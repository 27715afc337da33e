//! Win32 API name unification.
//!
//! Raw call names collapse into canonical feature tokens through a fixed
//! rule chain: mangling detection first, then ANSI/Unicode `A`/`W` suffix
//! merge, extended-`Ex` suffix merge, and finally C-runtime alias merge.
//! Running the mangling check first keeps the suffix rules away from
//! decorated junk, and the suffix guards below keep short or all-caps names
//! like `GetACP` intact.
//!
//! The chain is a projection: re-unifying any canonical name is a no-op.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use indexmap::IndexMap;

use crate::ingest::{ApiCallRecord, EmulationReport};

/// What a feature token denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    /// A canonical API name.
    Api,
    /// An interesting-API argument, shaped `<CanonicalApi>-><normalized-arg>`.
    ApiArg,
    /// A mangled-name signature, shaped `mangled::<root>`.
    Mangled,
    /// An import-table digest indicator column.
    Imphash,
}

/// A canonical feature token. Equality and ordering cover kind and text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureToken {
    pub kind: TokenKind,
    pub text: String,
}

impl FeatureToken {
    pub fn api(text: impl Into<String>) -> Self {
        Self { kind: TokenKind::Api, text: text.into() }
    }

    pub fn api_arg(api: &str, arg: &str) -> Self {
        Self { kind: TokenKind::ApiArg, text: format!("{api}->{arg}") }
    }

    pub fn mangled(root: &str) -> Self {
        Self { kind: TokenKind::Mangled, text: format!("mangled::{root}") }
    }

    pub fn imphash(digest: impl Into<String>) -> Self {
        Self { kind: TokenKind::Imphash, text: digest.into() }
    }
}

impl fmt::Display for FeatureToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Errors from alias-table loading.
#[derive(Debug, Error)]
pub enum AliasError {
    #[error("alias table missing at {0}")]
    Missing(std::path::PathBuf),
    #[error("alias table row {row}: {msg}")]
    Malformed { row: usize, msg: String },
    #[error("alias cycle involving `{0}`")]
    Cycle(String),
}

/// C-runtime alias map, flattened so no alias resolves to another alias.
#[derive(Debug, Clone, Default)]
pub struct AliasTable {
    map: HashMap<String, String>,
}

/// The alias table shipped with the crate.
const DEFAULT_ALIASES_CSV: &str = include_str!("../data/crt_aliases.csv");

impl AliasTable {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The built-in table seeded with underscore-prefixed CRT aliases and
    /// wide/narrow routine pairs.
    pub fn builtin() -> Self {
        Self::from_csv_bytes(DEFAULT_ALIASES_CSV.as_bytes())
            .expect("embedded alias table is valid")
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, AliasError> {
        let bytes = std::fs::read(path).map_err(|_| AliasError::Missing(path.to_path_buf()))?;
        Self::from_csv_bytes(&bytes)
    }

    /// Parse a two-column `alias,canonical` CSV. Chains are flattened
    /// transitively; cycles are rejected.
    pub fn from_csv_bytes(bytes: &[u8]) -> Result<Self, AliasError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .from_reader(bytes);
        let mut raw: HashMap<String, String> = HashMap::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| AliasError::Malformed { row: i + 1, msg: e.to_string() })?;
            if record.len() != 2 {
                return Err(AliasError::Malformed {
                    row: i + 1,
                    msg: format!("expected 2 columns, got {}", record.len()),
                });
            }
            let alias = record[0].trim().to_string();
            let canonical = record[1].trim().to_string();
            if alias.is_empty() || canonical.is_empty() {
                return Err(AliasError::Malformed { row: i + 1, msg: "empty name".into() });
            }
            raw.insert(alias, canonical);
        }
        // Flatten chains like a -> b -> c down to a -> c.
        let mut map = HashMap::with_capacity(raw.len());
        for alias in raw.keys() {
            let mut target = &raw[alias];
            let mut hops = 0usize;
            while let Some(next) = raw.get(target) {
                target = next;
                hops += 1;
                if hops > raw.len() {
                    return Err(AliasError::Cycle(alias.clone()));
                }
            }
            map.insert(alias.clone(), target.clone());
        }
        Ok(Self { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Canonical name for `name`, or `name` itself when not aliased.
    pub fn resolve<'a>(&'a self, name: &'a str) -> &'a str {
        self.map.get(name).map(String::as_str).unwrap_or(name)
    }
}

fn is_lower_or_digit(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit()
}

/// Merge the ANSI/Unicode API variants: a trailing `A` or `W` is dropped
/// iff the name is longer than 3 chars and the preceding char is a
/// lowercase letter or digit.
pub fn strip_ansi_unicode(name: &str) -> &str {
    if name.chars().count() > 3 && (name.ends_with('A') || name.ends_with('W')) {
        let stem = &name[..name.len() - 1];
        if stem.chars().last().is_some_and(is_lower_or_digit) {
            return stem;
        }
    }
    name
}

/// Merge the extended API variants: a trailing `Ex` is dropped iff the name
/// is longer than 4 chars and the char before `Ex` is a lowercase letter or
/// digit. Iterated to a fixed point so the unification chain stays
/// idempotent.
pub fn strip_ex(name: &str) -> &str {
    let mut name = name;
    while name.chars().count() > 4 && name.ends_with("Ex") {
        let stem = &name[..name.len() - 2];
        if !stem.chars().last().is_some_and(is_lower_or_digit) {
            break;
        }
        name = stem;
    }
    name
}

/// Merge C-runtime alias routines onto their canonical names.
pub fn merge_crt<'a>(name: &'a str, aliases: &'a AliasTable) -> &'a str {
    aliases.resolve(name)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Detect MSVC-style decorated names and reduce them to a root signature.
///
/// Handles C++ manglings (leading `?`, root taken up to the first `@`),
/// stdcall `_root@N`, and fastcall `@root@N`. Returns `None` for plain
/// names.
pub fn mangle_signature(name: &str) -> Option<FeatureToken> {
    if let Some(rest) = name.strip_prefix('?') {
        let at = rest.find('@')?;
        if at == 0 {
            return None;
        }
        return Some(FeatureToken::mangled(&rest[..at]));
    }
    // stdcall `_root@N` and fastcall `@root@N`
    for prefix in ['_', '@'] {
        if let Some(rest) = name.strip_prefix(prefix) {
            if let Some((root, digits)) = rest.split_once('@') {
                if is_ident(root) && !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
                {
                    return Some(FeatureToken::mangled(root));
                }
            }
        }
    }
    None
}

/// Run the full unification chain on one raw name.
pub fn unify_name(name: &str, aliases: &AliasTable) -> FeatureToken {
    if let Some(token) = mangle_signature(name) {
        return token;
    }
    FeatureToken::api(merge_crt(strip_ex(strip_ansi_unicode(name)), aliases))
}

/// Interesting APIs whose arguments become features of their own.
const LIBRARY_ARG_APIS: [&str; 2] = ["LoadLibrary", "GetModuleHandle"];
const PROC_ARG_API: &str = "GetProcAddress";

fn basename(path: &str) -> &str {
    path.rsplit(['\\', '/']).next().unwrap_or(path)
}

/// Argument tokens for the interesting APIs, given the canonical API name.
///
/// Library loads keep the file basename (extension included, lowercased);
/// `GetProcAddress` re-unifies the looked-up symbol before lowercasing, so
/// dynamically resolved names land on the same canonical token space.
pub fn arg_tokens(call: &ApiCallRecord, canonical_api: &str, aliases: &AliasTable) -> Vec<FeatureToken> {
    if LIBRARY_ARG_APIS.contains(&canonical_api) {
        if let Some(arg) = call.args.first() {
            if !arg.is_empty() {
                let module = basename(arg).to_ascii_lowercase();
                if !module.is_empty() {
                    return vec![FeatureToken::api_arg(canonical_api, &module)];
                }
            }
        }
    } else if canonical_api == PROC_ARG_API {
        if let Some(arg) = call.args.get(1) {
            if !arg.is_empty() {
                let unified = unify_name(arg, aliases);
                return vec![FeatureToken::api_arg(
                    canonical_api,
                    &unified.text.to_ascii_lowercase(),
                )];
            }
        }
    }
    Vec::new()
}

/// Unify one call record into `(token, count)` pairs: the canonical API
/// token plus any argument tokens, all carrying the call's count.
pub fn unify_call(call: &ApiCallRecord, aliases: &AliasTable) -> Vec<(FeatureToken, u64)> {
    let token = unify_name(&call.api_name, aliases);
    let mut out = Vec::with_capacity(2);
    if token.kind == TokenKind::Api {
        let args = arg_tokens(call, &token.text, aliases);
        out.push((token, call.count));
        out.extend(args.into_iter().map(|t| (t, call.count)));
    } else {
        out.push((token, call.count));
    }
    out
}

/// Token counts for one report, summed across calls that unify to the same
/// token. Insertion order is first occurrence, so downstream vocabulary
/// order is deterministic.
pub fn featurize_report(report: &EmulationReport, aliases: &AliasTable) -> IndexMap<FeatureToken, u64> {
    let mut counts: IndexMap<FeatureToken, u64> = IndexMap::new();
    for call in &report.calls {
        for (token, count) in unify_call(call, aliases) {
            *counts.entry(token).or_insert(0) += count;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ExitKind;
    use proptest::prelude::*;

    fn call(name: &str, args: &[&str], count: u64) -> ApiCallRecord {
        ApiCallRecord::new(name, args.iter().map(|s| s.to_string()).collect(), count)
    }

    #[test]
    fn ansi_unicode_merge() {
        assert_eq!(strip_ansi_unicode("CreateFileA"), "CreateFile");
        assert_eq!(strip_ansi_unicode("CreateFileW"), "CreateFile");
        assert_eq!(strip_ansi_unicode("GetTickCount"), "GetTickCount");
        assert_eq!(strip_ansi_unicode("WSAStartup"), "WSAStartup");
        assert_eq!(strip_ansi_unicode("GetACP"), "GetACP");
        // guard: preceding char must be lowercase or digit
        assert_eq!(strip_ansi_unicode("GetACW"), "GetACW");
        assert_eq!(strip_ansi_unicode("Data5A"), "Data5");
        // guard: length
        assert_eq!(strip_ansi_unicode("AW"), "AW");
        assert_eq!(strip_ansi_unicode("NtA"), "NtA");
    }

    #[test]
    fn ex_merge() {
        assert_eq!(strip_ex("VirtualAllocEx"), "VirtualAlloc");
        assert_eq!(strip_ex(strip_ansi_unicode("LoadLibraryExW")), "LoadLibrary");
        assert_eq!(strip_ex("GetDC"), "GetDC");
        assert_eq!(strip_ex("IsEx"), "IsEx");
        assert_eq!(strip_ex("Mutex"), "Mutex");
        assert_eq!(strip_ex("RunExEx"), "Run");
        // guard: uppercase before the suffix
        assert_eq!(strip_ex("FooWEx"), "FooWEx");
    }

    #[test]
    fn crt_merge_uses_flattened_table() {
        let table = AliasTable::builtin();
        assert_eq!(merge_crt("_stricmp", &table), "stricmp");
        assert_eq!(merge_crt("_wcsicmp", &table), "stricmp");
        assert_eq!(merge_crt("memcpy", &table), "memcpy");
        let empty = AliasTable::empty();
        assert_eq!(merge_crt("_stricmp", &empty), "_stricmp");
    }

    #[test]
    fn alias_table_flattens_chains_and_rejects_cycles() {
        let table = AliasTable::from_csv_bytes(b"a,b\nb,c\n").unwrap();
        assert_eq!(table.resolve("a"), "c");
        assert_eq!(table.resolve("b"), "c");
        assert!(matches!(
            AliasTable::from_csv_bytes(b"a,b\nb,a\n"),
            Err(AliasError::Cycle(_))
        ));
    }

    #[test]
    fn mangling_detection() {
        assert_eq!(
            mangle_signature("?MyFunc@@YAHH@Z").unwrap(),
            FeatureToken::mangled("MyFunc")
        );
        assert_eq!(
            mangle_signature("_DllMain@12").unwrap(),
            FeatureToken::mangled("DllMain")
        );
        assert_eq!(
            mangle_signature("@FastHelper@8").unwrap(),
            FeatureToken::mangled("FastHelper")
        );
        assert!(mangle_signature("CreateFile").is_none());
        assert!(mangle_signature("_stricmp").is_none());
        assert!(mangle_signature("_NotMangled@x2").is_none());
        assert!(mangle_signature("?@Broken@@").is_none());
    }

    #[test]
    fn arg_tokens_for_interesting_apis() {
        let table = AliasTable::builtin();
        let c = call("LoadLibraryA", &["C:\\Windows\\System32\\ws2_32.dll"], 1);
        assert_eq!(
            arg_tokens(&c, "LoadLibrary", &table),
            vec![FeatureToken::api_arg("LoadLibrary", "ws2_32.dll")]
        );
        let c = call("GetProcAddress", &["0x7ff0", "VirtualAllocEx"], 1);
        assert_eq!(
            arg_tokens(&c, "GetProcAddress", &table),
            vec![FeatureToken::api_arg("GetProcAddress", "virtualalloc")]
        );
        let c = call("GetModuleHandleW", &[], 1);
        assert_eq!(arg_tokens(&c, "GetModuleHandle", &table), vec![]);
        // non-interesting API never yields arg tokens
        let c = call("CreateFileA", &["C:\\x.txt"], 1);
        assert_eq!(arg_tokens(&c, "CreateFile", &table), vec![]);
    }

    #[test]
    fn unify_call_composes_the_chain() {
        let table = AliasTable::builtin();
        assert_eq!(
            unify_call(&call("RegOpenKeyExA", &[], 3), &table),
            vec![(FeatureToken::api("RegOpenKey"), 3)]
        );
        assert_eq!(
            unify_call(&call("?Init@@YAXXZ", &[], 1), &table),
            vec![(FeatureToken::mangled("Init"), 1)]
        );
        assert_eq!(
            unify_call(&call("LoadLibraryA", &["user32.dll"], 2), &table),
            vec![
                (FeatureToken::api("LoadLibrary"), 2),
                (FeatureToken::api_arg("LoadLibrary", "user32.dll"), 2),
            ]
        );
    }

    fn report_of(calls: Vec<ApiCallRecord>) -> EmulationReport {
        EmulationReport {
            sample_id: "0".repeat(64),
            exit_kind: ExitKind::Graceful,
            duration_s: 1.0,
            calls,
        }
    }

    #[test]
    fn featurize_fuses_counts_across_variants() {
        let table = AliasTable::builtin();
        let report = report_of(vec![
            call("CreateFileA", &[], 2),
            call("CreateFileW", &[], 1),
            call("GetTickCount", &[], 5),
        ]);
        let counts = featurize_report(&report, &table);
        assert_eq!(counts[&FeatureToken::api("CreateFile")], 3);
        assert_eq!(counts[&FeatureToken::api("GetTickCount")], 5);
        assert_eq!(counts.len(), 2);

        let empty = featurize_report(&report_of(vec![]), &table);
        assert!(empty.is_empty());
    }

    proptest! {
        /// Re-unifying a canonical api name is the identity.
        #[test]
        fn chain_is_idempotent(name in "[A-Za-z_?@][A-Za-z0-9_@:.]{0,24}") {
            let table = AliasTable::builtin();
            let once = unify_name(&name, &table);
            if once.kind == TokenKind::Api {
                let twice = unify_name(&once.text, &table);
                prop_assert_eq!(once, twice);
            }
        }

        /// Suffix strips never return the empty string.
        #[test]
        fn strips_never_empty(name in "[A-Za-z][A-Za-z0-9_]{0,16}") {
            prop_assert!(!strip_ansi_unicode(&name).is_empty());
            prop_assert!(!strip_ex(&name).is_empty());
        }

        /// Counts are invariant under permutation of the call list.
        #[test]
        fn featurize_ignores_call_order(perm_seed in 0u64..1000) {
            let table = AliasTable::builtin();
            let mut calls = vec![
                call("CreateFileA", &[], 1),
                call("CreateFileW", &[], 2),
                call("VirtualAllocEx", &[], 3),
                call("LoadLibraryExW", &["a.dll"], 1),
                call("_stricmp", &[], 4),
            ];
            let baseline = featurize_report(&report_of(calls.clone()), &table);
            // cheap deterministic shuffle
            let n = calls.len();
            for i in 0..n {
                let j = (perm_seed as usize + i * 7) % n;
                calls.swap(i, j);
            }
            let shuffled = featurize_report(&report_of(calls), &table);
            let mut a: Vec<_> = baseline.iter().collect();
            let mut b: Vec<_> = shuffled.iter().collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        /// Unification never grows a closed variant set.
        #[test]
        fn vocabulary_shrinks(stems in proptest::collection::hash_set("[A-Z][a-z]{2,8}", 1..8)) {
            let table = AliasTable::builtin();
            let mut raw: Vec<String> = Vec::new();
            for stem in &stems {
                raw.push(stem.clone());
                raw.push(format!("{stem}A"));
                raw.push(format!("{stem}W"));
                raw.push(format!("{stem}Ex"));
                raw.push(format!("{stem}ExA"));
                raw.push(format!("{stem}ExW"));
            }
            let unified: std::collections::HashSet<_> =
                raw.iter().map(|n| unify_name(n, &table)).collect();
            let raws: std::collections::HashSet<_> = raw.iter().collect();
            prop_assert!(unified.len() <= raws.len());
            // each closed family collapses onto its stem
            prop_assert_eq!(unified.len(), stems.len());
        }
    }
}
