//! Matrix-directory persistence.
//!
//! A matrix directory holds three files:
//!
//! * `vocabulary.json` — the ordered token list
//! * `rows.jsonl` — one `["<sample_id>", [[col, val], ...]]` line per row
//! * `labels.json` — per-row class and family ids with their name tables
//!
//! Everything is written deterministically so equal inputs give
//! byte-identical directories.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FeatureVocabulary, SparseMatrix};
use crate::unify::FeatureToken;

#[derive(Debug, Error)]
pub enum MatrixIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad {file}: {msg}")]
    Format { file: &'static str, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MatrixIoError + '_ {
    move |source| MatrixIoError::Io { path: path.display().to_string(), source }
}

/// Per-row labels with their name tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsFile {
    pub class_names: Vec<String>,
    pub class_ids: Vec<usize>,
    pub family_names: Vec<String>,
    pub family_ids: Vec<usize>,
}

/// A matrix directory loaded into memory.
#[derive(Debug, Clone)]
pub struct MatrixBundle {
    pub matrix: SparseMatrix,
    pub vocab: FeatureVocabulary,
    pub sample_ids: Vec<String>,
    pub labels: LabelsFile,
}

pub fn write_matrix_dir(dir: &Path, bundle: &MatrixBundle) -> Result<(), MatrixIoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let vocab_path = dir.join("vocabulary.json");
    let tokens: &[FeatureToken] = bundle.vocab.tokens();
    let json = serde_json::to_string_pretty(tokens).expect("token list serializes");
    fs::write(&vocab_path, json).map_err(io_err(&vocab_path))?;

    let rows_path = dir.join("rows.jsonl");
    let mut out = Vec::new();
    for (i, row) in bundle.matrix.rows().iter().enumerate() {
        let line: (&str, &Vec<(usize, f64)>) = (&bundle.sample_ids[i], row);
        serde_json::to_writer(&mut out, &line).expect("row serializes");
        out.push(b'\n');
    }
    fs::write(&rows_path, out).map_err(io_err(&rows_path))?;

    let labels_path = dir.join("labels.json");
    let json = serde_json::to_string_pretty(&bundle.labels).expect("labels serialize");
    fs::write(&labels_path, json).map_err(io_err(&labels_path))?;
    Ok(())
}

pub fn read_matrix_dir(dir: &Path) -> Result<MatrixBundle, MatrixIoError> {
    let vocab_path = dir.join("vocabulary.json");
    let bytes = fs::read(&vocab_path).map_err(io_err(&vocab_path))?;
    let tokens: Vec<FeatureToken> = serde_json::from_slice(&bytes)
        .map_err(|e| MatrixIoError::Format { file: "vocabulary.json", msg: e.to_string() })?;
    let vocab = FeatureVocabulary::from_tokens(tokens);

    let rows_path = dir.join("rows.jsonl");
    let file = fs::File::open(&rows_path).map_err(io_err(&rows_path))?;
    let mut sample_ids = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&rows_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, row): (String, Vec<(usize, f64)>) = serde_json::from_str(&line)
            .map_err(|e| MatrixIoError::Format {
                file: "rows.jsonl",
                msg: format!("line {}: {e}", i + 1),
            })?;
        sample_ids.push(id);
        rows.push(row);
    }
    let matrix = SparseMatrix::from_rows(vocab.len(), rows)
        .map_err(|e| MatrixIoError::Format { file: "rows.jsonl", msg: e.to_string() })?;

    let labels_path = dir.join("labels.json");
    let bytes = fs::read(&labels_path).map_err(io_err(&labels_path))?;
    let labels: LabelsFile = serde_json::from_slice(&bytes)
        .map_err(|e| MatrixIoError::Format { file: "labels.json", msg: e.to_string() })?;

    if labels.class_ids.len() != matrix.n_rows() || labels.family_ids.len() != matrix.n_rows() {
        return Err(MatrixIoError::Format {
            file: "labels.json",
            msg: format!(
                "label rows ({}/{}) do not match matrix rows ({})",
                labels.class_ids.len(),
                labels.family_ids.len(),
                matrix.n_rows()
            ),
        });
    }
    Ok(MatrixBundle { matrix, vocab, sample_ids, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::build_vocabulary;
    use crate::unify::FeatureToken;
    use indexmap::IndexMap;

    #[test]
    fn matrix_dir_roundtrip() {
        let maps: Vec<IndexMap<FeatureToken, u64>> = vec![
            [(FeatureToken::api("A"), 2u64), (FeatureToken::api("B"), 1)].into_iter().collect(),
            [(FeatureToken::api("B"), 7u64)].into_iter().collect(),
        ];
        let vocab = build_vocabulary(&maps).unwrap();
        let (matrix, _) = crate::features::build_matrix(&maps, &vocab);
        let bundle = MatrixBundle {
            matrix,
            vocab,
            sample_ids: vec!["s1".into(), "s2".into()],
            labels: LabelsFile {
                class_names: vec!["benign".into(), "malicious".into()],
                class_ids: vec![0, 1],
                family_names: vec!["Benign".into(), "Loki".into()],
                family_ids: vec![0, 1],
            },
        };
        let dir = tempfile::tempdir().unwrap();
        write_matrix_dir(dir.path(), &bundle).unwrap();
        let loaded = read_matrix_dir(dir.path()).unwrap();
        assert_eq!(loaded.matrix, bundle.matrix);
        assert_eq!(loaded.vocab.tokens(), bundle.vocab.tokens());
        assert_eq!(loaded.sample_ids, bundle.sample_ids);
        assert_eq!(loaded.labels, bundle.labels);

        // deterministic bytes
        let dir2 = tempfile::tempdir().unwrap();
        write_matrix_dir(dir2.path(), &bundle).unwrap();
        for file in ["vocabulary.json", "rows.jsonl", "labels.json"] {
            assert_eq!(
                std::fs::read(dir.path().join(file)).unwrap(),
                std::fs::read(dir2.path().join(file)).unwrap(),
                "{file} differs between identical writes"
            );
        }
    }
}
