//! Value-set corpora: the canonical record types, ingestion from FHIR
//! `ValueSet` expansions, filtering, type inference, summary statistics and
//! a synthetic generator for license-free experiments.

mod fhir;
mod stats;
mod synth;
mod systems;
mod vs_type;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fhir::{ingest_fhir_dir, parse_fhir_valueset};
pub use stats::{corpus_stats, nearest_rank, CorpusStats, STAT_PERCENTILES};
pub use synth::{generate_synthetic_corpus, SynthConfig};
pub use systems::{normalize_system_uri, CANONICAL_SYSTEMS};
pub use vs_type::{infer_value_set_type, TypeRule, VsType, TYPE_RULES};

/// Minimum member count for a value set to enter the benchmark.
pub const MIN_SET_SIZE: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("value set {0} has no expansion.contains")]
    MissingExpansion(String),
    #[error("value set {0} has neither title nor name")]
    MissingTitle(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid synthetic corpus config: {0}")]
    InvalidConfig(String),
    #[error("{path}:{line}: {message}")]
    BadLine {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate oid {0} in corpus")]
    DuplicateOid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One member code. `(code, system)` is the identity key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub code: String,
    pub system: String,
    #[serde(default)]
    pub display: String,
}

impl CodeEntry {
    pub fn new(code: impl Into<String>, system: impl Into<String>, display: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            system: system.into(),
            display: display.into(),
        }
    }

    pub fn key(&self) -> CodeKey {
        CodeKey::new(&self.code, &self.system)
    }
}

/// Owned `(code, system)` identity of a code.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CodeKey {
    pub code: String,
    pub system: String,
}

impl CodeKey {
    pub fn new(code: impl Into<String>, system: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            system: system.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSet {
    pub oid: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub publisher: String,
    pub vs_type: VsType,
    pub codes: Vec<CodeEntry>,
}

impl ValueSet {
    pub fn code_keys(&self) -> HashSet<CodeKey> {
        self.codes.iter().map(CodeEntry::key).collect()
    }

    pub fn systems(&self) -> HashSet<&str> {
        self.codes.iter().map(|c| c.system.as_str()).collect()
    }

    /// Drop repeated `(code, system)` pairs, keeping the first occurrence.
    /// Returns how many entries were removed.
    pub fn dedup_codes(&mut self) -> usize {
        let mut seen = HashSet::new();
        let before = self.codes.len();
        self.codes.retain(|c| seen.insert((c.code.clone(), c.system.clone())));
        before - self.codes.len()
    }
}

/// Keep the sets with at least [`MIN_SET_SIZE`] codes, preserving order.
pub fn filter_corpus(sets: Vec<ValueSet>) -> Vec<ValueSet> {
    sets.into_iter().filter(|s| s.codes.len() >= MIN_SET_SIZE).collect()
}

/// Read a line-delimited JSON corpus. Blank lines are skipped; any other
/// unparsable line is reported with its 1-based line number.
pub fn read_corpus(path: &Path) -> Result<Vec<ValueSet>, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut sets = Vec::new();
    let mut oids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| CorpusError::BadLine {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let mut vs: ValueSet = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if vs.oid.is_empty() {
            return Err(bad("empty oid".into()));
        }
        if vs.codes.iter().any(|c| c.code.is_empty() || c.system.is_empty()) {
            return Err(bad("code entry with empty code or system".into()));
        }
        let removed = vs.dedup_codes();
        if removed > 0 {
            log::warn!("{}: dropped {removed} duplicate codes in {}", path.display(), vs.oid);
        }
        if !oids.insert(vs.oid.clone()) {
            return Err(CorpusError::DuplicateOid(vs.oid));
        }
        sets.push(vs);
    }
    Ok(sets)
}

pub fn write_corpus(path: &Path, sets: &[ValueSet]) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    for vs in sets {
        serde_json::to_writer(&mut buf, vs).expect("value set serializes");
        buf.push(b'\n');
    }
    crate::persistence::write_atomic(path, &buf).map_err(|e| io_err(path, e))
}

/// Write a CSV table from string rows.
pub(crate) fn write_csv_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
    let file = File::create(path)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| e.into_error())?.flush()
}

#[cfg(test)]
pub(crate) fn test_set(oid: &str, n: usize) -> ValueSet {
    ValueSet {
        oid: oid.to_string(),
        title: format!("Set {oid}"),
        description: String::new(),
        publisher: "P".into(),
        vs_type: VsType::Other,
        codes: (0..n)
            .map(|i| CodeEntry::new(format!("c{i}"), "SNOMED-CT", format!("code {i}")))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn filter_boundary_at_three() {
        let out = filter_corpus(vec![test_set("a", 2), test_set("b", 3)]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].oid, "b");
        assert!(filter_corpus(vec![]).is_empty());
    }

    #[test]
    fn filter_sizes_one_to_ten() {
        let sets: Vec<_> = (1..=10).map(|n| test_set(&n.to_string(), n)).collect();
        // oracle: count of sizes >= 3 in 1..=10
        let expected = (1..=10).filter(|n| *n >= 3).count();
        let out = filter_corpus(sets);
        assert_eq!(out.len(), expected);
        assert_eq!(out.len(), 8);
        let sizes: Vec<_> = out.iter().map(|s| s.codes.len()).collect();
        assert_eq!(sizes, (3..=10).collect::<Vec<_>>());
    }

    #[test]
    fn corpus_file_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let sets = vec![test_set("1.2.3", 4), test_set("1.2.4", 3)];
        write_corpus(&path, &sets).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), sets);

        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json}\n");
        std::fs::write(&path, text).unwrap();
        match read_corpus(&path).unwrap_err() {
            CorpusError::BadLine { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_codes_collapse_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut vs = test_set("x", 3);
        vs.codes.push(vs.codes[0].clone());
        std::fs::write(&path, serde_json::to_string(&vs).unwrap() + "\n").unwrap();
        assert_eq!(read_corpus(&path).unwrap()[0].codes.len(), 3);
    }

    proptest! {
        #[test]
        fn filter_is_idempotent_and_sizes_at_least_three(sizes in proptest::collection::vec(0usize..8, 0..30)) {
            let sets: Vec<_> = sizes.iter().enumerate().map(|(i, n)| test_set(&i.to_string(), *n)).collect();
            let once = filter_corpus(sets);
            prop_assert!(once.iter().all(|s| s.codes.len() >= 3));
            let twice = filter_corpus(once.clone());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn jsonl_round_trip(n in 0usize..6, title in "[A-Za-z ]{1,20}", desc in ".{0,20}") {
            let mut vs = test_set("9.9", n);
            vs.title = title;
            vs.description = desc;
            let line = serde_json::to_string(&vs).unwrap();
            let back: ValueSet = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, vs);
        }
    }
}
