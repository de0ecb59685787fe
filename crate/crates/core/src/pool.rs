//! Candidate pools: the union of the codes of a target's nearest value sets,
//! labelled by membership in the target.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodeKey, ValueSet};
use crate::embed::EmbeddingTable;
use crate::index::{query_top_k_rows, IndexError, VectorIndex};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("no retrieved sets for target {0}")]
    EmptyRetrieval(String),
    #[error("no pools (or no pool entries) to aggregate")]
    EmptyPools,
    #[error("index row {0} has no value set in the corpus")]
    UnknownIndexId(String),
    #[error("no title embedding for value set {0}")]
    MissingTitleEmbedding(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("{path}:{line}: {message}")]
    BadLine {
        path: String,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub code: String,
    pub system: String,
    pub display: String,
    pub similarity: f64,
    pub source_oid: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub target_oid: String,
    /// Number of codes in the target set (the RR@K denominator).
    pub target_size: usize,
    pub rr_at_k: f64,
    pub entries: Vec<CandidateEntry>,
}

impl CandidatePool {
    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.label == 1).count()
    }
}

/// Pool the codes of `retrieved` (best first). A code seen in several sets
/// keeps its highest similarity; on equal similarity the earlier-ranked
/// source wins.
pub fn build_candidate_pool(target: &ValueSet, retrieved: &[(&ValueSet, f64)]) -> Result<CandidatePool, PoolError> {
    if retrieved.is_empty() {
        return Err(PoolError::EmptyRetrieval(target.oid.clone()));
    }
    let truth = target.code_keys();
    let mut slot: HashMap<CodeKey, usize> = HashMap::new();
    let mut entries: Vec<CandidateEntry> = Vec::new();
    for (vs, sim) in retrieved {
        for c in &vs.codes {
            match slot.get(&c.key()) {
                Some(&i) => {
                    if *sim > entries[i].similarity {
                        entries[i].similarity = *sim;
                        entries[i].display = c.display.clone();
                        entries[i].source_oid = vs.oid.clone();
                    }
                }
                None => {
                    let key = c.key();
                    let label = truth.contains(&key) as u8;
                    slot.insert(key, entries.len());
                    entries.push(CandidateEntry {
                        code: c.code.clone(),
                        system: c.system.clone(),
                        display: c.display.clone(),
                        similarity: *sim,
                        source_oid: vs.oid.clone(),
                        label,
                    });
                }
            }
        }
    }
    let hits = entries.iter().filter(|e| e.label == 1).count();
    Ok(CandidatePool {
        target_oid: target.oid.clone(),
        target_size: truth.len(),
        rr_at_k: if truth.is_empty() { 0.0 } else { hits as f64 / truth.len() as f64 },
        entries,
    })
}

/// Total positives over total entries across all pools.
pub fn pool_positive_rate(pools: &[CandidatePool]) -> Result<f64, PoolError> {
    let total: usize = pools.iter().map(|p| p.entries.len()).sum();
    if total == 0 {
        return Err(PoolError::EmptyPools);
    }
    let pos: usize = pools.iter().map(CandidatePool::positives).sum();
    Ok(pos as f64 / total as f64)
}

/// Retrieve the `k` nearest sets for every set (excluding itself) and build
/// its pool. Output follows corpus order.
pub fn build_all_pools(
    sets: &[ValueSet],
    index: &VectorIndex,
    titles: &EmbeddingTable,
    k: usize,
) -> Result<Vec<CandidatePool>, PoolError> {
    let by_oid: HashMap<&str, &ValueSet> = sets.iter().map(|s| (s.oid.as_str(), s)).collect();
    let row_sets: Vec<&ValueSet> = index
        .ids()
        .iter()
        .map(|id| by_oid.get(id.as_str()).copied().ok_or_else(|| PoolError::UnknownIndexId(id.clone())))
        .collect::<Result<_, _>>()?;
    sets.iter()
        .map(|vs| {
            let q = titles
                .get(&vs.title)
                .map_err(|_| PoolError::MissingTitleEmbedding(vs.oid.clone()))?;
            let hits = query_top_k_rows(index, q.values(), k, Some(&vs.oid))?;
            let retrieved: Vec<(&ValueSet, f64)> = hits.into_iter().map(|(r, s)| (row_sets[r], s)).collect();
            build_candidate_pool(vs, &retrieved)
        })
        .collect()
}

pub fn write_pools(path: &Path, pools: &[CandidatePool]) -> Result<(), PoolError> {
    let mut buf = Vec::new();
    for p in pools {
        serde_json::to_writer(&mut buf, p).expect("pool serializes");
        buf.push(b'\n');
    }
    crate::persistence::write_atomic(path, &buf).map_err(|e| PoolError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_pools(path: &Path) -> Result<Vec<CandidatePool>, PoolError> {
    let io = |e| PoolError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut pools = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| PoolError::BadLine {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let pool: CandidatePool = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if !seen.insert(pool.target_oid.clone()) {
            return Err(bad(format!("duplicate pool for {}", pool.target_oid)));
        }
        pools.push(pool);
    }
    Ok(pools)
}
