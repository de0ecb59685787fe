//! Pair features: `[title embedding | display embedding | one-hot system | s_c]`.
//!
//! A [`FeatureMatrix`] keeps every row exactly but without repeating the
//! shared blocks: title vectors are stored once per pool and display vectors
//! once per distinct display string, each as sparse (index, value) lists.
//! [`FeatureMatrix::dense_row`] rebuilds the full `2d + 9` vector.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::embed::{Embedding, EmbeddingTable};
use crate::persistence::{read_artifact, write_artifact, ArtifactError, ArtifactKind, PayloadReader, PayloadWriter};
use crate::pool::CandidatePool;

pub const SYSTEM_SLOTS: [&str; 8] = ["SNOMED-CT", "ICD-10-CM", "RxNorm", "LOINC", "CPT", "ICD-10-PCS", "HCPCS", "OTHER"];
pub const OTHER_SLOT: usize = 7;
/// Embedding key used for candidates whose display name is empty.
pub const EMPTY_DISPLAY: &str = "<EMPTY>";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("title table has dimension {titles}, display table has {displays}")]
    DimensionMismatch { titles: usize, displays: usize },
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("malformed feature artifact: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn feature_dim(embed_dim: usize) -> usize {
    2 * embed_dim + SYSTEM_SLOTS.len() + 1
}

pub fn system_slot(system: &str) -> usize {
    SYSTEM_SLOTS[..OTHER_SLOT].iter().position(|s| *s == system).unwrap_or(OTHER_SLOT)
}

pub fn one_hot_system(system: &str) -> [f64; 8] {
    let mut v = [0.0; 8];
    v[system_slot(system)] = 1.0;
    v
}

pub fn display_key(display: &str) -> &str {
    if display.is_empty() {
        EMPTY_DISPLAY
    } else {
        display
    }
}

/// Dense feature rows for one pool, in entry order, with labels.
pub fn assemble_features(
    pool: &CandidatePool,
    title: &str,
    titles: &EmbeddingTable,
    displays: &EmbeddingTable,
) -> Result<Vec<(Vec<f64>, u8)>, FeatureError> {
    let t = lookup(titles, title)?;
    pool.entries
        .iter()
        .map(|e| {
            let d = lookup(displays, display_key(&e.display))?;
            let mut x = Vec::with_capacity(feature_dim(t.dim()));
            x.extend_from_slice(t.values());
            x.extend_from_slice(d.values());
            x.extend_from_slice(&one_hot_system(&e.system));
            x.push(e.similarity);
            Ok((x, e.label))
        })
        .collect()
}

fn lookup<'a>(table: &'a EmbeddingTable, key: &str) -> Result<&'a Embedding, FeatureError> {
    table.get(key).map_err(|_| FeatureError::MissingEmbedding(key.to_string()))
}

/// Compressed sparse rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRows {
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push_dense(&mut self, dense: &[f64]) {
        for (i, v) in dense.iter().enumerate() {
            if *v != 0.0 {
                self.indices.push(i as u32);
                self.values.push(*v);
            }
        }
        self.offsets.push(self.indices.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    fn write(&self, w: &mut PayloadWriter) -> Result<(), ArtifactError> {
        w.put_u64(self.len() as u64);
        w.put_u64(self.indices.len() as u64);
        for o in &self.offsets {
            w.put_u64(*o as u64);
        }
        w.put_u32s(&self.indices);
        w.put_f64s(&self.values)
    }

    fn read(r: &mut PayloadReader) -> Result<Self, FeatureError> {
        let n = r.u64()? as usize;
        let nnz = r.u64()? as usize;
        let offsets = (0..=n).map(|_| r.u64().map(|o| o as usize)).collect::<Result<Vec<_>, _>>()?;
        if offsets.first() != Some(&0) || offsets.last() != Some(&nnz) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(FeatureError::Malformed("bad row offsets".into()));
        }
        Ok(Self {
            offsets,
            indices: r.u32s(nnz)?,
            values: r.f64s(nnz)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub oid: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    embed_dim: usize,
    titles: SparseRows,
    displays: SparseRows,
    row_group: Vec<u32>,
    row_display: Vec<u32>,
    row_slot: Vec<u8>,
    row_similarity: Vec<f64>,
    labels: Vec<u8>,
    groups: Vec<FeatureGroup>,
}

impl FeatureMatrix {
    /// Rows follow pool order, then entry order within each pool.
    pub fn assemble(
        pools: &[CandidatePool],
        target_titles: &HashMap<&str, &str>,
        titles: &EmbeddingTable,
        displays: &EmbeddingTable,
    ) -> Result<Self, FeatureError> {
        if titles.dim() != displays.dim() {
            return Err(FeatureError::DimensionMismatch {
                titles: titles.dim(),
                displays: displays.dim(),
            });
        }
        let mut m = Self {
            embed_dim: titles.dim(),
            titles: SparseRows::new(),
            displays: SparseRows::new(),
            row_group: Vec::new(),
            row_display: Vec::new(),
            row_slot: Vec::new(),
            row_similarity: Vec::new(),
            labels: Vec::new(),
            groups: Vec::with_capacity(pools.len()),
        };
        let mut display_ids: HashMap<&str, u32> = HashMap::new();
        for (g, pool) in pools.iter().enumerate() {
            let title = target_titles
                .get(pool.target_oid.as_str())
                .ok_or_else(|| FeatureError::MissingEmbedding(format!("title of {}", pool.target_oid)))?;
            m.titles.push_dense(lookup(titles, title)?.values());
            m.groups.push(FeatureGroup {
                oid: pool.target_oid.clone(),
                start: m.labels.len(),
                len: pool.entries.len(),
            });
            for e in &pool.entries {
                let key = display_key(&e.display);
                let id = match display_ids.get(key) {
                    Some(id) => *id,
                    None => {
                        m.displays.push_dense(lookup(displays, key)?.values());
                        let id = display_ids.len() as u32;
                        display_ids.insert(key, id);
                        id
                    }
                };
                m.row_group.push(g as u32);
                m.row_display.push(id);
                m.row_slot.push(system_slot(&e.system) as u8);
                m.row_similarity.push(e.similarity);
                m.labels.push(e.label);
            }
        }
        Ok(m)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Full feature width, `2d + 9`.
    pub fn dim(&self) -> usize {
        feature_dim(self.embed_dim)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn groups(&self) -> &[FeatureGroup] {
        &self.groups
    }

    pub fn similarity(&self, row: usize) -> f64 {
        self.row_similarity[row]
    }

    /// Call `f(column, value)` for every nonzero of `row`, in column order.
    #[inline]
    pub fn for_each_nonzero(&self, row: usize, mut f: impl FnMut(usize, f64)) {
        let d = self.embed_dim;
        let (ti, tv) = self.titles.row(self.row_group[row] as usize);
        for (i, v) in ti.iter().zip(tv) {
            f(*i as usize, *v);
        }
        let (di, dv) = self.displays.row(self.row_display[row] as usize);
        for (i, v) in di.iter().zip(dv) {
            f(d + *i as usize, *v);
        }
        f(2 * d + self.row_slot[row] as usize, 1.0);
        let s = self.row_similarity[row];
        if s != 0.0 {
            f(2 * d + SYSTEM_SLOTS.len(), s);
        }
    }

    pub fn dense_row(&self, row: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.for_each_nonzero(row, |i, v| x[i] = v);
        x
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let mut w = PayloadWriter::new();
        self.titles.write(&mut w)?;
        self.displays.write(&mut w)?;
        w.put_u32s(&self.row_group);
        w.put_u32s(&self.row_display);
        w.put_u8s(&self.row_slot);
        w.put_f64s(&self.row_similarity)?;
        w.put_u8s(&self.labels);
        let meta = json!({
            "embed_dim": self.embed_dim,
            "feature_dim": self.dim(),
            "rows": self.len(),
            "positives": self.labels.iter().filter(|l| **l == 1).count(),
            "groups": self.groups,
        });
        write_artifact(path, ArtifactKind::FeatureMatrix, meta, &w.finish())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let art = read_artifact(path, ArtifactKind::FeatureMatrix)?;
        let meta = &art.header.metadata;
        let malformed = |m: &str| FeatureError::Malformed(m.to_string());
        let embed_dim = meta["embed_dim"].as_u64().ok_or_else(|| malformed("missing embed_dim"))? as usize;
        let n = meta["rows"].as_u64().ok_or_else(|| malformed("missing rows"))? as usize;
        let groups: Vec<FeatureGroup> =
            serde_json::from_value(meta["groups"].clone()).map_err(|_| malformed("missing groups"))?;
        let mut r = PayloadReader::new(&art.payload);
        let titles = SparseRows::read(&mut r)?;
        let displays = SparseRows::read(&mut r)?;
        let m = Self {
            embed_dim,
            titles,
            displays,
            row_group: r.u32s(n)?,
            row_display: r.u32s(n)?,
            row_slot: r.u8s(n)?,
            row_similarity: r.f64s(n)?,
            labels: r.u8s(n)?,
            groups,
        };
        r.finish()?;
        let bad_ref = m.row_group.iter().any(|g| *g as usize >= m.titles.len())
            || m.row_display.iter().any(|d| *d as usize >= m.displays.len())
            || m.row_slot.iter().any(|s| *s as usize >= SYSTEM_SLOTS.len())
            || m.groups.iter().map(|g| g.len).sum::<usize>() != n;
        if bad_ref {
            return Err(malformed("row references out of range"));
        }
        Ok(m)
    }

    /// Row map sidecar written next to the artifact: `<path>.rows.csv`.
    pub fn rows_sidecar_path(path: &Path) -> PathBuf {
        PathBuf::from(format!("{}.rows.csv", path.display()))
    }

    pub fn write_row_map(&self, path: &Path, pools: &[CandidatePool]) -> Result<(), FeatureError> {
        let mut rows = Vec::with_capacity(self.len());
        let mut i = 0usize;
        for p in pools {
            for e in &p.entries {
                rows.push(vec![i.to_string(), p.target_oid.clone(), e.code.clone(), e.system.clone(), e.label.to_string()]);
                i += 1;
            }
        }
        crate::corpus::write_csv_rows(path, &["row", "oid", "code", "system", "label"], &rows).map_err(|e| {
            FeatureError::Io {
                path: path.display().to_string(),
                source: e,
            }
        })
    }
}
