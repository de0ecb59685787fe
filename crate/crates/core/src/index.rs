//! Exact inner-product search over unit-norm title embeddings.

use std::collections::HashSet;
use std::path::Path;

use serde_json::json;
use thiserror::Error;

use crate::corpus::ValueSet;
use crate::embed::{dot, Embedding, EmbeddingTable};
use crate::persistence::{read_artifact, write_artifact, ArtifactError, ArtifactKind, PayloadReader, PayloadWriter};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("no title embedding for value set {0}")]
    MissingTitleEmbedding(String),
    #[error("query has dimension {found}, index has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate oid {0} in index")]
    DuplicateOid(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("malformed index artifact: {0}")]
    Malformed(String),
}

/// Row-major `ids.len() x dim` matrix of unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    matrix: Vec<f64>,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            matrix: Vec::new(),
        }
    }

    pub fn push(&mut self, id: String, emb: &Embedding) -> Result<(), IndexError> {
        if emb.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                found: emb.dim(),
            });
        }
        if self.ids.contains(&id) {
            return Err(IndexError::DuplicateOid(id));
        }
        self.ids.push(id);
        self.matrix.extend_from_slice(emb.values());
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut w = PayloadWriter::new();
        w.put_f64s(&self.matrix)?;
        let meta = json!({ "dim": self.dim, "rows": self.ids.len(), "ids": self.ids });
        write_artifact(path, ArtifactKind::VectorIndex, meta, &w.finish())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let art = read_artifact(path, ArtifactKind::VectorIndex)?;
        let meta = &art.header.metadata;
        let malformed = |m: &str| IndexError::Malformed(m.to_string());
        let dim = meta["dim"].as_u64().ok_or_else(|| malformed("missing dim"))? as usize;
        let ids: Vec<String> =
            serde_json::from_value(meta["ids"].clone()).map_err(|_| malformed("missing ids"))?;
        let mut r = PayloadReader::new(&art.payload);
        let matrix = r.f64s(ids.len() * dim)?;
        r.finish()?;
        Ok(Self { dim, ids, matrix })
    }
}

/// Index every value set's title, in corpus order.
pub fn build_index(titles: &EmbeddingTable, sets: &[ValueSet]) -> Result<VectorIndex, IndexError> {
    let mut index = VectorIndex::new(titles.dim());
    index.ids.reserve(sets.len());
    index.matrix.reserve(sets.len() * titles.dim());
    let mut seen = HashSet::new();
    for vs in sets {
        let emb = titles
            .get(&vs.title)
            .map_err(|_| IndexError::MissingTitleEmbedding(vs.oid.clone()))?;
        if !seen.insert(vs.oid.as_str()) {
            return Err(IndexError::DuplicateOid(vs.oid.clone()));
        }
        index.ids.push(vs.oid.clone());
        index.matrix.extend_from_slice(emb.values());
    }
    Ok(index)
}

/// The `k` rows with the largest inner product with `query`, best first.
/// Equal scores keep insertion order. `exclude` is never returned.
pub fn query_top_k(
    index: &VectorIndex,
    query: &[f64],
    k: usize,
    exclude: Option<&str>,
) -> Result<Vec<(String, f64)>, IndexError> {
    Ok(query_top_k_rows(index, query, k, exclude)?
        .into_iter()
        .map(|(i, s)| (index.ids[i].clone(), s))
        .collect())
}

/// Same as [`query_top_k`] but returns row numbers.
pub fn query_top_k_rows(
    index: &VectorIndex,
    query: &[f64],
    k: usize,
    exclude: Option<&str>,
) -> Result<Vec<(usize, f64)>, IndexError> {
    if query.len() != index.dim {
        return Err(IndexError::DimensionMismatch {
            expected: index.dim,
            found: query.len(),
        });
    }
    if k == 0 {
        return Err(IndexError::ZeroK);
    }
    // kept sorted by (score desc, row asc); rows arrive in ascending order so a
    // new row only displaces strictly smaller scores
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
    for (i, id) in index.ids.iter().enumerate() {
        if exclude == Some(id.as_str()) {
            continue;
        }
        let s = dot(index.row(i), query);
        if best.len() == k && s <= best[k - 1].1 {
            continue;
        }
        let pos = best.partition_point(|&(_, b)| b >= s);
        best.insert(pos, (i, s));
        best.truncate(k);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_set;
    use proptest::prelude::*;

    fn index_of(rows: &[Vec<f64>]) -> VectorIndex {
        let mut idx = VectorIndex::new(rows[0].len());
        for (i, r) in rows.iter().enumerate() {
            idx.push(format!("id{i}"), &Embedding::normalized(r.clone()).unwrap()).unwrap();
        }
        idx
    }

    #[test]
    fn self_exclusion_returns_second_row() {
        let idx = index_of(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let got = query_top_k(&idx, &[1.0, 0.0], 1, Some("id0")).unwrap();
        assert_eq!(got, vec![("id1".to_string(), 0.0)]);
    }

    #[test]
    fn query_equal_to_row_ranks_it_first() {
        let idx = index_of(&[vec![1.0, 2.0, 0.0], vec![0.0, 1.0, 1.0], vec![3.0, 0.0, 1.0]]);
        let q = idx.row(1).to_vec();
        let got = query_top_k(&idx, &q, 2, None).unwrap();
        assert_eq!(got[0].0, "id1");
        assert!((got[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_keep_insertion_order_and_k_caps() {
        let idx = index_of(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let got = query_top_k(&idx, &[1.0, 0.0], 10, Some("id1")).unwrap();
        let ids: Vec<_> = got.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids, ["id0", "id2"]);
    }

    #[test]
    fn errors() {
        let idx = index_of(&[vec![1.0, 0.0]]);
        assert!(matches!(
            query_top_k(&idx, &[1.0, 0.0, 0.0], 1, None),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert!(matches!(query_top_k(&idx, &[1.0, 0.0], 0, None), Err(IndexError::ZeroK)));
    }

    #[test]
    fn build_from_corpus_and_missing_title() {
        let sets = vec![test_set("a", 3), test_set("b", 3), test_set("c", 3)];
        let mut table = EmbeddingTable::new(8);
        for s in &sets {
            table.insert(s.title.clone(), crate::embed::hash_embed(&s.title, 8)).unwrap();
        }
        let idx = build_index(&table, &sets).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.ids(), ["a", "b", "c"]);

        let mut extra = sets.clone();
        extra.push(ValueSet {
            title: "never embedded".into(),
            ..test_set("d", 3)
        });
        assert!(matches!(
            build_index(&table, &extra),
            Err(IndexError::MissingTitleEmbedding(oid)) if oid == "d"
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let idx = index_of(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let p = dir.path().join("index.bin");
        idx.save(&p).unwrap();
        assert_eq!(VectorIndex::load(&p).unwrap(), idx);
    }

    fn brute_force(idx: &VectorIndex, q: &[f64], k: usize, exclude: Option<&str>) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = (0..idx.len())
            .filter(|&i| Some(idx.ids()[i].as_str()) != exclude)
            .map(|i| (i, idx.row(i).iter().zip(q).map(|(a, b)| a * b).sum()))
            .collect();
        // stable sort keeps insertion order among ties
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        all.truncate(k);
        all
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            rows in proptest::collection::vec(proptest::collection::vec(-3i8..=3, 6), 50),
            q in proptest::collection::vec(-3i8..=3, 6),
            k in 1usize..15,
            ex in 0usize..60,
        ) {
            // small integer grids produce plenty of exact ties
            let rows: Vec<Vec<f64>> = rows
                .into_iter()
                .map(|r| {
                    let mut r: Vec<f64> = r.into_iter().map(f64::from).collect();
                    if r.iter().all(|v| *v == 0.0) { r[0] = 1.0; }
                    r
                })
                .collect();
            let idx = index_of(&rows);
            let q: Vec<f64> = q.into_iter().map(f64::from).collect();
            let exclude = format!("id{ex}");
            let got = query_top_k_rows(&idx, &q, k, Some(&exclude)).unwrap();
            prop_assert_eq!(got, brute_force(&idx, &q, k, Some(&exclude)));
        }
    }
}
