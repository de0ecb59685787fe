//! Unit-norm string embeddings: a deterministic feature-hashing encoder,
//! file-backed tables, and deduplicated batch embedding.
//!
//! Table file format (UTF-8 text):
//!
//! ```text
//! dim=<d>
//! <byte length of key>:<base64 key>\t<v_1> <v_2> ... <v_d>
//! ...
//! ```

use std::fs::File;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use indexmap::IndexMap;
use thiserror::Error;

/// Default embedding width; with it the pair feature vector has 1545 entries.
pub const DEFAULT_DIM: usize = 768;
pub const MIN_HASH_DIM: usize = 8;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("bad table header: {0}")]
    BadHeader(String),
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("vector is zero or non-finite")]
    Degenerate,
    #[error("provider dimension {found} does not match table dimension {expected}")]
    ProviderDimension { expected: usize, found: usize },
    #[error("hash embedding dimension must be >= {MIN_HASH_DIM}, got {0}")]
    DimTooSmall(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A unit-L2-norm vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalize `values` to unit length.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::Degenerate);
        }
        let norm = l2(&values);
        if norm == 0.0 {
            return Err(EmbedError::Degenerate);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn feature_hash(feature: &str) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(feature.as_bytes());
    // finalizer so both the bucket (low bits) and the sign (top bit) are well mixed
    let mut z = h.finish();
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Signed feature-hashing embedding over lowercased word unigrams and
/// `#`-padded character trigrams. Text without features maps to `e_0`.
///
/// Panics if `dim < MIN_HASH_DIM`; use [`HashEmbedder::new`] for a checked
/// constructor.
pub fn hash_embed(text: &str, dim: usize) -> Embedding {
    assert!(dim >= MIN_HASH_DIM, "hash embedding dimension must be >= {MIN_HASH_DIM}");
    let lower = text.to_lowercase();
    let mut acc = vec![0.0f64; dim];
    let mut add = |feature: &str| {
        let h = feature_hash(feature);
        let idx = (h % dim as u64) as usize;
        acc[idx] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    };
    for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        add(&format!("w:{word}"));
        let padded: Vec<char> = std::iter::once('#').chain(word.chars()).chain(std::iter::once('#')).collect();
        for tri in padded.windows(3) {
            let t: String = tri.iter().collect();
            add(&format!("c:{t}"));
        }
    }
    Embedding::normalized(acc).unwrap_or_else(|_| {
        let mut e0 = vec![0.0; dim];
        e0[0] = 1.0;
        Embedding(e0)
    })
}

/// Source of embeddings for strings.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;
}

#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim < MIN_HASH_DIM {
            return Err(EmbedError::DimTooSmall(dim));
        }
        Ok(Self { dim })
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        Ok(hash_embed(text, self.dim))
    }
}

/// String → embedding map with a shared dimension. Iteration follows
/// insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: IndexMap<String, Embedding>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: IndexMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Result<&Embedding, EmbedError> {
        self.entries
            .get(key)
            .ok_or_else(|| EmbedError::MissingEmbedding(key.to_string()))
    }

    /// Insert an embedding; returns `false` (and leaves the table unchanged)
    /// when the key already exists.
    pub fn insert(&mut self, key: String, emb: Embedding) -> Result<bool, EmbedError> {
        if emb.dim() != self.dim {
            return Err(EmbedError::ProviderDimension {
                expected: self.dim,
                found: emb.dim(),
            });
        }
        if self.entries.contains_key(&key) {
            return Ok(false);
        }
        self.entries.insert(key, emb);
        Ok(true)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Embedding)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let io = |e| EmbedError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut buf: Vec<u8> = Vec::new();
        {
            let mut w = BufWriter::new(&mut buf);
            writeln!(w, "dim={}", self.dim).map_err(io)?;
            for (k, v) in &self.entries {
                write!(w, "{}:{}\t", k.len(), B64.encode(k.as_bytes())).map_err(io)?;
                for (i, x) in v.values().iter().enumerate() {
                    if i > 0 {
                        w.write_all(b" ").map_err(io)?;
                    }
                    write!(w, "{x}").map_err(io)?;
                }
                w.write_all(b"\n").map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        crate::persistence::write_atomic(path, &buf).map_err(io)
    }
}

/// A file-backed table acts as a provider; unknown strings are a hard error.
impl EmbeddingProvider for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        self.get(text).cloned()
    }
}

fn parse_record(line: &str, lineno: usize, dim: usize) -> Result<(String, Embedding), EmbedError> {
    let bad = |m: &str| EmbedError::BadRecord {
        line: lineno,
        message: m.to_string(),
    };
    let (key_part, vals) = line.split_once('\t').ok_or_else(|| bad("missing TAB separator"))?;
    let (len_s, b64) = key_part.split_once(':').ok_or_else(|| bad("missing length prefix"))?;
    let len: usize = len_s.parse().map_err(|_| bad("length prefix is not an integer"))?;
    let bytes = B64.decode(b64).map_err(|_| bad("key is not valid base64"))?;
    if bytes.len() != len {
        return Err(bad("key length does not match prefix"));
    }
    let key = String::from_utf8(bytes).map_err(|_| bad("key is not UTF-8"))?;
    let values: Vec<f64> = vals
        .split_ascii_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| bad("value is not a number"))?;
    if values.len() != dim {
        return Err(EmbedError::DimensionMismatch {
            line: lineno,
            expected: dim,
            found: values.len(),
        });
    }
    let norm = l2(&values);
    let emb = if (norm - 1.0).abs() > NORM_TOLERANCE {
        log::warn!("line {lineno}: re-normalizing {key:?} (norm {norm})");
        Embedding::normalized(values).map_err(|_| bad("zero or non-finite vector"))?
    } else {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value"));
        }
        Embedding(values)
    };
    Ok((key, emb))
}

pub fn load_embedding_table(path: &Path) -> Result<EmbeddingTable, EmbedError> {
    let io = |e| EmbedError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut lines = BufReader::new(File::open(path).map_err(io)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| EmbedError::BadHeader("empty file".into()))?
        .map_err(io)?;
    let dim: usize = header
        .trim()
        .strip_prefix("dim=")
        .and_then(|d| d.parse().ok())
        .filter(|d| *d > 0)
        .ok_or_else(|| EmbedError::BadHeader(header.clone()))?;
    let mut table = EmbeddingTable::new(dim);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io)?;
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let (key, emb) = parse_record(&line, lineno, dim)?;
        if !table.insert(key.clone(), emb)? {
            return Err(EmbedError::DuplicateKey { line: lineno, key });
        }
    }
    Ok(table)
}

/// Embed each distinct string once. The provider is called exactly once per
/// unique string, in first-occurrence order.
pub fn embed_unique_strings<'a, I, P>(strings: I, provider: &P) -> Result<EmbeddingTable, EmbedError>
where
    I: IntoIterator<Item = &'a str>,
    P: EmbeddingProvider + ?Sized,
{
    let mut table = EmbeddingTable::new(provider.dim());
    for s in strings {
        if table.contains(s) {
            continue;
        }
        let emb = provider.embed(s)?;
        table.insert(s.to_string(), emb)?;
    }
    Ok(table)
}
