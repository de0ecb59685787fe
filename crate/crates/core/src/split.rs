//! Train/validation/test assignment with publisher holdout and stratification
//! on `(vs_type, publisher_bin)`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ValueSet, VsType};

pub const DEFAULT_PUBLISHER_THRESHOLD: usize = 50;
pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];
/// Strata smaller than this go entirely to train.
pub const MIN_STRATUM: usize = 3;
pub const OTHER_BIN: &str = "OTHER";

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("no rr_at_k for value set {0}")]
    MissingPool(String),
    #[error("manifest {path}: {message}")]
    BadManifest { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub oid: String,
    pub split: Split,
    pub rr_at_k: f64,
    pub vs_type: VsType,
    pub publisher: String,
}

/// Manifest rows in corpus order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitManifest {
    pub rows: Vec<ManifestRow>,
}

impl SplitManifest {
    pub fn get(&self, oid: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.oid == oid)
    }

    pub fn by_oid(&self) -> HashMap<&str, &ManifestRow> {
        self.rows.iter().map(|r| (r.oid.as_str(), r)).collect()
    }

    pub fn oids_in(&self, split: Split) -> HashSet<&str> {
        self.rows.iter().filter(|r| r.split == split).map(|r| r.oid.as_str()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SplitError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| bad(path, e))?;
        }
        let bytes = w.into_inner().map_err(|e| bad(path, e.into_error()))?;
        crate::persistence::write_atomic(path, &bytes).map_err(|e| SplitError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self, SplitError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| bad(path, e))?;
        let header = r.headers().map_err(|e| bad(path, e))?.clone();
        if header.iter().collect::<Vec<_>>() != ["oid", "split", "rr_at_k", "vs_type", "publisher"] {
            return Err(bad(path, "header must be oid,split,rr_at_k,vs_type,publisher"));
        }
        let rows: Vec<ManifestRow> = r.deserialize().collect::<Result<_, _>>().map_err(|e| bad(path, e))?;
        let mut seen = HashSet::new();
        for row in &rows {
            if !seen.insert(row.oid.as_str()) {
                return Err(bad(path, format!("oid {} appears twice", row.oid)));
            }
        }
        Ok(Self { rows })
    }
}

fn bad(path: &Path, e: impl fmt::Display) -> SplitError {
    SplitError::BadManifest {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// The publisher's own name when it has at least `threshold` sets, else
/// [`OTHER_BIN`].
pub fn publisher_bin(publisher: &str, counts: &HashMap<String, usize>, threshold: usize) -> String {
    if counts.get(publisher).copied().unwrap_or(0) >= threshold {
        publisher.to_string()
    } else {
        OTHER_BIN.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub held_out_publishers: Vec<String>,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub publisher_threshold: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            held_out_publishers: Vec::new(),
            ratios: DEFAULT_RATIOS,
            seed: 13,
            publisher_threshold: DEFAULT_PUBLISHER_THRESHOLD,
        }
    }
}

/// Largest-remainder apportionment of `n` items. Equal remainders (within
/// 1e-9) favour train, then val, then test.
pub fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * n as f64);
    let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
    let mut order = [0usize, 1, 2];
    let rem = |i: usize| quotas[i] - counts[i] as f64;
    order.sort_by(|&a, &b| {
        let (ra, rb) = (rem(a), rem(b));
        if (ra - rb).abs() <= 1e-9 {
            a.cmp(&b)
        } else {
            rb.partial_cmp(&ra).unwrap()
        }
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub fn assign_splits(
    sets: &[ValueSet],
    rr_at_k: &HashMap<String, f64>,
    config: &SplitConfig,
) -> Result<SplitManifest, SplitError> {
    let r = config.ratios;
    if r.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SplitError::InvalidRatios(r));
    }
    let held: HashSet<&str> = config.held_out_publishers.iter().map(String::as_str).collect();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for vs in sets.iter().filter(|s| !held.contains(s.publisher.as_str())) {
        *counts.entry(vs.publisher.clone()).or_insert(0) += 1;
    }

    let mut split = vec![Split::Test; sets.len()];
    let mut strata: BTreeMap<(VsType, String), Vec<usize>> = BTreeMap::new();
    for (i, vs) in sets.iter().enumerate() {
        if !held.contains(vs.publisher.as_str()) {
            let bin = publisher_bin(&vs.publisher, &counts, config.publisher_threshold);
            strata.entry((vs.vs_type, bin)).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for members in strata.values_mut() {
        if members.len() < MIN_STRATUM {
            members.iter().for_each(|&i| split[i] = Split::Train);
            continue;
        }
        members.shuffle(&mut rng);
        let [n_train, n_val, _] = largest_remainder(members.len(), r);
        for (j, &i) in members.iter().enumerate() {
            split[i] = if j < n_train {
                Split::Train
            } else if j < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }

    let rows = sets
        .iter()
        .zip(split)
        .map(|(vs, split)| {
            Ok(ManifestRow {
                oid: vs.oid.clone(),
                split,
                rr_at_k: *rr_at_k.get(&vs.oid).ok_or_else(|| SplitError::MissingPool(vs.oid.clone()))?,
                vs_type: vs.vs_type,
                publisher: vs.publisher.clone(),
            })
        })
        .collect::<Result<_, SplitError>>()?;
    Ok(SplitManifest { rows })
}
