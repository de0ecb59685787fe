//! Pair-level and value-set-level metrics, external prediction scoring and
//! stratified reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_system_uri, CodeKey, ValueSet};
use crate::pool::CandidatePool;
use crate::split::{publisher_bin, SplitManifest};

/// Upper bounds of the true-size bins; the last bin is open.
pub const SIZE_BINS: [(usize, usize, &str); 5] = [
    (1, 5, "1-5"),
    (6, 15, "6-15"),
    (16, 50, "16-50"),
    (51, 150, "51-150"),
    (151, usize::MAX, ">150"),
];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels must contain at least one positive and one negative")]
    DegenerateLabels,
    #[error("nothing to aggregate")]
    EmptyInput,
    #[error("{0} scores but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("value set {0} is missing from the split manifest")]
    MissingManifestRow(String),
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

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    Ok(())
}

/// Area under the ROC curve via the Mann–Whitney statistic with average
/// ranks for ties.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|y| **y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps tied average ranks integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j share the average (i+1+j)/2
        let avg2 = (i + 1 + j) as u128;
        let group_pos = idx[i..j].iter().filter(|k| labels[**k] == 1).count() as u128;
        rank_sum2 += avg2 * group_pos;
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Step average precision: rank by score descending (ties keep input
/// order) and average the precision at each positive.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|y| **y == 1).count();
    if pos == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

/// Set-level scores of a predicted code list against the true codes.
pub fn prf_from_sets(predicted: &HashSet<CodeKey>, truth: &HashSet<CodeKey>) -> Prf {
    let tp = predicted.intersection(truth).count();
    Prf::from_counts(tp, predicted.len() - tp, truth.len() - tp)
}

/// Set-level scores of per-entry decisions over a pool. Target codes missing
/// from the pool count as false negatives.
pub fn value_set_prf(pool: &CandidatePool, decisions: &[bool]) -> Prf {
    assert_eq!(pool.entries.len(), decisions.len());
    let (mut tp, mut fp) = (0, 0);
    for (e, d) in pool.entries.iter().zip(decisions) {
        if *d {
            if e.label == 1 {
                tp += 1
            } else {
                fp += 1
            }
        }
    }
    Prf::from_counts(tp, fp, pool.target_size - tp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Sample standard deviation of per-set F1 (n − 1 denominator) over √n;
    /// 0 when n = 1.
    pub se_f1: f64,
    pub n: usize,
}

pub fn macro_aggregate(per_set: &[Prf]) -> Result<LevelMetrics, EvalError> {
    if per_set.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = per_set.len() as f64;
    let mean = |f: fn(&Prf) -> f64| per_set.iter().map(f).sum::<f64>() / n;
    let f1 = mean(|p| p.f1);
    let se_f1 = if per_set.len() < 2 {
        0.0
    } else {
        let var = per_set.iter().map(|p| (p.f1 - f1).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    Ok(LevelMetrics {
        precision: mean(|p| p.precision),
        recall: mean(|p| p.recall),
        f1,
        se_f1,
        n: per_set.len(),
    })
}

/// Predict every pool entry positive.
pub fn retrieval_only_baseline(pools: &[CandidatePool]) -> Vec<Vec<bool>> {
    pools.iter().map(|p| vec![true; p.entries.len()]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub auroc: f64,
    pub average_precision: f64,
    /// Precision of the thresholded decisions over all pairs.
    pub precision: f64,
    pub n_pairs: usize,
    pub positive_rate: f64,
}

pub fn pair_metrics(scores: &[f64], labels: &[u8], decisions: &[bool]) -> Result<PairMetrics, EvalError> {
    check_lengths(scores, labels)?;
    let predicted = decisions.iter().filter(|d| **d).count();
    let tp = decisions.iter().zip(labels).filter(|(d, y)| **d && **y == 1).count();
    let pos = labels.iter().filter(|y| **y == 1).count();
    Ok(PairMetrics {
        auroc: auroc(scores, labels)?,
        average_precision: average_precision(scores, labels)?,
        precision: if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 },
        n_pairs: labels.len(),
        positive_rate: pos as f64 / labels.len() as f64,
    })
}

/// One evaluated value set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetResult {
    pub oid: String,
    pub prf: Prf,
    pub true_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pair_level: Option<PairMetrics>,
    pub value_set_level: LevelMetrics,
    pub hallucination_rate: Option<f64>,
    /// family ("vs_type", "size", "publisher_bin") → stratum → metrics
    pub strata: BTreeMap<String, BTreeMap<String, LevelMetrics>>,
    /// Macro precision over sets whose pool holds every true code.
    pub rr1_precision: Option<f64>,
    pub rr1_n: usize,
}

pub fn size_bin(size: usize) -> &'static str {
    SIZE_BINS.iter().find(|(lo, hi, _)| (*lo..=*hi).contains(&size)).map(|b| b.2).unwrap_or("0")
}

pub type Strata = BTreeMap<String, BTreeMap<String, LevelMetrics>>;

/// Macro metrics by value-set type, true-size bin and publisher bin, plus
/// the precision over the RR@K = 1 subset.
pub fn stratified_report(
    results: &[SetResult],
    manifest: &SplitManifest,
    publisher_threshold: usize,
) -> Result<(Strata, Option<f64>, usize), EvalError> {
    let rows = manifest.by_oid();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in &manifest.rows {
        *counts.entry(r.publisher.clone()).or_insert(0) += 1;
    }
    let mut groups: BTreeMap<(String, String), Vec<Prf>> = BTreeMap::new();
    let mut rr1 = Vec::new();
    for res in results {
        let row = rows.get(res.oid.as_str()).ok_or_else(|| EvalError::MissingManifestRow(res.oid.clone()))?;
        let keys = [
            ("vs_type", row.vs_type.to_string()),
            ("size", size_bin(res.true_size).to_string()),
            ("publisher_bin", publisher_bin(&row.publisher, &counts, publisher_threshold)),
        ];
        for (family, stratum) in keys {
            groups.entry((family.to_string(), stratum)).or_default().push(res.prf);
        }
        if row.rr_at_k >= 1.0 {
            rr1.push(res.prf.precision);
        }
    }
    let mut strata: Strata = BTreeMap::new();
    for ((family, stratum), prfs) in groups {
        strata.entry(family).or_default().insert(stratum, macro_aggregate(&prfs)?);
    }
    let rr1_precision = (!rr1.is_empty()).then(|| rr1.iter().sum::<f64>() / rr1.len() as f64);
    Ok((strata, rr1_precision, rr1.len()))
}

/// Report for per-entry decisions over pools (classifier or baseline).
pub fn evaluate_pools(
    pools: &[&CandidatePool],
    scores: &[Vec<f64>],
    decisions: &[Vec<bool>],
    manifest: &SplitManifest,
    publisher_threshold: usize,
) -> Result<EvalReport, EvalError> {
    let results: Vec<SetResult> = pools
        .iter()
        .zip(decisions)
        .map(|(p, d)| SetResult {
            oid: p.target_oid.clone(),
            prf: value_set_prf(p, d),
            true_size: p.target_size,
        })
        .collect();
    let flat_scores: Vec<f64> = scores.iter().flatten().copied().collect();
    let flat_labels: Vec<u8> = pools.iter().flat_map(|p| p.entries.iter().map(|e| e.label)).collect();
    let flat_dec: Vec<bool> = decisions.iter().flatten().copied().collect();
    let pair_level = match pair_metrics(&flat_scores, &flat_labels, &flat_dec) {
        Ok(m) => Some(m),
        Err(EvalError::DegenerateLabels) => None,
        Err(e) => return Err(e),
    };
    let per: Vec<Prf> = results.iter().map(|r| r.prf).collect();
    let (strata, rr1_precision, rr1_n) = stratified_report(&results, manifest, publisher_threshold)?;
    Ok(EvalReport {
        pair_level,
        value_set_level: macro_aggregate(&per)?,
        hallucination_rate: None,
        strata,
        rr1_precision,
        rr1_n,
    })
}

/// One value set's externally generated code list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub oid: String,
    pub predictions: Vec<PredictedCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedCode {
    pub code: String,
    pub system: String,
}

impl PredictionSet {
    /// Distinct `(code, system)` pairs after system normalization.
    pub fn keys(&self) -> HashSet<CodeKey> {
        self.predictions
            .iter()
            .map(|p| CodeKey::new(p.code.trim(), normalize_system_uri(p.system.trim())))
            .collect()
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionSet>, EvalError> {
    let io = |e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut ps: PredictionSet = serde_json::from_str(&line).map_err(|e| EvalError::BadLine {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        for p in &mut ps.predictions {
            p.system = normalize_system_uri(p.system.trim());
        }
        out.push(ps);
    }
    Ok(out)
}

/// Score generated code lists against `truth`. Sets without a prediction
/// score zero; predictions for unknown oids are reported and ignored. The
/// hallucination rate is the share of predicted pairs absent from
/// `universe`.
pub fn score_external_predictions(
    predictions: &[PredictionSet],
    truth: &[&ValueSet],
    universe: &HashSet<CodeKey>,
    manifest: &SplitManifest,
    publisher_threshold: usize,
) -> Result<EvalReport, EvalError> {
    let mut by_oid: HashMap<&str, HashSet<CodeKey>> = HashMap::new();
    let known: HashSet<&str> = truth.iter().map(|v| v.oid.as_str()).collect();
    for ps in predictions {
        if !known.contains(ps.oid.as_str()) {
            log::warn!("prediction for unknown value set {}; ignored", ps.oid);
            continue;
        }
        by_oid.entry(ps.oid.as_str()).or_default().extend(ps.keys());
    }
    let (mut total, mut absent) = (0usize, 0usize);
    for keys in by_oid.values() {
        total += keys.len();
        absent += keys.iter().filter(|k| !universe.contains(k)).count();
    }
    let empty = HashSet::new();
    let results: Vec<SetResult> = truth
        .iter()
        .map(|vs| SetResult {
            oid: vs.oid.clone(),
            prf: prf_from_sets(by_oid.get(vs.oid.as_str()).unwrap_or(&empty), &vs.code_keys()),
            true_size: vs.codes.len(),
        })
        .collect();
    let per: Vec<Prf> = results.iter().map(|r| r.prf).collect();
    let (strata, rr1_precision, rr1_n) = stratified_report(&results, manifest, publisher_threshold)?;
    Ok(EvalReport {
        pair_level: None,
        value_set_level: macro_aggregate(&per)?,
        hallucination_rate: Some(if total == 0 { 0.0 } else { absent as f64 / total as f64 }),
        strata,
        rr1_precision,
        rr1_n,
    })
}

/// Flat `family,stratum,n,precision,recall,f1,se_f1` rows for one report.
pub fn strata_rows(label: &str, report: &EvalReport) -> Vec<Vec<String>> {
    let mut rows = vec![level_row(label, "overall", "all", &report.value_set_level)];
    for (family, strata) in &report.strata {
        for (stratum, m) in strata {
            rows.push(level_row(label, family, stratum, m));
        }
    }
    rows
}

pub const STRATA_HEADER: [&str; 8] = ["method", "family", "stratum", "n", "precision", "recall", "f1", "se_f1"];

fn level_row(label: &str, family: &str, stratum: &str, m: &LevelMetrics) -> Vec<String> {
    vec![
        label.to_string(),
        family.to_string(),
        stratum.to_string(),
        m.n.to_string(),
        format!("{:.6}", m.precision),
        format!("{:.6}", m.recall),
        format!("{:.6}", m.f1),
        format!("{:.6}", m.se_f1),
    ]
}

pub fn write_strata_csv(path: &Path, rows: &[Vec<String>]) -> Result<(), EvalError> {
    crate::corpus::write_csv_rows(path, &STRATA_HEADER, rows).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
