use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vscomplete_core::corpus::{
    corpus_stats, filter_corpus, generate_synthetic_corpus, ingest_fhir_dir, read_corpus, write_corpus, CodeKey,
    SynthConfig, ValueSet,
};
use vscomplete_core::embed::{embed_unique_strings, load_embedding_table, EmbeddingProvider, HashEmbedder};
use vscomplete_core::eval::{
    evaluate_pools, read_predictions, retrieval_only_baseline, score_external_predictions, strata_rows,
    write_strata_csv, EvalReport, PredictedCode, PredictionSet,
};
use vscomplete_core::features::{display_key, FeatureMatrix};
use vscomplete_core::index::{build_index, VectorIndex};
use vscomplete_core::model::{init_model, predict, train, tune_threshold, Checkpoint, Dataset, Inputs, TrainConfig};
use vscomplete_core::pool::{build_all_pools, pool_positive_rate, read_pools, write_pools, CandidatePool};
use vscomplete_core::split::{assign_splits, Split, SplitConfig, SplitManifest};

use crate::config::{ArtifactPaths, PipelineConfig};

pub fn ingest(input: &Path, out: &Path) -> Result<usize> {
    let sets = if input.is_dir() {
        let (sets, skipped) = ingest_fhir_dir(input)?;
        if skipped > 0 {
            log::warn!("skipped {skipped} unreadable FHIR documents");
        }
        sets
    } else {
        read_corpus(input)?
    };
    let before = sets.len();
    let sets = filter_corpus(sets);
    log::info!("ingested {} value sets ({} dropped below the size floor)", sets.len(), before - sets.len());
    write_corpus(out, &sets)?;
    Ok(sets.len())
}

pub fn gen_synth(config: &SynthConfig, out: &Path) -> Result<usize> {
    let sets = generate_synthetic_corpus(config)?;
    let before = sets.len();
    let sets = filter_corpus(sets);
    log::info!("generated {before} synthetic value sets, {} kept after the size floor", sets.len());
    write_corpus(out, &sets)?;
    Ok(sets.len())
}

pub fn stats(corpus: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let s = corpus_stats(&read_corpus(corpus)?)?;
    write_json(out, &s)?;
    let mut written = vec![out.to_path_buf()];
    written.extend(s.write_csv_tables(out).with_context(|| format!("writing tables next to {}", out.display()))?);
    Ok(written)
}

/// Embed every title and every display string of the corpus.
pub fn embed(
    corpus: &Path,
    title_provider: &dyn EmbeddingProvider,
    display_provider: &dyn EmbeddingProvider,
    titles_out: &Path,
    displays_out: &Path,
) -> Result<()> {
    let sets = read_corpus(corpus)?;
    let titles = embed_unique_strings(sets.iter().map(|s| s.title.as_str()), title_provider)?;
    let displays = embed_unique_strings(
        sets.iter().flat_map(|s| s.codes.iter().map(|c| display_key(&c.display))),
        display_provider,
    )?;
    log::info!("embedded {} titles and {} displays (d={})", titles.len(), displays.len(), titles.dim());
    titles.save(titles_out)?;
    displays.save(displays_out)?;
    Ok(())
}

pub fn provider_for(dim: usize, table: Option<&Path>) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match table {
        Some(p) => Box::new(load_embedding_table(p)?),
        None => Box::new(HashEmbedder::new(dim)?),
    })
}

pub fn index(corpus: &Path, titles: &Path, out: &Path) -> Result<()> {
    let idx = build_index(&load_embedding_table(titles)?, &read_corpus(corpus)?)?;
    log::info!("indexed {} value sets", idx.len());
    idx.save(out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub pools: usize,
    pub pairs: usize,
    pub mean_rr_at_k: f64,
    pub pool_positive_rate: f64,
}

pub fn pool_stats(pools: &[&CandidatePool]) -> Result<PoolStats> {
    let owned: Vec<CandidatePool> = pools.iter().map(|p| (*p).clone()).collect();
    Ok(PoolStats {
        pools: pools.len(),
        pairs: pools.iter().map(|p| p.entries.len()).sum(),
        mean_rr_at_k: pools.iter().map(|p| p.rr_at_k).sum::<f64>() / pools.len().max(1) as f64,
        pool_positive_rate: pool_positive_rate(&owned)?,
    })
}

pub fn pool(corpus: &Path, index: &Path, titles: &Path, k: usize, out: &Path) -> Result<PoolStats> {
    let sets = read_corpus(corpus)?;
    let pools = build_all_pools(&sets, &VectorIndex::load(index)?, &load_embedding_table(titles)?, k)?;
    let s = pool_stats(&pools.iter().collect::<Vec<_>>())?;
    log::info!(
        "built {} pools, {} pairs, mean RR@{k} {:.4}, positive rate {:.4}",
        s.pools,
        s.pairs,
        s.mean_rr_at_k,
        s.pool_positive_rate
    );
    write_pools(out, &pools)?;
    Ok(s)
}

pub fn split(corpus: &Path, pools: &Path, config: &SplitConfig, out: &Path) -> Result<SplitManifest> {
    let sets = read_corpus(corpus)?;
    let rr: HashMap<String, f64> = read_pools(pools)?.into_iter().map(|p| (p.target_oid, p.rr_at_k)).collect();
    let manifest = assign_splits(&sets, &rr, config)?;
    for s in Split::ALL {
        log::info!("{s}: {} value sets", manifest.oids_in(s).len());
    }
    manifest.write_csv(out)?;
    Ok(manifest)
}

pub fn features(corpus: &Path, pools: &Path, titles: &Path, displays: &Path, out: &Path) -> Result<usize> {
    let sets = read_corpus(corpus)?;
    let pools = read_pools(pools)?;
    let target_titles: HashMap<&str, &str> = sets.iter().map(|s| (s.oid.as_str(), s.title.as_str())).collect();
    let m = FeatureMatrix::assemble(
        &pools,
        &target_titles,
        &load_embedding_table(titles)?,
        &load_embedding_table(displays)?,
    )?;
    log::info!("assembled {} feature rows of width {}", m.len(), m.dim());
    m.save(out)?;
    m.write_row_map(&FeatureMatrix::rows_sidecar_path(out), &pools)?;
    Ok(m.len())
}

fn rows_in(m: &FeatureMatrix, manifest: &SplitManifest, split: Split) -> Vec<usize> {
    let oids = manifest.oids_in(split);
    m.groups()
        .iter()
        .filter(|g| oids.contains(g.oid.as_str()))
        .flat_map(|g| g.start..g.start + g.len)
        .collect()
}

pub fn train_stage(features: &Path, manifest: &Path, hidden: &[usize], init_seed: u64, cfg: &TrainConfig, out: &Path) -> Result<Checkpoint> {
    let m = FeatureMatrix::load(features)?;
    let manifest = SplitManifest::read_csv(manifest)?;
    let train_rows = rows_in(&m, &manifest, Split::Train);
    let val_rows = rows_in(&m, &manifest, Split::Val);
    log::info!("training on {} pairs, validating on {}", train_rows.len(), val_rows.len());
    let mut dims = vec![m.dim()];
    dims.extend_from_slice(hidden);
    dims.push(1);
    let mut model = init_model(&dims, init_seed)?;
    let val = Dataset::from_matrix(&m, val_rows);
    let history = train(&mut model, &Dataset::from_matrix(&m, train_rows), &val, cfg)?;
    let probs = model.predict_proba(&val.inputs, &val.rows)?;
    let threshold = tune_threshold(&probs, &val.labels).context("tuning the decision threshold on validation pairs")?;
    log::info!("best epoch {}, threshold {threshold:.4}", history.best_epoch);
    let ckpt = Checkpoint {
        model,
        threshold,
        config: cfg.clone(),
        history: Some(history),
    };
    ckpt.save(out)?;
    Ok(ckpt)
}

/// Everything the eval stage reports, in a fixed field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub split_sizes: BTreeMap<String, usize>,
    pub test_retrieval: PoolStats,
    pub threshold: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub classifier: EvalReport,
    pub retrieval_only: EvalReport,
}

pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "test_predictions.jsonl";

pub fn eval_stage(
    features: &Path,
    pools: &Path,
    manifest: &Path,
    model: &Path,
    publisher_threshold: usize,
    out_dir: &Path,
) -> Result<BenchmarkReport> {
    let m = FeatureMatrix::load(features)?;
    let pools = read_pools(pools)?;
    let manifest = SplitManifest::read_csv(manifest)?;
    let ckpt = Checkpoint::load(model)?;
    if pools.len() != m.groups().len() || pools.iter().zip(m.groups()).any(|(p, g)| p.target_oid != g.oid || p.entries.len() != g.len) {
        bail!("feature matrix does not match the pools file");
    }
    let test_oids = manifest.oids_in(Split::Test);
    let test: Vec<usize> = (0..pools.len()).filter(|i| test_oids.contains(pools[*i].target_oid.as_str())).collect();
    if test.is_empty() {
        bail!("no test value sets in the manifest");
    }
    let test_pools: Vec<&CandidatePool> = test.iter().map(|i| &pools[*i]).collect();
    let rows: Vec<usize> = test.iter().flat_map(|i| m.groups()[*i].start..m.groups()[*i].start + m.groups()[*i].len).collect();
    let (probs, decisions) = predict(&ckpt.model, ckpt.threshold, &Inputs::Sparse(&m), &rows)?;

    let mut scores = Vec::with_capacity(test.len());
    let mut decided = Vec::with_capacity(test.len());
    let mut offset = 0;
    for p in &test_pools {
        let n = p.entries.len();
        scores.push(probs[offset..offset + n].to_vec());
        decided.push(decisions[offset..offset + n].to_vec());
        offset += n;
    }
    let classifier = evaluate_pools(&test_pools, &scores, &decided, &manifest, publisher_threshold)?;
    let owned: Vec<CandidatePool> = test_pools.iter().map(|p| (*p).clone()).collect();
    let sims: Vec<Vec<f64>> = test_pools.iter().map(|p| p.entries.iter().map(|e| e.similarity).collect()).collect();
    let baseline = evaluate_pools(&test_pools, &sims, &retrieval_only_baseline(&owned), &manifest, publisher_threshold)?;

    let history = ckpt.history.as_ref();
    let report = BenchmarkReport {
        split_sizes: Split::ALL.iter().map(|s| (s.to_string(), manifest.oids_in(*s).len())).collect(),
        test_retrieval: pool_stats(&test_pools)?,
        threshold: ckpt.threshold,
        best_epoch: history.map_or(0, |h| h.best_epoch),
        epochs_run: history.map_or(0, |h| h.epochs.len()),
        classifier,
        retrieval_only: baseline,
    };

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    write_report_tables(out_dir, &[("mlp", &report.classifier), ("retrieval_only", &report.retrieval_only)])?;
    let predictions: Vec<PredictionSet> = test_pools
        .iter()
        .zip(&decided)
        .map(|(p, d)| PredictionSet {
            oid: p.target_oid.clone(),
            predictions: p
                .entries
                .iter()
                .zip(d)
                .filter(|(_, keep)| **keep)
                .map(|(e, _)| PredictedCode {
                    code: e.code.clone(),
                    system: e.system.clone(),
                })
                .collect(),
        })
        .collect();
    write_jsonl(&out_dir.join(PREDICTIONS_FILE), &predictions)?;
    log::info!(
        "test macro F1: mlp {:.4}, retrieval-only {:.4}",
        report.classifier.value_set_level.f1,
        report.retrieval_only.value_set_level.f1
    );
    Ok(report)
}

/// One CSV per stratum family (plus the overall row) covering every method.
pub fn write_report_tables(out_dir: &Path, reports: &[(&str, &EvalReport)]) -> Result<Vec<PathBuf>> {
    let mut by_family: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for (label, r) in reports {
        for row in strata_rows(label, r) {
            let family = if row[1] == "overall" { "overall".to_string() } else { row[1].clone() };
            by_family.entry(family).or_default().push(row);
        }
    }
    let mut written = Vec::new();
    for (family, rows) in by_family {
        let path = out_dir.join(format!("strata_{family}.csv"));
        write_strata_csv(&path, &rows)?;
        written.push(path);
    }
    Ok(written)
}

/// Which value sets an external predictions file is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    All,
    Only(Split),
}

pub fn eval_predictions(
    predictions: &Path,
    corpus: &Path,
    manifest: &Path,
    subset: Subset,
    publisher_threshold: usize,
    out: &Path,
) -> Result<EvalReport> {
    let sets = read_corpus(corpus)?;
    let manifest = SplitManifest::read_csv(manifest)?;
    let preds = read_predictions(predictions)?;
    // every code the corpus knows; anything else is invented
    let universe: HashSet<CodeKey> = sets.iter().flat_map(|s| s.codes.iter().map(|c| c.key())).collect();
    let keep: Option<HashSet<&str>> = match subset {
        Subset::All => None,
        Subset::Only(s) => Some(manifest.oids_in(s)),
    };
    let truth: Vec<&ValueSet> = sets
        .iter()
        .filter(|s| keep.as_ref().map_or(true, |k| k.contains(s.oid.as_str())))
        .collect();
    if truth.is_empty() {
        bail!("no value sets to score");
    }
    let report = score_external_predictions(&preds, &truth, &universe, &manifest, publisher_threshold)?;
    write_json(out, &report)?;
    if let Some(dir) = out.parent() {
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("predictions");
        let rows = strata_rows(stem, &report);
        write_strata_csv(&dir.join(format!("{stem}_strata.csv")), &rows)?;
    }
    Ok(report)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    vscomplete_core::persistence::write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    vscomplete_core::persistence::write_atomic(path, &buf).with_context(|| format!("writing {}", path.display()))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

/// Hash of a directory's regular files, by name.
fn hash_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return hash_file(path);
    }
    let mut names: Vec<PathBuf> = std::fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        h.update(n.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(hash_file(&n)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Stamp {
    fingerprint: String,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Stamps(BTreeMap<String, Stamp>);

impl Stamps {
    fn load(path: &Path) -> Self {
        std::fs::read_to_string(path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    }
}

pub const STAGES: [&str; 8] = ["corpus", "embed", "index", "pool", "split", "features", "train", "eval"];

/// A failed stage and why.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub source: anyhow::Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {:#}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub value_sets: usize,
    pub k: usize,
    pub mean_rr_at_k: f64,
    pub pool_positive_rate: f64,
    pub mlp_macro_f1: f64,
    pub retrieval_only_macro_f1: f64,
    pub f1_gain: f64,
    pub pair_auroc: Option<f64>,
    pub pair_average_precision: Option<f64>,
    pub report: PathBuf,
}

pub struct RunOutcome {
    pub summary: RunSummary,
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
}

struct Runner<'a> {
    stamps: Stamps,
    stamps_path: &'a Path,
    upstream_ran: bool,
    ran: Vec<String>,
    skipped: Vec<String>,
}

impl Runner<'_> {
    /// Run `work` unless its inputs, settings and outputs match the last
    /// recorded run and nothing upstream ran.
    fn stage(
        &mut self,
        name: &str,
        settings: &impl Serialize,
        inputs: &[&Path],
        outputs: &[&Path],
        work: impl FnOnce() -> Result<()>,
    ) -> Result<(), StageError> {
        let fail = |source: anyhow::Error| StageError {
            stage: name.to_string(),
            source,
        };
        let fingerprint = (|| -> Result<String> {
            let mut h = Sha256::new();
            h.update(name.as_bytes());
            h.update(serde_json::to_vec(settings)?);
            for p in inputs {
                h.update(hash_path(p)?.as_bytes());
            }
            Ok(hex::encode(h.finalize()))
        })()
        .map_err(fail)?;
        let fresh = !self.upstream_ran
            && self.stamps.0.get(name).is_some_and(|s| {
                s.fingerprint == fingerprint
                    && outputs.iter().all(|o| {
                        o.exists() && s.outputs.get(&o.display().to_string()).is_some_and(|h| hash_path(o).ok().as_ref() == Some(h))
                    })
            });
        if fresh {
            log::info!("stage {name}: up to date");
            self.skipped.push(name.to_string());
            return Ok(());
        }
        log::info!("stage {name}: running");
        work().map_err(fail)?;
        let mut outs = BTreeMap::new();
        for o in outputs {
            outs.insert(o.display().to_string(), hash_path(o).map_err(fail)?);
        }
        self.stamps.0.insert(name.to_string(), Stamp { fingerprint, outputs: outs });
        write_json(self.stamps_path, &self.stamps.0).map_err(fail)?;
        self.upstream_ran = true;
        self.ran.push(name.to_string());
        Ok(())
    }
}

/// Execute every stage in order, skipping those already up to date.
pub fn run_all(c: &PipelineConfig) -> Result<RunOutcome, StageError> {
    let p = ArtifactPaths::under(&c.out_dir);
    std::fs::create_dir_all(&c.out_dir).map_err(|e| StageError {
        stage: "setup".into(),
        source: anyhow::Error::new(e).context(format!("creating {}", c.out_dir.display())),
    })?;
    let mut r = Runner {
        stamps: Stamps::load(&p.stamps),
        stamps_path: &p.stamps,
        upstream_ran: false,
        ran: Vec::new(),
        skipped: Vec::new(),
    };

    match &c.input {
        Some(input) => r.stage("ingest", &"ingest", &[input.as_path()], &[&p.corpus], || ingest(input, &p.corpus).map(drop))?,
        None => r.stage("gen-synth", &c.synth, &[], &[&p.corpus], || gen_synth(&c.synth, &p.corpus).map(drop))?,
    }
    let tables: Vec<&Path> = c.title_table.iter().chain(&c.display_table).map(PathBuf::as_path).collect();
    let mut embed_inputs = vec![p.corpus.as_path()];
    embed_inputs.extend(&tables);
    r.stage("embed", &c.dim, &embed_inputs, &[&p.titles, &p.displays], || {
        let titles = provider_for(c.dim, c.title_table.as_deref())?;
        let displays = provider_for(c.dim, c.display_table.as_deref())?;
        embed(&p.corpus, titles.as_ref(), displays.as_ref(), &p.titles, &p.displays)
    })?;
    r.stage("index", &(), &[&p.corpus, &p.titles], &[&p.index], || index(&p.corpus, &p.titles, &p.index))?;
    r.stage("pool", &c.k, &[&p.corpus, &p.index, &p.titles], &[&p.pools], || {
        pool(&p.corpus, &p.index, &p.titles, c.k, &p.pools).map(drop)
    })?;
    r.stage("split", &c.split, &[&p.corpus, &p.pools], &[&p.manifest], || {
        split(&p.corpus, &p.pools, &c.split, &p.manifest).map(drop)
    })?;
    let sidecar = FeatureMatrix::rows_sidecar_path(&p.features);
    r.stage(
        "features",
        &(),
        &[&p.corpus, &p.pools, &p.titles, &p.displays],
        &[&p.features, &sidecar],
        || features(&p.corpus, &p.pools, &p.titles, &p.displays, &p.features).map(drop),
    )?;
    r.stage(
        "train",
        &(&c.hidden, c.init_seed, &c.train),
        &[&p.features, &p.manifest],
        &[&p.model],
        || train_stage(&p.features, &p.manifest, &c.hidden, c.init_seed, &c.train, &p.model).map(drop),
    )?;
    r.stage(
        "eval",
        &c.split.publisher_threshold,
        &[&p.features, &p.pools, &p.manifest, &p.model],
        &[&p.reports],
        || eval_stage(&p.features, &p.pools, &p.manifest, &p.model, c.split.publisher_threshold, &p.reports).map(drop),
    )?;

    let report_path = p.reports.join(REPORT_FILE);
    let summary = (|| -> Result<RunSummary> {
        let report: BenchmarkReport = serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
        let corpus = read_corpus(&p.corpus)?;
        let all = read_pools(&p.pools)?;
        let stats = pool_stats(&all.iter().collect::<Vec<_>>())?;
        let summary = RunSummary {
            value_sets: corpus.len(),
            k: c.k,
            mean_rr_at_k: stats.mean_rr_at_k,
            pool_positive_rate: stats.pool_positive_rate,
            mlp_macro_f1: report.classifier.value_set_level.f1,
            retrieval_only_macro_f1: report.retrieval_only.value_set_level.f1,
            f1_gain: report.classifier.value_set_level.f1 - report.retrieval_only.value_set_level.f1,
            pair_auroc: report.classifier.pair_level.map(|m| m.auroc),
            pair_average_precision: report.classifier.pair_level.map(|m| m.average_precision),
            report: report_path.clone(),
        };
        write_json(&c.out_dir.join("summary.json"), &summary)?;
        Ok(summary)
    })()
    .map_err(|source| StageError {
        stage: "summary".into(),
        source,
    })?;
    Ok(RunOutcome {
        summary,
        ran: r.ran,
        skipped: r.skipped,
    })
}
