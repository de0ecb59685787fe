use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use vscomplete_core::corpus::SynthConfig;
use vscomplete_core::embed::{DEFAULT_DIM, MIN_HASH_DIM};
use vscomplete_core::model::TrainConfig;
use vscomplete_core::split::SplitConfig;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_HIDDEN: [usize; 3] = [512, 256, 64];
pub const DEFAULT_INIT_SEED: u64 = 11;

/// Everything `run-all` needs. Artifact paths default to fixed names under
/// `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// FHIR directory or corpus JSONL; when absent a synthetic corpus is
    /// generated from `synth`.
    pub input: Option<PathBuf>,
    pub synth: SynthConfig,
    pub k: usize,
    pub dim: usize,
    /// Precomputed embedding tables used instead of the hash embedder.
    pub title_table: Option<PathBuf>,
    pub display_table: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub init_seed: u64,
    pub split: SplitConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("vscomplete-run"),
            input: None,
            synth: SynthConfig::default(),
            k: DEFAULT_K,
            dim: DEFAULT_DIM,
            title_table: None,
            display_table: None,
            hidden: DEFAULT_HIDDEN.to_vec(),
            init_seed: DEFAULT_INIT_SEED,
            split: SplitConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// All problems found in a config, reported together.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} config error(s): {}", self.0.len(), self.0.join("; "))
    }
}

impl std::error::Error for ConfigErrors {}

fn field<T: DeserializeOwned>(obj: &serde_json::Map<String, Value>, key: &str, slot: &mut T, errors: &mut Vec<String>) {
    if let Some(v) = obj.get(key) {
        match T::deserialize(v) {
            Ok(x) => *slot = x,
            Err(e) => errors.push(format!("{key}: {e}")),
        }
    }
}

const KNOWN_FIELDS: [&str; 11] = [
    "out_dir",
    "input",
    "synth",
    "k",
    "dim",
    "title_table",
    "display_table",
    "hidden",
    "init_seed",
    "split",
    "train",
];

/// Parse a config document, apply defaults and check every field.
pub fn parse_config(text: &str) -> Result<PipelineConfig, ConfigErrors> {
    let value: Value = serde_json::from_str(text).map_err(|e| ConfigErrors(vec![format!("not valid JSON: {e}")]))?;
    let Value::Object(obj) = value else {
        return Err(ConfigErrors(vec!["config must be a JSON object".into()]));
    };
    let mut errors = Vec::new();
    for key in obj.keys() {
        if !KNOWN_FIELDS.contains(&key.as_str()) {
            errors.push(format!("{key}: unknown field"));
        }
    }
    let mut c = PipelineConfig::default();
    field(&obj, "out_dir", &mut c.out_dir, &mut errors);
    field(&obj, "input", &mut c.input, &mut errors);
    field(&obj, "synth", &mut c.synth, &mut errors);
    field(&obj, "k", &mut c.k, &mut errors);
    field(&obj, "dim", &mut c.dim, &mut errors);
    field(&obj, "title_table", &mut c.title_table, &mut errors);
    field(&obj, "display_table", &mut c.display_table, &mut errors);
    field(&obj, "hidden", &mut c.hidden, &mut errors);
    field(&obj, "init_seed", &mut c.init_seed, &mut errors);
    field(&obj, "split", &mut c.split, &mut errors);
    field(&obj, "train", &mut c.train, &mut errors);
    if obj.contains_key("input") && obj.contains_key("synth") && c.input.is_some() {
        errors.push("input and synth are mutually exclusive".into());
    }
    errors.extend(check(&c));
    if errors.is_empty() {
        Ok(c)
    } else {
        Err(ConfigErrors(errors))
    }
}

/// Semantic checks on an assembled config.
pub fn check(c: &PipelineConfig) -> Vec<String> {
    let mut errors = Vec::new();
    if c.k < 1 {
        errors.push(format!("k: must be >= 1, got {}", c.k));
    }
    if c.dim < MIN_HASH_DIM {
        errors.push(format!("dim: must be >= {MIN_HASH_DIM}, got {}", c.dim));
    }
    if c.hidden.is_empty() || c.hidden.contains(&0) {
        errors.push(format!("hidden: needs at least one nonzero width, got {:?}", c.hidden));
    }
    if c.title_table.is_some() != c.display_table.is_some() {
        errors.push("title_table and display_table must be given together".into());
    }
    if c.input.is_none() {
        if let Err(e) = c.synth.validate() {
            errors.push(format!("synth: {e}"));
        }
    }
    let r = c.split.ratios;
    if r.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        errors.push(format!("split.ratios: must be non-negative and sum to 1, got {r:?}"));
    }
    errors.extend(c.train.validate().into_iter().map(|e| format!("train.{e}")));
    errors
}

pub fn validate_config(path: &Path) -> Result<PipelineConfig, ConfigErrors> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigErrors(vec![format!("{}: {e}", path.display())]))?;
    parse_config(&text)
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub k: Option<usize>,
    pub dim: Option<usize>,
    pub max_epochs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, c: &mut PipelineConfig) -> Result<(), ConfigErrors> {
        if let Some(v) = &self.out_dir {
            c.out_dir = v.clone();
        }
        if let Some(v) = &self.input {
            c.input = Some(v.clone());
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.dim {
            c.dim = v;
        }
        if let Some(v) = self.max_epochs {
            c.train.max_epochs = v;
        }
        let errors = check(c);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errors))
        }
    }
}

/// Fixed artifact locations under the output directory.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub corpus: PathBuf,
    pub titles: PathBuf,
    pub displays: PathBuf,
    pub index: PathBuf,
    pub pools: PathBuf,
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub model: PathBuf,
    pub reports: PathBuf,
    pub stamps: PathBuf,
}

impl ArtifactPaths {
    pub fn under(dir: &Path) -> Self {
        Self {
            corpus: dir.join("corpus.jsonl"),
            titles: dir.join("titles.emb"),
            displays: dir.join("displays.emb"),
            index: dir.join("index.bin"),
            pools: dir.join("pools.jsonl"),
            manifest: dir.join("manifest.csv"),
            features: dir.join("features.bin"),
            model: dir.join("model.bin"),
            reports: dir.join("reports"),
            stamps: dir.join("stamps.json"),
        }
    }
}
