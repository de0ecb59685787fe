use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use vscomplete_cli::config::{validate_config, Overrides, PipelineConfig};
use vscomplete_cli::pipeline::{self, Subset};
use vscomplete_cli::{init_logging, EXIT_DATA, EXIT_INTERNAL, EXIT_OK, EXIT_USAGE};
use vscomplete_core::corpus::SynthConfig;
use vscomplete_core::model::TrainConfig;
use vscomplete_core::persistence::inspect_artifact;
use vscomplete_core::split::{Split, SplitConfig, DEFAULT_PUBLISHER_THRESHOLD};
use vscomplete_core::theory::{estimate_recovery, sweep_n, write_theory_csv, TheoryConfig};

#[derive(Parser)]
#[command(name = "vscomplete", version, about = "Retrieve, pool, classify and evaluate code-set completions")]
struct Cli {
    /// Emit logs as JSON lines on stderr.
    #[arg(long, global = true)]
    json_logs: bool,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read FHIR ValueSet documents (or a corpus JSONL) into a filtered corpus.
    Ingest {
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        fhir_dir: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus.
    GenSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus summary statistics (JSON plus CSV tables).
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed titles and display strings.
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = vscomplete_core::embed::DEFAULT_DIM)]
        dim: usize,
        /// Precomputed title embeddings to use instead of hashing.
        #[arg(long, requires = "display_table")]
        title_table: Option<PathBuf>,
        #[arg(long, requires = "title_table")]
        display_table: Option<PathBuf>,
        #[arg(long)]
        titles_out: PathBuf,
        #[arg(long)]
        displays_out: PathBuf,
    },
    /// Build the exact inner-product index over title embeddings.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        titles: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build one candidate pool per value set from its K nearest neighbours.
    Pool {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        titles: PathBuf,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        k: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified train/val/test manifest.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Publisher whose sets all go to test (repeatable).
        #[arg(long = "held-out-publisher")]
        held_out: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble pair features.
    Features {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        titles: PathBuf,
        #[arg(long)]
        displays: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pair classifier and tune its threshold on validation pairs.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vscomplete_cli::config::DEFAULT_HIDDEN)]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = vscomplete_cli::config::DEFAULT_INIT_SEED)]
        init_seed: u64,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the classifier and the retrieval-only baseline on test sets.
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PUBLISHER_THRESHOLD)]
        publisher_threshold: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score externally generated code lists.
    EvalPredictions {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// train, val, test or all
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = DEFAULT_PUBLISHER_THRESHOLD)]
        publisher_threshold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo check of the recovery bounds.
    SimulateTheory {
        /// One config object or an array of them.
        #[arg(long)]
        config: PathBuf,
        /// Re-run every config at each of these sample counts.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline, skipping stages that are up to date.
    RunAll(RunAllArgs),
    /// Print an artifact header.
    Inspect { file: PathBuf },
}

#[derive(Args)]
struct RunAllArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(usage)
}

fn parse_subset(s: &str) -> Result<Subset, Failure> {
    Ok(match s {
        "all" => Subset::All,
        "train" => Subset::Only(Split::Train),
        "val" => Subset::Only(Split::Val),
        "test" => Subset::Only(Split::Test),
        other => return Err(usage(anyhow!("unknown split {other:?} (expected train, val, test or all)"))),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Ingest { fhir_dir, input, out } => {
            let src = fhir_dir.or(input).expect("clap requires one input");
            pipeline::ingest(&src, &out).context("stage ingest failed")?;
        }
        Command::GenSynth { config, seed, out } => {
            let mut c: SynthConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            pipeline::gen_synth(&c, &out).context("stage gen-synth failed")?;
        }
        Command::Stats { corpus, out } => {
            for p in pipeline::stats(&corpus, &out).context("stage stats failed")? {
                println!("{}", p.display());
            }
        }
        Command::Embed {
            corpus,
            dim,
            title_table,
            display_table,
            titles_out,
            displays_out,
        } => {
            let t = pipeline::provider_for(dim, title_table.as_deref())?;
            let d = pipeline::provider_for(dim, display_table.as_deref())?;
            pipeline::embed(&corpus, t.as_ref(), d.as_ref(), &titles_out, &displays_out).context("stage embed failed")?;
        }
        Command::Index { corpus, titles, out } => pipeline::index(&corpus, &titles, &out).context("stage index failed")?,
        Command::Pool {
            corpus,
            index,
            titles,
            k,
            out,
        } => {
            let s = pipeline::pool(&corpus, &index, &titles, k as usize, &out).context("stage pool failed")?;
            println!("{}", serde_json::to_string_pretty(&s).map_err(anyhow::Error::from)?);
        }
        Command::Split {
            corpus,
            pools,
            config,
            held_out,
            seed,
            out,
        } => {
            let mut c: SplitConfig = match config {
                Some(p) => read_json(&p)?,
                None => SplitConfig::default(),
            };
            c.held_out_publishers.extend(held_out);
            if let Some(s) = seed {
                c.seed = s;
            }
            pipeline::split(&corpus, &pools, &c, &out).context("stage split failed")?;
        }
        Command::Features {
            corpus,
            pools,
            titles,
            displays,
            out,
        } => {
            pipeline::features(&corpus, &pools, &titles, &displays, &out).context("stage features failed")?;
        }
        Command::Train {
            features,
            manifest,
            config,
            hidden,
            init_seed,
            max_epochs,
            out,
        } => {
            let mut c: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(e) = max_epochs {
                c.max_epochs = e;
            }
            let errs = c.validate();
            if !errs.is_empty() {
                return Err(usage(anyhow!("invalid training config: {}", errs.join("; "))));
            }
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(usage(anyhow!("--hidden needs nonzero widths")));
            }
            pipeline::train_stage(&features, &manifest, &hidden, init_seed, &c, &out).context("stage train failed")?;
        }
        Command::Eval {
            features,
            pools,
            manifest,
            model,
            publisher_threshold,
            out_dir,
        } => {
            let r = pipeline::eval_stage(&features, &pools, &manifest, &model, publisher_threshold, &out_dir)
                .context("stage eval failed")?;
            println!("{}", serde_json::to_string_pretty(&r.classifier.value_set_level).map_err(anyhow::Error::from)?);
        }
        Command::EvalPredictions {
            predictions,
            corpus,
            manifest,
            split,
            publisher_threshold,
            out,
        } => {
            let subset = parse_subset(&split)?;
            let r = pipeline::eval_predictions(&predictions, &corpus, &manifest, subset, publisher_threshold, &out)
                .context("stage eval-predictions failed")?;
            println!("{}", serde_json::to_string_pretty(&r.value_set_level).map_err(anyhow::Error::from)?);
        }
        Command::SimulateTheory { config, sweep, out } => {
            let value: serde_json::Value = read_json(&config)?;
            let configs: Vec<TheoryConfig> = match value {
                serde_json::Value::Array(_) => serde_json::from_value(value),
                v => serde_json::from_value(v).map(|c| vec![c]),
            }
            .with_context(|| format!("parsing {}", config.display()))
            .map_err(usage)?;
            let mut results = Vec::new();
            for c in &configs {
                c.validate().map_err(usage)?;
                if sweep.is_empty() {
                    results.push(estimate_recovery(c).map_err(usage)?);
                } else {
                    results.extend(sweep_n(c, &sweep).map_err(usage)?);
                }
            }
            write_theory_csv(&out, &results).with_context(|| format!("writing {}", out.display()))?;
            for r in &results {
                log::info!(
                    "N={} K={} n={}: direct {:.4} (bound {:.4}), pooled {:.4} (bound {:.4}), violations {}",
                    r.config.universe,
                    r.config.pool,
                    r.config.n,
                    r.p_fail_direct_mc,
                    r.bound_direct,
                    r.p_fail_rasc_mc,
                    r.bound_rasc,
                    r.dominance_violations
                );
            }
        }
        Command::RunAll(a) => {
            let mut c = match &a.config {
                Some(p) => validate_config(p).map_err(usage)?,
                None => PipelineConfig::default(),
            };
            Overrides {
                out_dir: a.out_dir,
                input: a.input,
                k: a.k,
                dim: a.dim,
                max_epochs: a.max_epochs,
            }
            .apply(&mut c)
            .map_err(usage)?;
            let outcome = pipeline::run_all(&c).map_err(|e| Failure::Data(e.into()))?;
            log::info!("ran: [{}]; up to date: [{}]", outcome.ran.join(", "), outcome.skipped.join(", "));
            println!("{}", serde_json::to_string_pretty(&outcome.summary).map_err(anyhow::Error::from)?);
        }
        Command::Inspect { file } => {
            let h = inspect_artifact(&file).with_context(|| format!("inspecting {}", file.display()))?;
            println!("{}", serde_json::to_string_pretty(&h).map_err(anyhow::Error::from)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    init_logging(cli.json_logs, cli.verbose);
    let code = match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(Failure::Usage(e))) => {
            log::error!("{e:#}");
            EXIT_USAGE
        }
        Ok(Err(Failure::Data(e))) => {
            log::error!("{e:#}");
            EXIT_DATA
        }
        Err(_) => {
            log::error!("internal error");
            EXIT_INTERNAL
        }
    };
    ExitCode::from(code as u8)
}
