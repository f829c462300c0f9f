use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use skbf::eval::{self, EvalOptions};
use skbf::llm::{self, Gateway, Transcript};
use skbf::pipeline::{self, AnswerTrace, Pipeline, PipelineConfig};
use skbf::vss::{self, Embedder, EmbeddingIndex};
use skbf::{fsutil, Error, SemiStructuredKb, TypeMode};

const DEFAULT_INDEX_FILE: &str = "embeddings.jsonl";

#[derive(Parser)]
#[command(
    name = "skbf",
    version,
    about = "Question answering over semi-structured knowledge bases"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate knowledge-base files and write them out as a store directory
    Ingest {
        /// Directory with nodes.jsonl and edges.jsonl
        #[arg(long)]
        skb: PathBuf,
        /// Target directory (validation only when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build or extend the embedding cache for all candidates
    Embed {
        #[arg(long)]
        skb: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Cache file (default: <skb>/embeddings.jsonl)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer one question and print the ranked answers with their evidence
    Query {
        #[arg(long)]
        skb: PathBuf,
        #[arg(long)]
        question: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        llm: LlmArgs,
        /// Embedding cache (default: <skb>/embeddings.jsonl if present)
        #[arg(long)]
        index: Option<PathBuf>,
        /// Write the JSON trace here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a QA dataset and write metric reports
    Eval {
        #[arg(long)]
        skb: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        llm: LlmArgs,
        #[arg(long)]
        index: Option<PathBuf>,
        /// CSV report path
        #[arg(long)]
        out: PathBuf,
        /// JSON report with per-query rows (default: CSV path with .json extension)
        #[arg(long)]
        json: Option<PathBuf>,
        /// Directory for per-query traces
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Queries answered concurrently
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
        parallel: u16,
        /// Evaluate only this fraction of every split
        #[arg(long)]
        subsample: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretty-print a stored trace
    TraceShow {
        path: PathBuf,
        /// Resolve node names from this knowledge base
        #[arg(long)]
        skb: Option<PathBuf>,
        /// Print the raw JSON instead of the summary
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    k_max: Option<u32>,
    /// strict or relaxed
    #[arg(long)]
    edge_type_mode_out: Option<TypeMode>,
    /// strict or relaxed
    #[arg(long)]
    edge_type_mode_in: Option<TypeMode>,
    /// Skip triplet prefiltering (similarity + rerank only)
    #[arg(long)]
    no_prefilter: bool,
    /// Leave wall-clock timings out of traces
    #[arg(long)]
    no_timings: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(k) = self.k_max {
            cfg.k_max = k as usize;
        }
        if let Some(m) = self.edge_type_mode_out {
            cfg.edge_type_mode_out = m;
        }
        if let Some(m) = self.edge_type_mode_in {
            cfg.edge_type_mode_in = m;
        }
        if self.no_prefilter {
            cfg.prefilter = false;
        }
        if self.no_timings {
            cfg.timings = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct LlmArgs {
    /// Serve LLM responses from this transcript; no network access
    #[arg(long, conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Call the configured provider and save the transcript here
    #[arg(long)]
    record: Option<PathBuf>,
    /// Client-side rate limit for live calls
    #[arg(long)]
    requests_per_minute: Option<u32>,
}

impl LlmArgs {
    fn gateway(&self, cfg: &PipelineConfig) -> Result<Gateway> {
        if let Some(path) = &self.replay {
            return Ok(Gateway::replay(
                Transcript::load(path).map_err(Error::from)?,
            ));
        }
        let model = cfg.llm_model.clone();
        let provider = llm::provider_from_vars(|k| match (k, &model) {
            (llm::ENV_MODEL, Some(m)) => Some(m.clone()),
            _ => std::env::var(k).ok(),
        })
        .map_err(Error::from)?;
        let mut gw = if self.record.is_some() {
            Gateway::recording(provider)
        } else {
            Gateway::live(provider)
        };
        if let Some(rpm) = self.requests_per_minute {
            gw = gw.with_rate_limit(rpm);
        }
        Ok(gw)
    }

    fn finish(&self, gw: &Gateway) -> Result<()> {
        if let Some(path) = &self.record {
            gw.transcript().save(path).map_err(Error::from)?;
            log::info!("transcript saved to {}", path.display());
        }
        Ok(())
    }
}

fn load_skb(dir: &Path) -> Result<SemiStructuredKb> {
    Ok(SemiStructuredKb::load_dir(dir).map_err(Error::from)?)
}

fn embedder(cfg: &PipelineConfig) -> Result<Box<dyn Embedder>> {
    Ok(vss::embedder_from_tag(&cfg.embedder, |k| std::env::var(k).ok()).map_err(Error::from)?)
}

/// Load the cache if it exists and embed whatever it is missing.
fn load_index(
    skb: &SemiStructuredKb,
    skb_dir: &Path,
    path: Option<&Path>,
    e: &dyn Embedder,
) -> Result<EmbeddingIndex> {
    let path = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| skb_dir.join(DEFAULT_INDEX_FILE));
    let mut index = if path.exists() {
        let cached = EmbeddingIndex::load(&path).map_err(Error::from)?;
        if cached.tag() == e.tag() {
            cached
        } else {
            log::warn!(
                "{} was built with `{}`; ignoring it",
                path.display(),
                cached.tag()
            );
            EmbeddingIndex::new(e.tag())
        }
    } else {
        EmbeddingIndex::new(e.tag())
    };
    let added = index
        .extend(skb, e, &skb.candidate_pool())
        .map_err(Error::from)?;
    if added > 0 {
        log::info!("embedded {added} node(s) not in the cache");
    }
    Ok(index)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { skb, out } => {
            let kb = load_skb(&skb)?;
            let schema = kb.schema();
            println!(
                "{} nodes, {} edges, {} candidates; node types: {}; edge types: {}",
                kb.node_count(),
                kb.edge_count(),
                kb.candidate_pool().len(),
                schema
                    .node_types
                    .iter()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", "),
                schema
                    .edge_types
                    .iter()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", "),
            );
            if let Some(out) = out {
                kb.write_dir(&out).map_err(Error::from)?;
                println!("store written to {}", out.display());
            }
        }
        Command::Embed { skb, config, out } => {
            let cfg = config.resolve()?;
            let kb = load_skb(&skb)?;
            let e = embedder(&cfg)?;
            let path = out.unwrap_or_else(|| skb.join(DEFAULT_INDEX_FILE));
            let index = load_index(&kb, &skb, Some(&path), e.as_ref())?;
            index.save(&path).map_err(Error::from)?;
            println!(
                "{} embeddings ({}) in {}",
                index.len(),
                index.tag(),
                path.display()
            );
        }
        Command::Query {
            skb,
            question,
            config,
            llm,
            index,
            out,
        } => {
            let cfg = config.resolve()?;
            let kb = load_skb(&skb)?;
            let e = embedder(&cfg)?;
            let idx = load_index(&kb, &skb, index.as_deref(), e.as_ref())?;
            let gw = llm.gateway(&cfg)?;
            let p = Pipeline {
                skb: &kb,
                index: &idx,
                embedder: e.as_ref(),
                gateway: &gw,
                config: &cfg,
            };
            let (_, trace) = p.answer(&question)?;
            llm.finish(&gw)?;
            print!("{}", pipeline::render_summary(&trace, Some(&kb)));
            if let Some(out) = out {
                fsutil::write_atomic(&out, trace.to_json().as_bytes())
                    .with_context(|| format!("pipeline: writing {}", out.display()))?;
            }
        }
        Command::Eval {
            skb,
            dataset,
            config,
            llm,
            index,
            out,
            json,
            traces,
            parallel,
            subsample,
            seed,
        } => {
            let cfg = config.resolve()?;
            let kb = load_skb(&skb)?;
            let mut records = eval::load_dataset_file(&dataset, &kb).map_err(Error::from)?;
            if let Some(f) = subsample {
                records = eval::subsample(&records, f, seed).map_err(Error::from)?;
            }
            let e = embedder(&cfg)?;
            let idx = load_index(&kb, &skb, index.as_deref(), e.as_ref())?;
            let gw = llm.gateway(&cfg)?;
            let p = Pipeline {
                skb: &kb,
                index: &idx,
                embedder: e.as_ref(),
                gateway: &gw,
                config: &cfg,
            };
            let opts = EvalOptions {
                parallel: parallel as usize,
                traces_dir: traces,
            };
            let report = eval::evaluate(&p, &records, &opts).map_err(Error::from)?;
            llm.finish(&gw)?;
            let json = json.unwrap_or_else(|| out.with_extension("json"));
            if json == out {
                bail!("eval_harness: JSON and CSV report paths are the same");
            }
            report.write_csv(&out).map_err(Error::from)?;
            report.write_json(&json).map_err(Error::from)?;
            print!("{}", report.to_csv().map_err(Error::from)?);
            if report.failures > 0 {
                eprintln!(
                    "{} quer(ies) failed and count as zero; see {}",
                    report.failures,
                    json.display()
                );
            }
        }
        Command::TraceShow { path, skb, json } => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("pipeline: reading {}", path.display()))?;
            let trace = AnswerTrace::from_json(&text)?;
            if json {
                println!("{}", trace.to_json());
            } else {
                let kb = skb.as_deref().map(load_skb).transpose()?;
                print!("{}", pipeline::render_summary(&trace, kb.as_ref()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
