use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;

use enrichcap_cli::commands;
use enrichcap_cli::config::StoreFormatName;
use enrichcap_cli::pipeline::{load_queries, read_jsonl, Pipeline, TruthLine};
use enrichcap_cli::{CliError, PipelineConfig};
use enrichcap_core::text_context::DEFAULT_TEMPLATE;
use enrichcap_core::{FusionConfig, VerifyParams};

/// Retrieval, fusion, geometric verification and caption-context tools.
#[derive(Debug, Parser)]
#[command(name = "enrichcap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate an embedding store, optionally converting it.
    Ingest {
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Option<StoreFormatName>,
        /// Re-export the normalised store here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        out_format: Option<StoreFormatName>,
        /// Keep vectors as stored instead of L2-normalising them.
        #[arg(long)]
        no_normalize: bool,
    },
    /// Per-encoder top-k for each query (JSONL output).
    Retrieve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse `retrieve` output (JSONL output).
    Fuse {
        rankings: PathBuf,
        /// Read fusion settings from a pipeline config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify a query image against candidates listed in fused order.
    Verify {
        query: PathBuf,
        #[arg(required = true)]
        candidates: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the context bundle for one article.
    Context {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        article: String,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the enrichment prompt from a context bundle.
    Prompt {
        bundle: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value = DEFAULT_TEMPLATE)]
        template: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a run file and/or candidate captions.
    Eval {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline over a query file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// JSONL of `{"query_id", "truth", "references"?}` for metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory; `result.json` is written inside.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

fn json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn jsonl<T: Serialize>(values: &[T]) -> anyhow::Result<String> {
    let mut s = String::new();
    for v in values {
        s.push_str(&serde_json::to_string(v)?);
        s.push('\n');
    }
    Ok(s)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest {
            input,
            format,
            out,
            out_format,
            no_normalize,
        } => {
            let manifest = commands::ingest(
                &input,
                format,
                out.as_deref().map(|p| (p, out_format)),
                !no_normalize,
            )?;
            emit(None, &json(&manifest)?)
        }
        Command::Retrieve {
            config,
            queries,
            top_k,
            out,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(k) = top_k {
                cfg.top_k = k;
            }
            cfg.validate()?;
            emit(out.as_deref(), &jsonl(&commands::retrieve(cfg, &queries)?)?)
        }
        Command::Fuse {
            rankings,
            config,
            out,
        } => {
            let fusion = match config {
                Some(c) => PipelineConfig::load(&c)?.fusion,
                None => FusionConfig::default(),
            };
            emit(out.as_deref(), &jsonl(&commands::fuse_file(&rankings, &fusion)?)?)
        }
        Command::Verify {
            query,
            candidates,
            seed,
            out,
        } => {
            let mut params = VerifyParams::default();
            params.ransac.seed = seed;
            let cands: Vec<&Path> = candidates.iter().map(PathBuf::as_path).collect();
            emit(out.as_deref(), &json(&commands::verify(&query, &cands, &params)?)?)
        }
        Command::Context {
            config,
            article,
            caption,
            out,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            emit(out.as_deref(), &json(&commands::context(&cfg, &article, &caption)?)?)
        }
        Command::Prompt {
            bundle,
            caption,
            template,
            out,
        } => emit(out.as_deref(), &commands::prompt(&bundle, &caption, &template)?),
        Command::Eval { run, captions, out } => emit(
            out.as_deref(),
            &json(&commands::eval(run.as_deref(), captions.as_deref())?)?,
        ),
        Command::Run {
            config,
            queries,
            truth,
            seed,
            top_k,
            workers,
            out,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.top_k = top_k.unwrap_or(cfg.top_k);
            cfg.workers = workers.unwrap_or(cfg.workers);
            if let Some(o) = out {
                cfg.output = o;
            }
            cfg.validate()?;
            let queries = load_queries(&queries)?;
            let truth: Option<Vec<TruthLine>> = truth.as_deref().map(read_jsonl).transpose()?;
            let result = Pipeline::new(cfg.clone())?.run(&queries, truth.as_deref());
            let path = cfg.output.join("result.json");
            emit(Some(&path), &json(&result)?)?;
            log::info!("wrote {}", path.display());
            if let Some(m) = &result.metrics {
                emit(None, &json(m)?)?;
            }
            match result.failed() {
                0 => Ok(()),
                failed => Err(CliError::QueriesFailed {
                    failed,
                    total: result.queries.len(),
                }
                .into()),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
