//! `mdtb` command line: pipeline, indexing, autofill, benchmark and the HTTP
//! service. Exit codes: 0 success, 1 operational error, 2 usage error.

pub mod server;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use mdtb_core::form_model::FormSchema;
use mdtb_core::{Engine, RunConfig};
use serde::Serialize;

/// Config file looked up in the working directory when `--config` is absent.
pub const DEFAULT_CONFIG: &str = "mdtb.toml";

#[derive(Debug, Parser)]
#[command(name = "mdtb", version, about = "Tumour-board form autocompletion")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Run configuration (TOML). Defaults to ./mdtb.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest documents for one case.
    Ingest {
        #[arg(long = "case")]
        case_id: String,
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Show the vector index, or re-embed every staged chunk.
    Index {
        #[arg(long)]
        rebuild: bool,
    },
    /// Autofill a case's form with one backend.
    Autofill {
        #[arg(long = "case")]
        case_id: String,
        #[arg(long, default_value = "mock")]
        backend: String,
    },
    /// Benchmark backends over the configured fixtures.
    Bench {
        /// Comma-separated backend ids; all configured backends when omitted.
        #[arg(long, value_delimiter = ',')]
        backends: Vec<String>,
        #[arg(long, default_value = "bench_out")]
        out: PathBuf,
    },
    /// Run the HTTP API.
    Serve,
    /// Form schema utilities.
    Schema {
        #[command(subcommand)]
        action: SchemaAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum SchemaAction {
    /// Check a schema file for structural errors.
    Validate { file: PathBuf },
}

pub fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None if Path::new(DEFAULT_CONFIG).is_file() => RunConfig::load(Path::new(DEFAULT_CONFIG)).context("loading ./mdtb.toml"),
        None => {
            let mut cfg = RunConfig::with_root("datalake");
            cfg.apply_env(|k| std::env::var(k).ok());
            Ok(cfg)
        }
    }
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
    } else {
        println!("{}", human());
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let json = cli.global.json;
    let config_path = cli.global.config.as_deref();
    match cli.command {
        Command::Schema {
            action: SchemaAction::Validate { file },
        } => {
            let schema = FormSchema::load(&file).with_context(|| format!("schema {}", file.display()))?;
            let fields = schema.fields().count();
            emit(json, &serde_json::json!({"valid": true, "schema": schema.key(), "blocks": schema.blocks.len(), "fields": fields}), || {
                format!("{}: valid ({} blocks, {fields} fields)", schema.key(), schema.blocks.len())
            });
        }
        Command::Ingest { case_id, paths } => {
            let engine = Engine::open(load_config(config_path)?)?;
            let manifest = engine.ingest(&case_id, &paths)?;
            emit(json, &manifest, || {
                let mut s = format!("{case_id}: {} ingested, {} chunks", manifest.ingested.len(), manifest.chunk_count);
                for r in &manifest.rejected {
                    s.push_str(&format!("\n  rejected {}: {} ({})", r.path, r.reason, r.detail));
                }
                s
            });
            if manifest.ingested.is_empty() && !manifest.rejected.is_empty() {
                return Err(anyhow!("no document of case {case_id} could be ingested"));
            }
        }
        Command::Index { rebuild } => {
            let cfg = load_config(config_path)?;
            let engine = if rebuild { Engine::open_rebuilding(cfg)? } else { Engine::open(cfg)? };
            if rebuild {
                engine.rebuild_index()?;
            }
            let meta = engine.index().meta();
            emit(json, &meta, || format!("index: {} entries, provider {}, dim {}", engine.index().len(), meta.provider_id, meta.dim));
        }
        Command::Autofill { case_id, backend } => {
            let engine = Engine::open(load_config(config_path)?)?;
            let report = engine.autofill(&case_id, &backend)?;
            emit(json, &report, || {
                let form = &report.outcome.form;
                let filled = form.values().values().filter(|v| !v.is_missing()).count();
                let mut s = format!(
                    "{case_id}: form v{} by {backend}, blocks {:?}, {filled} fields filled, {:.2}s",
                    report.version,
                    form.active_blocks(),
                    report.outcome.latency_s
                );
                for c in report.outcome.completions.iter().filter(|c| c.error.is_some()) {
                    s.push_str(&format!("\n  block {} failed: {}", c.block_id, c.error.as_deref().unwrap_or_default()));
                }
                s
            });
        }
        Command::Bench { backends, out } => {
            let engine = Engine::open(load_config(config_path)?)?;
            let result = engine.benchmark(&backends, &out)?;
            emit(json, &result.reports.iter().map(|r| (&r.backend_id, &r.accuracy, &r.latency)).collect::<Vec<_>>(), || {
                let mut s = String::new();
                for r in &result.reports {
                    s.push_str(&format!(
                        "{}: {} cases, accuracy {:.2} +/- {:.2} %, latency {:.2} s\n",
                        r.backend_id, r.n_cases, r.accuracy.mean, r.accuracy.std, r.latency.mean
                    ));
                }
                s.push_str(&format!("reports in {}", result.out_dir.display()));
                s
            });
        }
        Command::Serve => {
            let cfg = load_config(config_path)?;
            let token = cfg
                .service
                .auth_token
                .clone()
                .ok_or_else(|| anyhow!("no auth token configured; set service.auth_token or {}", mdtb_core::config::ENV_AUTH_TOKEN))?;
            let bind = cfg.service.bind.clone();
            let engine = Arc::new(Engine::open(cfg)?);
            tokio::runtime::Runtime::new()?.block_on(server::serve(engine, &bind, &token))?;
        }
    }
    Ok(())
}

/// Parses `args`, runs, and maps the outcome to an exit code. Usage errors
/// are reported by clap itself (exit 2).
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
