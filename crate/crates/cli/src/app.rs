// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Argument grammar and command handlers for the `memfly` binary.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memfly_core::config::AblationConfig;
use memfly_core::construction::Operation;
use memfly_core::engine::{MemoryEngine, QueryOutcome};
use memfly_core::eval::{mini_corpus, run_benchmark, ConversationDataset};
use serde_json::json;
use tracing::{error, info};

use crate::config::{CliConfig, Mode, Overrides};
use crate::service::{serve, AppState};
use crate::transcript::load_transcript;
use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "memfly",
    version,
    about = "Long-term memory engine for conversational agents"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true, env = "MEMFLY_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "MEMFLY_MODE", value_enum)]
    pub mode: Option<Mode>,
    /// Snapshot file read at start and written after mutations.
    #[arg(long, global = true, env = "MEMFLY_SNAPSHOT")]
    pub snapshot: Option<PathBuf>,
    #[arg(long, global = true, env = "MEMFLY_LLM_BASE_URL")]
    pub llm_base_url: Option<String>,
    #[arg(long, global = true, env = "MEMFLY_LLM_MODEL")]
    pub llm_model: Option<String>,
    #[arg(long, global = true, env = "MEMFLY_EMBED_BASE_URL")]
    pub embed_base_url: Option<String>,
    #[arg(long, global = true, env = "MEMFLY_EMBED_MODEL")]
    pub embed_model: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest a transcript and update the snapshot.
    Ingest {
        transcript: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Retrieve evidence for a question and answer it.
    Query {
        question: String,
        /// Refine the evidence with sufficiency checks and sub-queries.
        #[arg(long)]
        iterative: bool,
        /// Print the per-iteration retrieval trace as JSON.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run the QA benchmark on a dataset.
    Eval(EvalArgs),
    /// Print graph diagnostics.
    Stats {
        #[arg(long)]
        json: bool,
    },
    /// Recompute topics from keyword co-occurrence.
    Evolve,
    /// Serve the HTTP JSON API.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, env = "MEMFLY_PORT", default_value_t = 8080)]
        port: u16,
        /// Require `Authorization: Bearer <token>` on every request.
        #[arg(long, env = "MEMFLY_TOKEN")]
        token: Option<String>,
    },
    Config {
        #[command(subcommand)]
        command: ConfigCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConfigCommand {
    /// Print the default configuration as TOML.
    PrintDefaults,
    /// Print the configuration after applying file, environment and flags.
    Show,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory with sessions.jsonl and qa.json; the bundled mini-corpus by default.
    #[arg(long, env = "MEMFLY_DATASET")]
    pub dataset: Option<PathBuf>,
    /// Write report.json and report.txt here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub no_update: bool,
    #[arg(long)]
    pub no_denoise: bool,
    #[arg(long)]
    pub no_link: bool,
    #[arg(long)]
    pub no_merge: bool,
    #[arg(long)]
    pub no_topic: bool,
    #[arg(long)]
    pub no_keyword: bool,
    #[arg(long)]
    pub no_neighbor: bool,
    #[arg(long)]
    pub no_ier: bool,
}

impl EvalArgs {
    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            disable_update: self.no_update,
            disable_denoise: self.no_denoise,
            disable_link: self.no_link,
            disable_merge: self.no_merge,
            disable_topic_pathway: self.no_topic,
            disable_keyword_pathway: self.no_keyword,
            disable_neighbor: self.no_neighbor,
            disable_ier: self.no_ier,
        }
    }
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            mode: self.mode,
            snapshot: self.snapshot.clone(),
            dataset: None,
            llm_base_url: self.llm_base_url.clone(),
            llm_model: self.llm_model.clone(),
            embed_base_url: self.embed_base_url.clone(),
            embed_model: self.embed_model.clone(),
        }
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("MEMFLY_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Execute one command and return what it prints on stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    if let Command::Config {
        command: ConfigCommand::PrintDefaults,
    } = cli.command
    {
        return Ok(CliConfig::default().to_toml());
    }
    let mut overrides = cli.global.overrides();
    if let Command::Eval(args) = &cli.command {
        overrides.dataset = args.dataset.clone();
    }
    let cfg = CliConfig::resolve(cli.global.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Ingest { transcript, json } => cmd_ingest(&cfg, &transcript, json),
        Command::Query {
            question,
            iterative,
            trace,
            json,
        } => cmd_query(&cfg, &question, iterative, trace, json),
        Command::Eval(args) => cmd_eval(&cfg, &args),
        Command::Stats { json } => cmd_stats(&cfg, json),
        Command::Evolve => cmd_evolve(&cfg),
        Command::Serve { bind, port, token } => cmd_serve(&cfg, &bind, port, token),
        Command::Config { command } => match command {
            ConfigCommand::PrintDefaults => unreachable!("handled above"),
            ConfigCommand::Show => Ok(cfg.to_toml()),
        },
    }
}

fn save(engine: &MemoryEngine, path: &Path) -> Result<(), CliError> {
    engine
        .save(path)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn cmd_ingest(cfg: &CliConfig, transcript: &Path, json: bool) -> Result<String, CliError> {
    let turns = load_transcript(transcript)?;
    let mut engine = cfg.open_engine(AblationConfig::default())?;
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (i, turn) in turns.iter().enumerate() {
        match engine.ingest(turn) {
            Ok(r) => reports.push(r),
            Err(e) => {
                error!(line = i + 1, error = %e, "turn not ingested");
                failures.push(format!("turn {}: {e}", i + 1));
            }
        }
    }
    save(&engine, &cfg.snapshot)?;
    let count = |op: Operation| reports.iter().filter(|r| r.operation == op).count();
    let g = engine.graph();
    let out = if json {
        let doc = json!({
            "inputs": turns.len(),
            "failed": failures.len(),
            "merged": count(Operation::Merged),
            "linked": count(Operation::Linked),
            "appended": count(Operation::Appended),
            "notes": g.note_count(),
            "clock": g.clock(),
            "snapshot": cfg.snapshot,
            "reports": reports,
        });
        format!("{}\n", serde_json::to_string_pretty(&doc).expect("plain data"))
    } else {
        format!(
            "ingested {} inputs ({} failed): {} merged, {} linked, {} appended\nnotes: {}  keywords: {}  topics: {}  clock: {}\nsnapshot: {}\n",
            turns.len(),
            failures.len(),
            count(Operation::Merged),
            count(Operation::Linked),
            count(Operation::Appended),
            g.note_count(),
            g.keyword_count(),
            g.topic_count(),
            g.clock(),
            cfg.snapshot.display()
        )
    };
    if failures.is_empty() {
        Ok(out)
    } else {
        print!("{out}");
        Err(CliError::Runtime(format!(
            "{} of {} turns failed; first: {}",
            failures.len(),
            turns.len(),
            failures[0]
        )))
    }
}

pub fn render_outcome(out: &QueryOutcome) -> String {
    let mut s = String::new();
    if out.evidence.is_empty() {
        s.push_str("no evidence\n");
        return s;
    }
    let _ = writeln!(s, "evidence ({} notes):", out.evidence.len());
    for (i, e) in out.evidence.iter().enumerate() {
        let _ = writeln!(
            s,
            "  {:>2}. [{}] {} (raw: {:?}, t={})",
            i + 1,
            e.note,
            e.context,
            e.first_raw,
            e.timestamp
        );
    }
    match (&out.answer, &out.answer_error) {
        (Some(a), _) => {
            let _ = writeln!(s, "answer: {a}");
        }
        (None, Some(err)) => {
            let _ = writeln!(s, "answer unavailable: {err}");
        }
        (None, None) => {}
    }
    s
}

pub fn cmd_query(
    cfg: &CliConfig,
    question: &str,
    iterative: bool,
    trace: bool,
    json: bool,
) -> Result<String, CliError> {
    let engine = cfg.open_engine(AblationConfig::default())?;
    let out = engine
        .query(question, iterative)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    if json {
        return Ok(format!("{}\n", serde_json::to_string_pretty(&out).expect("plain data")));
    }
    let mut s = render_outcome(&out);
    if trace {
        s.push_str(&serde_json::to_string_pretty(&out.trace).expect("plain data"));
        s.push('\n');
    }
    Ok(s)
}

pub fn cmd_eval(cfg: &CliConfig, args: &EvalArgs) -> Result<String, CliError> {
    let dataset = match &cfg.dataset {
        Some(dir) => ConversationDataset::load_dir(dir).map_err(|e| match e {
            memfly_core::eval::EvalError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Input(other.to_string()),
        })?,
        None => mini_corpus(),
    };
    let (policy, embedder) = cfg.benchmark_providers();
    let report = run_benchmark(
        &dataset,
        &cfg.engine,
        &args.ablation(),
        policy.as_ref(),
        embedder.as_ref(),
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(dir) = &args.out {
        let write = |name: &str, body: &str| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
        };
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
        write("report.json", &report.to_json())?;
        write("report.txt", &report.to_table())?;
        info!(dir = %dir.display(), "report written");
    }
    Ok(if args.json {
        format!("{}\n", report.to_json())
    } else {
        report.to_table()
    })
}

pub fn cmd_stats(cfg: &CliConfig, json: bool) -> Result<String, CliError> {
    let engine = cfg.open_engine(AblationConfig::default())?;
    let d = engine.stats();
    if json {
        return Ok(format!("{}\n", serde_json::to_string_pretty(&d).expect("plain data")));
    }
    Ok(format!(
        "inputs_seen: {}\nnotes: {}\nmerges: {}\nlinks: {}\nappends: {}\ncompression_ratio: {:.4}\nmean_keywords_per_note: {:.4}\nrelated_edges: {}\nkeywords: {}\ntopics: {}\n",
        d.inputs_seen,
        d.note_count,
        d.merge_total,
        d.link_total,
        d.append_total,
        d.compression_ratio,
        d.mean_keywords_per_note,
        d.related_edge_count,
        d.keyword_count,
        d.topic_count
    ))
}

pub fn cmd_evolve(cfg: &CliConfig) -> Result<String, CliError> {
    let mut engine = cfg.open_engine(AblationConfig::default())?;
    if engine.graph().co_occurrence().next().is_none() {
        return Ok(format!(
            "no keyword co-occurrence yet; topics unchanged ({})\n",
            engine.graph().topic_count()
        ));
    }
    let topics = engine.evolve();
    save(&engine, &cfg.snapshot)?;
    Ok(format!("topics: {topics}\n"))
}

pub fn cmd_serve(cfg: &CliConfig, bind: &str, port: u16, token: Option<String>) -> Result<String, CliError> {
    let addr: SocketAddr = format!("{bind}:{port}")
        .parse()
        .map_err(|e| CliError::Config(format!("bad bind address {bind}:{port}: {e}")))?;
    let engine = cfg.open_engine(AblationConfig::default())?;
    let state = AppState::new(engine, cfg.snapshot.clone(), token);
    let handle = state.engine();
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Runtime(format!("binding {addr}: {e}")))?;
        eprintln!("listening on http://{}", listener.local_addr().unwrap_or(addr));
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        serve(listener, state, shutdown)
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })?;
    let engine = handle
        .read()
        .map_err(|_| CliError::Runtime("engine lock poisoned".into()))?;
    save(&engine, &cfg.snapshot)?;
    Ok(format!("snapshot: {}\n", cfg.snapshot.display()))
}
