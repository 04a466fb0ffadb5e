use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use umivr_core::embedding_store::EmbeddingIndex;
use umivr_core::eval::{read_bench, run_benchmark};
use umivr_core::session::{AnswerMode, Engine, SessionConfig, SessionState, SessionStatus, SessionStore};
use umivr_core::synthetic::{planted_scenes, write_index, SyntheticBenchmark};
use umivr_core::tqfs::{read_frame_stream, read_pgm_dir, select_frames, write_pgm, ProjectionEmbedder, TqfsConfig, Video};

use umivr_cli::config::{BackendKind, ServiceConfig};
use umivr_cli::error::AppError;
use umivr_cli::ingest::{add_records, describe, open_or_create, read_items, FRAME_EMBED_DIM};

#[derive(Debug, Parser)]
#[command(name = "umivr", version, about = "Interactive text-to-video retrieval")]
struct Cli {
    /// Human-readable output instead of compact JSON.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct BackendArgs {
    /// Service configuration file (flat TOML; UMIVR_* variables override it).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the mock backend with this lookup table.
    #[arg(long)]
    mock: Option<PathBuf>,
}

impl BackendArgs {
    fn load(&self) -> Result<ServiceConfig, AppError> {
        let mut cfg = ServiceConfig::from_process_env(self.config.as_deref())?;
        if let Some(table) = &self.mock {
            cfg.backend = BackendKind::Mock;
            cfg.mock_table = Some(table.clone());
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct FrameArgs {
    /// Temporal bins.
    #[arg(long, default_value_t = 16)]
    m: usize,
    /// Frames to keep.
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sampling rate in frames per second.
    #[arg(long, default_value_t = 2.0)]
    r_prime: f64,
}

impl FrameArgs {
    fn config(&self) -> TqfsConfig {
        TqfsConfig { r_prime: self.r_prime, m: self.m, k: self.k, seed: self.seed }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Embed records from a JSON-lines file into an index.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Caption records that list a frame directory.
        #[arg(long)]
        describe: bool,
        /// Embedding dimension when creating a new index.
        #[arg(long, default_value_t = 1024)]
        dim: usize,
        #[command(flatten)]
        frames: FrameArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Select key frames from a directory of `<millis>.pgm` files or a frame
    /// stream on stdin (`-`).
    Tqfs {
        #[arg(long)]
        frames: String,
        /// Source frame rate; inferred from timestamps when omitted.
        #[arg(long)]
        fps: Option<f64>,
        #[command(flatten)]
        args: FrameArgs,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Interactive retrieval session on the terminal.
    Session {
        #[arg(long)]
        query: String,
        /// Index file; defaults to the configured one.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Target video id, tracked per round and needed for --simulated.
        #[arg(long)]
        target: Option<String>,
        /// Let the backend answer for the target video.
        #[arg(long)]
        simulated: bool,
        #[arg(long)]
        max_rounds: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        early_stop: bool,
        /// Save the final snapshot into this session directory.
        #[arg(long)]
        store: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Run a benchmark with simulated answers.
    Eval {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, default_value_t = 10)]
        rounds: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        early_stop: bool,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Write the synthetic benchmark and the planted-frames fixture.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        queries: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let default_level = if matches!(cli.command, Command::Serve { .. }) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.body()).expect("error serializes"));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn emit<T: Serialize>(pretty: bool, value: &T) {
    let text = if pretty {
        serde_json::to_string_pretty(value)
    } else {
        serde_json::to_string(value)
    }
    .expect("output serializes");
    let _ = writeln!(io::stdout().lock(), "{text}");
}

fn run(cli: Cli) -> Result<(), AppError> {
    let pretty = cli.pretty;
    match cli.command {
        Command::Ingest { input, index, describe: with_frames, dim, frames, backend } => {
            let cfg = backend.load()?;
            let items = read_items(&input)?;
            let base = open_or_create(&index, dim)?;
            let records = if with_frames {
                let gateway = cfg.gateway()?;
                let tqfs = frames.config();
                items
                    .into_iter()
                    .map(|item| describe(item, &gateway, &tqfs))
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                items.into_iter().map(|i| i.record).collect()
            };
            let count = records.len();
            let next = add_records(&base, cfg.embedder(base.dim()).as_ref(), records)?;
            next.persist(&index)?;
            emit(pretty, &json!({ "ingested": count, "total": next.len(), "index": index }));
        }
        Command::Tqfs { frames, fps, args } => {
            let list = if frames == "-" {
                read_frame_stream(io::stdin().lock())?
            } else {
                read_pgm_dir(Path::new(&frames))?
            };
            let video = match fps {
                Some(fps) => Video::new(list, fps)?,
                None => Video::from_timestamped(list)?,
            };
            let sel = select_frames(&video, &args.config(), &ProjectionEmbedder::new(FRAME_EMBED_DIM, args.seed))?;
            emit(pretty, &sel);
        }
        Command::Serve { config } => {
            let cfg = ServiceConfig::from_process_env(config.as_deref())?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(umivr_cli::serve(cfg))?;
        }
        Command::Session {
            query,
            index,
            target,
            simulated,
            max_rounds,
            alpha,
            beta,
            early_stop,
            store,
            backend,
        } => {
            if query.trim().is_empty() {
                return Err(AppError::validation("empty_query", "query is empty"));
            }
            let defaults = SessionConfig::default();
            let config = SessionConfig {
                max_rounds: max_rounds.unwrap_or(defaults.max_rounds),
                alpha: alpha.unwrap_or(defaults.alpha),
                beta: beta.unwrap_or(defaults.beta),
                early_stop,
                answer_mode: if simulated { AnswerMode::Simulated } else { AnswerMode::Human },
                ..defaults
            };
            let cfg = backend.load()?;
            let engine = engine(&cfg, index.as_deref())?;
            let id = uuid::Uuid::new_v4().simple().to_string();
            let state = engine.start(id, config, &query, target.as_deref())?;
            let state = session_loop(&engine, state, pretty, &mut io::stdin().lock())?;
            if let Some(dir) = store {
                SessionStore::open(dir)?.save(&state)?;
            }
        }
        Command::Eval { bench, rounds, out, index, early_stop, backend } => {
            let cfg = backend.load()?;
            let engine = engine(&cfg, index.as_deref())?;
            let queries = read_bench(&bench)?;
            let config = SessionConfig { max_rounds: rounds, early_stop, ..SessionConfig::default() };
            let run = run_benchmark(&engine, &queries, &config)?;
            run.write(&out)?;
            emit(pretty, &run.report);
        }
        Command::Synth { out, queries } => {
            let bench = SyntheticBenchmark::new(queries);
            bench.write(&out)?;
            let index = out.join("index.bin");
            write_index(&bench, &index)?;
            let planted_dir = out.join("planted");
            std::fs::create_dir_all(&planted_dir)?;
            let (frames, planted) = planted_scenes();
            for f in &frames {
                let millis = (f.timestamp * 1000.0).round() as u64;
                write_pgm(f, &planted_dir.join(format!("{millis}.pgm")))?;
            }
            let planted: Vec<f64> = planted.iter().map(|&i| frames[i].timestamp).collect();
            emit(
                pretty,
                &json!({
                    "records": bench.records.len(),
                    "queries": bench.queries.len(),
                    "index": index,
                    "planted_frames": planted_dir,
                    "planted_timestamps": planted,
                }),
            );
        }
    }
    Ok(())
}

fn engine(cfg: &ServiceConfig, index: Option<&Path>) -> Result<Engine, AppError> {
    let path = index.unwrap_or(&cfg.index);
    let index = EmbeddingIndex::load(path).map_err(|e| AppError::io(format!("index {}: {e}", path.display())))?;
    let embedder = cfg.embedder(index.dim());
    Ok(Engine::new(Arc::new(index), embedder, Arc::new(cfg.gateway()?)))
}

fn round_event(s: &SessionState) -> Value {
    let report = s.latest_report();
    let top: Vec<Value> = s
        .latest_ranking()
        .entries()
        .iter()
        .take(5)
        .map(|e| json!({ "id": e.id, "score": e.score }))
        .collect();
    json!({
        "event": "round",
        "round": s.round,
        "query": s.current_query,
        "tas": report.tas,
        "mus": report.mus,
        "level": report.level,
        "status": s.status,
        "target_rank": s.target_ranks.last(),
        "question": s.pending_question.as_ref().map(|q| &q.text),
        "top": top,
    })
}

fn print_round(pretty: bool, s: &SessionState) {
    if !pretty {
        emit(false, &round_event(s));
        return;
    }
    let r = s.latest_report();
    println!("round {}  TAS {:.3}  MUS {:.3}  {}", s.round, r.tas, r.mus, r.level.label());
    println!("  query: {}", s.current_query);
    for (i, e) in s.latest_ranking().entries().iter().take(5).enumerate() {
        println!("  {:>2}. {} ({:.3})", i + 1, e.id, e.score);
    }
    if let Some(q) = &s.pending_question {
        println!("question: {}", q.text);
    }
}

/// Asks, reads an answer line, and repeats until the session ends. An
/// empty line or end of input closes the session.
fn session_loop(engine: &Engine, mut s: SessionState, pretty: bool, input: &mut dyn BufRead) -> Result<SessionState, AppError> {
    while s.status == SessionStatus::AwaitingAnswer {
        s = engine.question(&s)?;
        print_round(pretty, &s);
        let answer = if s.config.answer_mode == AnswerMode::Simulated {
            None
        } else {
            if pretty {
                print!("> ");
                io::stdout().flush()?;
            }
            let mut line = String::new();
            if input.read_line(&mut line)? == 0 || line.trim().is_empty() {
                s = engine.finish(&s)?;
                return Ok(close(pretty, s));
            }
            Some(line)
        };
        s = engine.answer(&s, answer.as_deref())?;
    }
    print_round(pretty, &s);
    Ok(close(pretty, s))
}

fn close(pretty: bool, s: SessionState) -> SessionState {
    if pretty {
        println!("session {}: {} after {} rounds", s.session_id, s.status, s.round);
    } else {
        emit(false, &json!({ "event": "final", "state": s }));
    }
    s
}
