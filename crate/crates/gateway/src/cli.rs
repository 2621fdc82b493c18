//! The `intentdial` command line.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use intentdial_core::gradcheck::{self, GradCheckConfig};
use intentdial_core::graph::{synthesize_graph, GeneratorSpec, IntentGraph};
use intentdial_core::manager::{Engine, ManagerConfig, Session, TemplateSet};
use intentdial_core::training::{
    build_vocabulary, evaluate, load_jsonl, prepare_all, save_jsonl, synthesize_dialogues, train, TrainConfig,
    DEFAULT_FILLERS,
};

use crate::service::{router, AppState};
use crate::snapshot::{EngineSnapshot, SnapshotPaths};

/// Environment variable naming a manager config file for `serve` and `chat`.
pub const CONFIG_ENV: &str = "INTENTDIAL_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "intentdial", version, about = "Multi-turn intent identification over an intent graph")]
pub struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print machine-readable JSON to stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic intent graph.
    GenGraph(GenGraphArgs),
    /// Generate synthetic multi-turn dialogues for a graph.
    GenData(GenDataArgs),
    /// Train a model and write a servable snapshot directory.
    Train(TrainArgs),
    /// Evaluate a snapshot on a dialogue file.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Chat with a snapshot on the terminal.
    Chat(ChatArgs),
}

#[derive(Debug, Args)]
pub struct GenGraphArgs {
    /// JSON generator spec; overrides the size flags.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub kinds: usize,
    #[arg(long, default_value_t = 4)]
    pub features_per_kind: usize,
    #[arg(long, default_value_t = 20)]
    pub queries: usize,
    #[arg(long, default_value_t = 2)]
    pub distractors_per_kind: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub min_turns: usize,
    #[arg(long, default_value_t = 3)]
    pub max_turns: usize,
    /// Output JSONL file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Training dialogues (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Template file copied into the snapshot; built-in English otherwise.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Snapshot directory to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub snapshot: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Coordinates compared per parameter tensor.
    #[arg(long, default_value_t = 6)]
    pub per_param: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub snapshot: PathBuf,
    /// Manager config; falls back to $INTENTDIAL_CONFIG, then the snapshot's.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Directory served under `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Append-only JSONL transcript log.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub snapshot: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "chat")]
    pub session: String,
}

/// Parses `args` and runs the command; exit 2 on usage errors, 1 on runtime
/// errors.
pub fn main_from<I, T>(args: I) -> ExitCode
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
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    match run(cli, &mut stdin.lock(), &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn emit(out: &mut dyn Write, json_mode: bool, value: serde_json::Value, human: &str) -> anyhow::Result<()> {
    if json_mode {
        writeln!(out, "{value}")?;
    } else {
        writeln!(out, "{human}")?;
    }
    Ok(())
}

fn load_graph(path: &Path) -> anyhow::Result<IntentGraph> {
    IntentGraph::load(path).with_context(|| format!("loading graph {}", path.display()))
}

/// Snapshot paths for `dir` with the config from `flag`, else `$INTENTDIAL_CONFIG`.
pub fn snapshot_paths(dir: &Path, flag: Option<PathBuf>) -> SnapshotPaths {
    let config = flag.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    SnapshotPaths::in_dir(dir).with_config(config)
}

fn load_snapshot(dir: &Path, config: Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<EngineSnapshot> {
    let mut snap = EngineSnapshot::load(&snapshot_paths(dir, config))
        .with_context(|| format!("loading snapshot {}", dir.display()))?;
    if let Some(seed) = seed {
        snap.engine.config.seed = seed;
    }
    Ok(snap)
}

pub fn run(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> anyhow::Result<()> {
    let json_mode = cli.json;
    match cli.command {
        Command::GenGraph(a) => {
            let spec = match &a.spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => GeneratorSpec::new(a.kinds, a.features_per_kind, a.queries, a.distractors_per_kind),
            };
            let g = synthesize_graph(&spec, cli.seed.unwrap_or(0))?;
            g.save(&a.out)?;
            emit(
                out,
                json_mode,
                json!({ "graph": a.out, "entities": g.len(), "relations": g.num_relations(), "queries": g.num_queries() }),
                &format!("wrote {} ({} entities, {} queries)", a.out.display(), g.len(), g.num_queries()),
            )
        }
        Command::GenData(a) => {
            let g = load_graph(&a.graph)?;
            let samples = synthesize_dialogues(&g, a.count, (a.min_turns, a.max_turns), cli.seed.unwrap_or(0))?;
            save_jsonl(&a.out, &samples)?;
            emit(
                out,
                json_mode,
                json!({ "data": a.out, "samples": samples.len() }),
                &format!("wrote {} dialogues to {}", samples.len(), a.out.display()),
            )
        }
        Command::Train(a) => {
            let g = load_graph(&a.graph)?;
            let mut cfg: TrainConfig = match &a.config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => TrainConfig::default(),
            };
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let templates = match &a.templates {
                Some(p) => TemplateSet::load(p)?,
                None => TemplateSet::english(),
            };
            let raw = load_jsonl(&a.data)?;
            let vocab = build_vocabulary(&g, &raw, DEFAULT_FILLERS);
            let data = prepare_all(&raw, &g, &vocab)?;
            let outcome = train(&g, vocab.len(), &data, &cfg, |e| {
                if !json_mode {
                    let valid = e
                        .valid
                        .as_ref()
                        .map(|v| format!(" valid final {:.3} intermediate {:.3}", v.final_accuracy, v.intermediate_accuracy))
                        .unwrap_or_default();
                    eprintln!("epoch {} loss {:.4} return {:.3}{valid} ({:.1}s)", e.epoch, e.loss, e.mean_return, e.seconds);
                }
            })?;
            let engine = Engine {
                graph: g,
                model: outcome.model,
                vocab,
                templates,
                config: ManagerConfig {
                    horizon: cfg.horizon,
                    k: cfg.eval_k,
                    seed: cfg.seed,
                    ..ManagerConfig::default()
                },
            };
            EngineSnapshot::persist(&engine, &a.out)?;
            let digest = EngineSnapshot::load(&SnapshotPaths::in_dir(&a.out))?.digest;
            emit(
                out,
                json_mode,
                json!({
                    "snapshot": a.out,
                    "digest": digest,
                    "best_epoch": outcome.best_epoch,
                    "report": outcome.report,
                    "epochs": outcome.epochs,
                }),
                &format!("wrote snapshot {} (best epoch {})", a.out.display(), outcome.best_epoch),
            )
        }
        Command::Eval(a) => {
            let snap = load_snapshot(&a.snapshot, None, None)?;
            let e = &snap.engine;
            let raw = load_jsonl(&a.data)?;
            let data = prepare_all(&raw, &e.graph, &e.vocab)?;
            let report = evaluate(
                &e.model,
                &e.graph,
                &data,
                a.horizon.unwrap_or(e.config.horizon),
                a.k.unwrap_or(e.config.k),
                &Default::default(),
                cli.seed.unwrap_or(0),
            )?;
            emit(
                out,
                json_mode,
                serde_json::to_value(&report)?,
                &format!(
                    "final accuracy {:.3}  intermediate accuracy {:.3}  mean return {:.3}  ({} dialogues)",
                    report.final_accuracy, report.intermediate_accuracy, report.mean_return, report.samples
                ),
            )
        }
        Command::GradCheck(a) => {
            let cfg = GradCheckConfig {
                seed: cli.seed.unwrap_or(0),
                per_param: a.per_param,
                ..Default::default()
            };
            let report = gradcheck::run(&cfg)?;
            let mut human = String::new();
            for c in &report.checks {
                human.push_str(&format!("{:<28} {:>6} coords  max rel err {:.2e}\n", c.name, c.checked, c.max_rel_error));
            }
            human.push_str(&format!(
                "max relative error {:.2e} (tolerance {:.0e}) in {:.1}s: {}",
                report.max_rel_error,
                report.tolerance,
                report.seconds,
                if report.passed { "ok" } else { "FAILED" }
            ));
            emit(out, json_mode, serde_json::to_value(&report)?, &human)?;
            if !report.passed {
                bail!("gradient check failed: max relative error {:.3e}", report.max_rel_error);
            }
            Ok(())
        }
        Command::Serve(a) => {
            let snap = load_snapshot(&a.snapshot, a.config, cli.seed)?;
            let digest = snap.digest.clone();
            let mut state = AppState::new(snap);
            if let Some(p) = &a.transcript {
                state = state.with_transcript(p).with_context(|| format!("opening {}", p.display()))?;
            }
            let app = router(Arc::new(state), a.static_dir);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&a.bind)
                    .await
                    .with_context(|| format!("binding {}", a.bind))?;
                let addr = listener.local_addr()?;
                emit(
                    out,
                    json_mode,
                    json!({ "listening": addr.to_string(), "digest": digest }),
                    &format!("listening on http://{addr} (snapshot {digest})"),
                )?;
                out.flush()?;
                axum::serve(listener, app).await?;
                Ok(())
            })
        }
        Command::Chat(a) => {
            let snap = load_snapshot(&a.snapshot, a.config, cli.seed)?;
            let mut session = Session::new(a.session);
            let mut line = String::new();
            while session.phase.is_open() {
                line.clear();
                if input.read_line(&mut line)? == 0 {
                    break;
                }
                let text = line.trim();
                if text.is_empty() {
                    continue;
                }
                let o = session.handle(&snap.engine, text)?;
                let path: Vec<&str> = o.trace.nodes.iter().map(|n| n.id.as_str()).collect();
                emit(
                    out,
                    json_mode,
                    json!({
                        "turn": session.turns() - 1,
                        "response": o.response,
                        "template": o.template.as_str(),
                        "phase": o.phase,
                        "trace": o.trace,
                    }),
                    &format!("{}\n  [{}] {}", o.response, o.phase.label(), path.join(" -> ")),
                )?;
            }
            Ok(())
        }
    }
}
