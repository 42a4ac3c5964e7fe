//! The `privesc` command: runs one supervised session or builds a retrieval
//! index.

pub mod terminal;

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use privesc_core::approval::{ApprovalGate, ApproveAll};
use privesc_core::config::{load_config_with, ConfigOverrides, ExecutorKind};
use privesc_core::executor::{CommandExecutor, SimulatedTarget};
use privesc_core::gateway::{ModelTransport, ScriptedTransport};
use privesc_core::orchestrator::{
    emit_report, run_session, ControlHub, EventSink, LoopEvent, LoopIo, NoInbox, OnlineRetriever, OperatorInbox,
    Toolkit,
};
use privesc_core::rag::{self, BinaryLexicon};
use privesc_core::session::{open_session, SystemClock, TerminationReason};
use privesc_core::SessionConfig;
use privesc_net::control::{control_token_from_env, ControlServer, DEFAULT_CONTROL_ADDR};
use privesc_net::http::{HttpFetcher, HttpTransport};
use privesc_net::ssh::SshExecutor;

use terminal::{HintBox, TerminalGate};

pub const EXIT_ROOT: i32 = 0;
pub const EXIT_FATAL: i32 = 1;
pub const EXIT_MAX_TURNS: i32 = 2;
pub const EXIT_ABORT: i32 = 3;
/// Bad arguments or configuration; the session never started.
pub const EXIT_USAGE: i32 = 64;

/// Optional origin that replaces the public technique-page site.
pub const PAGES_MIRROR_ENV: &str = "TECHNIQUE_PAGES_MIRROR";

#[derive(Debug, Parser)]
#[command(name = "privesc", version, about = "Human-supervised privilege-escalation loop for lab targets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one session against the configured target.
    Run(RunArgs),
    /// Chunk and embed a markdown corpus into `<corpus>/index/`.
    Ingest(IngestArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// KEY=value configuration file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub cot: bool,
    #[arg(long)]
    pub hint: bool,
    #[arg(long)]
    pub rag: bool,
    /// Try live technique pages before the offline index (implies --rag).
    #[arg(long)]
    pub rag_online: bool,
    #[arg(long)]
    pub ptt: bool,
    /// Approve every prompt and command without asking.
    #[arg(long)]
    pub yes: bool,
    /// Replay canned model replies from a JSON file instead of calling the provider.
    #[arg(long, value_name = "FILE")]
    pub scripted: Option<PathBuf>,
    /// Serve the control API and take approvals from it instead of the terminal.
    #[arg(long, value_name = "ADDR", num_args = 0..=1, default_missing_value = DEFAULT_CONTROL_ADDR)]
    pub control: Option<SocketAddr>,
    /// Permit a non-loopback control address.
    #[arg(long)]
    pub allow_remote_control: bool,
    /// Parent directory for `sessions/` (overrides LOG_ROOT).
    #[arg(long)]
    pub log_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub corpus: PathBuf,
    /// Per-chunk character cap.
    #[arg(long, default_value_t = rag::MAX_CHUNK_CHARS)]
    pub chunk_limit: usize,
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn fatal(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_FATAL,
        message: message.into(),
    }
}

pub fn exit_code(reason: TerminationReason) -> i32 {
    match reason {
        TerminationReason::AutoRoot => EXIT_ROOT,
        TerminationReason::MaxTurns => EXIT_MAX_TURNS,
        TerminationReason::UserAbort => EXIT_ABORT,
        TerminationReason::FatalError => EXIT_FATAL,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(&a),
        Command::Ingest(a) => ingest(&a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("privesc: {}", f.message);
            f.code
        }
    }
}

/// Relative paths in the file are taken from the file's directory.
fn rebase(config: &mut SessionConfig, base: &Path) {
    let fix = |p: &mut Option<PathBuf>| {
        if let Some(path) = p {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    };
    fix(&mut config.simulated_spec);
    fix(&mut config.rag_corpus);
    fix(&mut config.rates_file);
    fix(&mut config.prompts_dir);
    fix(&mut config.log_root);
}

pub fn load_run_config(args: &RunArgs) -> Result<SessionConfig, Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| usage(format!("cannot read {}: {e}", args.config.display())))?;
    let on = |b: bool| b.then_some(true);
    let overrides = ConfigOverrides {
        cot: on(args.cot),
        hint: on(args.hint),
        rag: on(args.rag || args.rag_online),
        rag_online: on(args.rag_online),
        ptt: on(args.ptt),
        auto_approve: on(args.yes),
    };
    let mut config = load_config_with(&text, &overrides).map_err(|e| usage(format!("{}: {e}", args.config.display())))?;
    rebase(&mut config, args.config.parent().unwrap_or(Path::new(".")));
    if let Some(root) = &args.log_root {
        config.log_root = Some(root.clone());
    }
    Ok(config)
}

fn build_toolkit(config: &SessionConfig) -> Result<Toolkit, Failure> {
    let mut kit = Toolkit::from_config(config).map_err(|e| usage(e.to_string()))?;
    if config.flags.rag_online {
        if let Some(r) = kit.retriever.as_mut() {
            let fetcher = match std::env::var(PAGES_MIRROR_ENV) {
                Ok(base) if !base.trim().is_empty() => HttpFetcher::with_mirror(base.trim()),
                _ => HttpFetcher::new(),
            };
            r.online = Some(OnlineRetriever {
                fetcher: Box::new(fetcher),
                lexicon: BinaryLexicon::builtin(),
            });
        }
    }
    Ok(kit)
}

fn build_transport(args: &RunArgs) -> Result<Box<dyn ModelTransport>, Failure> {
    match &args.scripted {
        Some(path) => Ok(Box::new(ScriptedTransport::from_file(path).map_err(|e| usage(e.to_string()))?)),
        None => Ok(Box::new(HttpTransport::from_env().map_err(|e| usage(e.to_string()))?)),
    }
}

fn build_executor(config: &SessionConfig) -> Result<Box<dyn CommandExecutor>, Failure> {
    match config.executor_kind {
        ExecutorKind::Simulated => match &config.simulated_spec {
            Some(spec) => Ok(Box::new(SimulatedTarget::from_file(spec).map_err(|e| usage(e.to_string()))?)),
            None => Ok(Box::new(SimulatedTarget::metasploitable_like())),
        },
        ExecutorKind::RemoteShell => Ok(Box::new(SshExecutor::from_config(config).map_err(|e| fatal(e.to_string()))?)),
    }
}

/// Progress lines on the log, one per event of interest.
struct LogSink;

impl EventSink for LogSink {
    fn emit(&self, event: LoopEvent) {
        match event {
            LoopEvent::SessionStarted {
                session_id,
                configuration,
                max_turns,
            } => log::info!("session {session_id} started ({configuration}, up to {max_turns} turns)"),
            LoopEvent::ReconCompleted { probes, .. } => log::info!("recon finished: {probes} probes"),
            LoopEvent::TurnRecorded { summary } => log::info!(
                "turn {}: {} (root: {}, cost {}, total {})",
                summary.turn_index,
                summary.command.as_deref().unwrap_or("no command"),
                summary.root,
                summary.actual_cost,
                summary.cumulative_cost
            ),
            LoopEvent::Notice { turn_index, message } => log::warn!("turn {turn_index}: {message}"),
            LoopEvent::SessionFinished { outcome } => log::info!(
                "session finished: {} after {} turns",
                outcome.termination_reason.as_str(),
                outcome.turns_used
            ),
            _ => {}
        }
    }
}

struct Tee<'a>(&'a dyn EventSink, &'a dyn EventSink);

impl EventSink for Tee<'_> {
    fn emit(&self, event: LoopEvent) {
        self.0.emit(event.clone());
        self.1.emit(event);
    }
}

pub fn run(args: &RunArgs) -> Result<i32, Failure> {
    let config = load_run_config(args)?;
    let kit = build_toolkit(&config)?;
    let mut transport = build_transport(args)?;
    let mut executor = build_executor(&config)?;
    let log_root = config.log_root.clone().unwrap_or_else(|| PathBuf::from("logs"));
    let clock = SystemClock;

    let control = match args.control {
        Some(addr) => {
            let hub = ControlHub::new(config.flags, config.max_turns);
            let (token, generated) = control_token_from_env();
            let server = ControlServer::start(hub.clone(), addr, &token, args.allow_remote_control)
                .map_err(|e| usage(e.to_string()))?;
            eprintln!("control API listening on http://{}", server.local_addr());
            if generated {
                eprintln!("control token (CONTROL_TOKEN was unset): {token}");
            }
            Some((hub, server))
        }
        None => None,
    };

    let hints = config.flags.hint.then(HintBox::default);
    let (mut gate, mut inbox): (Box<dyn ApprovalGate>, Box<dyn OperatorInbox>) = match (&control, config.is_headless()) {
        (Some((hub, _)), true) => (Box::new(ApproveAll::default()), Box::new(hub.inbox())),
        (Some((hub, _)), false) => (Box::new(hub.gate()), Box::new(hub.inbox())),
        (None, true) => (Box::new(ApproveAll::default()), Box::new(NoInbox)),
        (None, false) => (
            Box::new(TerminalGate::new(
                std::io::BufReader::new(std::io::stdin()),
                std::io::stderr(),
                hints.clone(),
            )),
            match hints {
                Some(h) => Box::new(h),
                None => Box::new(NoInbox),
            },
        ),
    };

    let mut session = open_session(&log_root, config, &clock).map_err(|e| fatal(e.to_string()))?;
    let hub_sink = control.as_ref().map(|(hub, _)| hub.sink());
    let log_sink = LogSink;
    let tee;
    let events: &dyn EventSink = match &hub_sink {
        Some(s) => {
            tee = Tee(&log_sink, s);
            &tee
        }
        None => &log_sink,
    };
    let result = {
        let mut io = LoopIo {
            transport: transport.as_mut(),
            executor: executor.as_mut(),
            gate: gate.as_mut(),
            inbox: inbox.as_mut(),
            events,
            clock: &clock,
        };
        run_session(&mut session, &kit, &mut io)
    };
    if let Some((hub, server)) = control {
        hub.close();
        server.shutdown();
    }
    let result = result.map_err(|e| fatal(e.to_string()))?;
    let artifacts = emit_report(&session).map_err(|e| fatal(e.to_string()))?;

    let o = &result.outcome;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "outcome: {} | root: {} | turns: {} | cost: {}",
        o.termination_reason.as_str(),
        if o.root_achieved { "yes" } else { "no" },
        o.turns_used,
        o.total_cost
    );
    let _ = writeln!(out, "session: {}", result.session_dir.display());
    let _ = writeln!(out, "report:  {}", artifacts.report_md.display());
    Ok(exit_code(o.termination_reason))
}

pub fn ingest(args: &IngestArgs) -> Result<i32, Failure> {
    if args.chunk_limit == 0 {
        return Err(usage("--chunk-limit must be at least 1"));
    }
    let index = rag::ingest(&args.corpus, args.chunk_limit).map_err(|e| usage(e.to_string()))?;
    let dir = args.corpus.join("index");
    index.save(&dir).map_err(|e| fatal(e.to_string()))?;
    println!("indexed {} chunks into {}", index.len(), dir.display());
    Ok(0)
}
