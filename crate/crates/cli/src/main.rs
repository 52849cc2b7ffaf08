use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use benchmate_core::eval::{
    parse_gold, score_export, score_session, ScoreReport, DEFAULT_IOU, DEFAULT_WINDOW_MS,
};
use benchmate_core::perception::parse_trace;
use benchmate_core::protocol::{parse_protocol, validate_protocol};
use benchmate_core::session::{
    diff_protocols, export_stepwise_protocol, parse_session_log, replay_text, server,
    session_summary, simulate, system_clock, DirLogFactory, LogFactory, ProtocolRegistry,
    ServiceContext, SessionConfigs, TraceDirResolver,
};
use clap::{Parser, Subcommand};

/// Default config file, used when `--config` is not given.
const CONFIG_ENV: &str = "BENCHMATE_CONFIG";

#[derive(Parser)]
#[command(name = "benchmate", version, about = "Lab protocol conformance engine")]
struct Cli {
    /// Session config (TOML with [alignment] and [monitor] tables).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accept NDJSON wire connections.
    Serve {
        #[arg(long)]
        listen: String,
        /// Directory of *.toml protocols.
        #[arg(long)]
        protocol_dir: PathBuf,
        /// Where `trace_ref` files are looked up.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        /// Where session logs are written.
        #[arg(long, default_value = "sessions")]
        log_dir: PathBuf,
    },
    /// Run a recorded trace through a fresh session and write its log.
    Simulate {
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "simulated")]
        session_id: String,
        /// Print the outbound envelopes as they would have been sent.
        #[arg(long)]
        print: bool,
    },
    /// Re-run a session log and verify every outbound envelope.
    Replay {
        log: PathBuf,
        /// Print the replayed outbound envelopes.
        #[arg(long)]
        print: bool,
    },
    /// Score a session log or exported protocol against a gold annotation.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IOU)]
        iou: f64,
        #[arg(long, default_value_t = DEFAULT_WINDOW_MS)]
        window_ms: u64,
    },
    /// Reconstruct the stepwise protocol a finalized session performed.
    Export {
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also report steps missing from or added to the gold protocol.
        #[arg(long)]
        diff: bool,
    },
    /// Parse and validate protocol files.
    Validate { protocols: Vec<PathBuf> },
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_configs(path: Option<&Path>) -> Result<SessionConfigs> {
    match path {
        None => Ok(SessionConfigs::default()),
        Some(p) => SessionConfigs::from_toml(&read(p)?)
            .map_err(anyhow::Error::msg)
            .with_context(|| format!("config {}", p.display())),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let configs = load_configs(cli.config.as_deref())?;
    match cli.command {
        Command::Serve {
            listen,
            protocol_dir,
            trace_dir,
            log_dir,
        } => {
            let protocols = ProtocolRegistry::load_dir(&protocol_dir)?;
            let ids: Vec<&str> = protocols.ids().collect();
            if ids.is_empty() {
                bail!("no protocols in {}", protocol_dir.display());
            }
            eprintln!("protocols: {}", ids.join(", "));
            let logs = DirLogFactory::new(&log_dir)
                .with_context(|| format!("log dir {}", log_dir.display()))?;
            let mut ctx = ServiceContext::new(
                protocols,
                Arc::new(TraceDirResolver::new(trace_dir)),
                Arc::new(logs) as Arc<dyn LogFactory>,
            );
            ctx.defaults = configs;
            let listener =
                TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            server::serve(listener, ctx)?;
        }
        Command::Simulate {
            protocol,
            trace,
            out,
            session_id,
            print,
        } => {
            let p = parse_protocol(&read(&protocol)?)
                .with_context(|| protocol.display().to_string())?;
            let t = parse_trace(&read(&trace)?).with_context(|| trace.display().to_string())?;
            let sim = simulate(p, t, configs, &session_id, system_clock())?;
            let mut f = fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            f.write_all(sim.log_text.as_bytes())?;
            if print {
                let lines: String = sim.outbound.iter().map(|e| e.encode() + "\n").collect();
                emit(&lines)?;
            }
            let feedback = sim
                .outbound
                .iter()
                .filter(|e| e.kind == benchmate_core::session::EnvelopeType::Feedback)
                .count();
            eprintln!(
                "{} envelopes ({feedback} feedback) logged to {}",
                sim.outbound.len(),
                out.display()
            );
        }
        Command::Replay { log, print } => {
            let out = replay_text(&read(&log)?).with_context(|| log.display().to_string())?;
            if print {
                let lines: String = out.lines().into_iter().map(|l| l + "\n").collect();
                emit(&lines)?;
            }
            eprintln!(
                "replay ok: {} outbound envelopes identical",
                out.outbound.len()
            );
        }
        Command::Score {
            pred,
            gold,
            iou,
            window_ms,
        } => {
            let gold_text = read(&gold)?;
            let gold = parse_gold(&gold_text).with_context(|| gold.display().to_string())?;
            let text = read(&pred)?;
            let report: ScoreReport = if text.trim_start().starts_with('{') {
                let log = parse_session_log(&text).with_context(|| pred.display().to_string())?;
                let protocol = parse_protocol(&log.header.protocol_document)?;
                score_session(&protocol, &session_summary(&log)?, &gold, iou, window_ms)?
            } else {
                let observed = parse_protocol(&text).with_context(|| pred.display().to_string())?;
                score_export(&observed, &gold, iou, window_ms)?
            };
            emit(&(serde_json::to_string_pretty(&report)? + "\n"))?;
            eprint!("{}", report.table());
        }
        Command::Export { log, out, diff } => {
            let parsed =
                parse_session_log(&read(&log)?).with_context(|| log.display().to_string())?;
            let observed = export_stepwise_protocol(&parsed)?;
            let doc = benchmate_core::protocol::to_document(&observed);
            match out {
                Some(path) => {
                    fs::write(&path, &doc).with_context(|| format!("writing {}", path.display()))?
                }
                None => emit(&doc)?,
            }
            if diff {
                let gold = parse_protocol(&parsed.header.protocol_document)?;
                let d = diff_protocols(&gold, &observed);
                eprintln!(
                    "missing: {:?}\nextra: {:?}\norder preserved: {}",
                    d.missing, d.extra, d.order_preserved
                );
            }
        }
        Command::Validate { protocols } => {
            let mut failed = false;
            for path in protocols {
                match parse_protocol(&read(&path)?) {
                    Ok(p) => {
                        let report = validate_protocol(&p);
                        for w in report.warnings() {
                            eprintln!("{}: warning: {}: {}", path.display(), w.path, w.message);
                        }
                        println!("{}: ok ({} steps)", path.display(), p.steps.len());
                    }
                    Err(e) => {
                        failed = true;
                        println!("{}: {e}", path.display());
                    }
                }
            }
            if failed {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
