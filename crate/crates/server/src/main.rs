use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fusion_core::ontology::Ontology;
use fusion_core::store::{scan_dir, Record};
use fusion_server::config::Config;
use fusion_server::pipeline::{Pipeline, EVENTS_DIR};
use fusion_server::protocol::{Message, Payload};
use fusion_server::replay::{read_log, schedule};
use fusion_server::server::{self, send_all, serve_lines};
use fusion_server::simulate::{simulate, to_wire, ScenarioScript};
use tracing::{info, warn};
use tracing_subscriber::EnvFilter;

const DEFAULT_SENSOR_ADDR: &str = "127.0.0.1:7400";

#[derive(Parser)]
#[command(name = "fusion", version, about = "Semantic event fusion server for camera networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the fusion server.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Read one message stream from stdin instead of listening; pushes
        /// and rejections go to stdout, snapshots are written at end of input.
        #[arg(long)]
        stdin: bool,
    },
    /// Generate a seeded synthetic sensor feed.
    Simulate {
        #[arg(long)]
        script: PathBuf,
        /// Overrides the script's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ontology: Option<PathBuf>,
        #[command(flatten)]
        sink: Sink,
    },
    /// Feed a recorded log (wire capture or store segment) into a pipeline.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Multiple of real time; `inf` sends without pauses.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Send to a running server (default 127.0.0.1:7400).
        #[arg(long, conflicts_with = "config")]
        connect: Option<String>,
        /// Replay offline into the data directory of this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write stored events and annotations with from <= timestamp < to as
    /// wire lines.
    Export {
        #[arg(long)]
        from: i64,
        #[arg(long)]
        to: i64,
        #[arg(long, default_value = "fusion.toml")]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
#[group(multiple = false)]
struct Sink {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    connect: Option<String>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve { config, stdin } => {
            let cfg = Config::load(&config)?;
            let pipeline = Pipeline::from_config(&cfg)?;
            if stdin {
                let stats = serve_lines(pipeline, io::stdin().lock(), BufWriter::new(io::stdout().lock()))?;
                info!(?stats, "input finished");
                return Ok(());
            }
            runtime()?.block_on(async {
                let running = server::start(&cfg, pipeline).await?;
                tokio::signal::ctrl_c().await.context("waiting for ctrl-c")?;
                info!("shutting down");
                let stats = running.shutdown().await?;
                info!(?stats, "stopped");
                Ok(())
            })
        }
        Command::Simulate { script, seed, ontology, sink } => {
            let mut script = ScenarioScript::load(&script)?;
            if let Some(s) = seed {
                script.seed = s;
            }
            let ontology = load_ontology(ontology.as_deref())?;
            let events = simulate(&script, &ontology)?;
            info!(events = events.len(), seed = script.seed, "scenario generated");
            match (sink.out, sink.connect) {
                (_, Some(addr)) => {
                    let payloads: Vec<Payload> = events.into_iter().map(Payload::SensorEvent).collect();
                    let report = runtime()?.block_on(send_all(&addr, payloads, Vec::new()))?;
                    summarize(report.sent, report.acked, report.errors.len())
                }
                (Some(path), None) => {
                    std::fs::write(&path, to_wire(&events)).with_context(|| format!("writing {}", path.display()))
                }
                (None, None) => {
                    let mut out = BufWriter::new(io::stdout().lock());
                    out.write_all(to_wire(&events).as_bytes())?;
                    out.flush()?;
                    Ok(())
                }
            }
        }
        Command::Replay { log, speed, connect, config } => {
            if !(speed > 0.0) {
                bail!("speed must be positive");
            }
            let parsed = read_log(&log)?;
            if let Some(line) = parsed.truncated_tail {
                warn!(line, "log ends in a truncated record; it was skipped");
            }
            info!(records = parsed.records.len(), "log read");
            if let Some(config) = config {
                let cfg = Config::load(&config)?;
                let mut pipeline = Pipeline::from_config(&cfg)?;
                let mut rejected = 0;
                for p in parsed.records {
                    if let Some(r) = pipeline.handle(p).reply {
                        warn!(code = r.code, detail = %r.detail, "rejected");
                        rejected += 1;
                    }
                }
                pipeline.finish()?;
                info!(stored = pipeline.store().len(), rejected, "replay finished");
                return Ok(());
            }
            let addr = connect.unwrap_or_else(|| DEFAULT_SENSOR_ADDR.to_owned());
            let delays = schedule(&parsed.records, speed);
            let report = runtime()?.block_on(send_all(&addr, parsed.records, delays))?;
            summarize(report.sent, report.acked, report.errors.len())
        }
        Command::Export { from, to, config, out } => {
            if from > to {
                bail!("--from must not exceed --to");
            }
            let cfg = Config::load(&config)?;
            let mut records: Vec<Record> = scan_dir(&cfg.data_dir.join(EVENTS_DIR))?.into_iter().map(|l| l.record).collect();
            records.retain(|r| {
                let t = r.as_event().timestamp;
                from <= t && t < to
            });
            records.sort_by_cached_key(|r| {
                let e = r.as_event();
                (e.timestamp, e.event_id)
            });
            let mut w: Box<dyn Write> = match &out {
                Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
                None => Box::new(BufWriter::new(io::stdout().lock())),
            };
            for (i, r) in records.into_iter().enumerate() {
                let payload = match r {
                    Record::SensorEvent(e) => Payload::SensorEvent(e),
                    Record::Annotation(a) => Payload::Annotation(a),
                };
                writeln!(w, "{}", Message::new(i as u64 + 1, payload).to_line())?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn load_ontology(path: Option<&Path>) -> Result<Ontology> {
    match path {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let text = io::read_to_string(BufReader::new(f))?;
            Ok(Ontology::load(&text)?)
        }
        None => Ok(Ontology::seed()),
    }
}

fn summarize(sent: usize, acked: usize, errors: usize) -> Result<()> {
    info!(sent, acked, errors, "delivery finished");
    if errors > 0 {
        bail!("{errors} of {sent} messages were rejected");
    }
    Ok(())
}
