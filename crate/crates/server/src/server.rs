//! Network front end.
//!
//! Connections are handled concurrently, but every message is funnelled
//! through one pipeline thread, so processing order is total. Replies go
//! back to the sender; alerts and boards fan out to every connection that
//! subscribed as a console.

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use anyhow::{Context, Result};
use futures_util::{SinkExt, StreamExt};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message as WsMessage;
use tracing::{debug, info, warn};

use crate::config::Config;
use crate::pipeline::{Pipeline, Rejection, Stats};
use crate::protocol::{Ack, ErrorReply, Message, Payload, ProtocolError, Role};

/// Outcome of one inbound message, returned to its connection.
type Reply = (u64, Option<Rejection>);

enum Command {
    Handle { seq: u64, payload: Payload, reply: mpsc::UnboundedSender<Reply> },
    /// Wall-clock cadence: issue a board held back by the alert gap, or
    /// re-push the latest board if nothing new was sent.
    Tick,
    Snapshot,
    Shutdown,
}

/// A server started by [`start`].
pub struct Running {
    pub sensor_addr: SocketAddr,
    pub console_addr: SocketAddr,
    pub ws_addr: Option<SocketAddr>,
    stop: oneshot::Sender<()>,
    done: JoinHandle<Result<Stats>>,
}

impl Running {
    /// Stops accepting, drains the pipeline and flushes snapshots.
    pub async fn shutdown(self) -> Result<Stats> {
        let _ = self.stop.send(());
        self.done.await.context("server task panicked")?
    }

    /// Completes when the server stops on its own (pipeline failure).
    pub async fn wait(self) -> Result<Stats> {
        let Running { stop, done, .. } = self;
        let out = done.await.context("server task panicked")?;
        drop(stop);
        out
    }
}

/// Binds all listeners and starts serving. Fails if a port is taken.
pub async fn start(cfg: &Config, pipeline: Pipeline) -> Result<Running> {
    let sensor = TcpListener::bind(cfg.sensor_listen)
        .await
        .with_context(|| format!("binding sensor port {}", cfg.sensor_listen))?;
    let console = TcpListener::bind(cfg.console_listen)
        .await
        .with_context(|| format!("binding console port {}", cfg.console_listen))?;
    let ws = match cfg.console_ws_listen {
        Some(addr) => Some(TcpListener::bind(addr).await.with_context(|| format!("binding websocket port {addr}"))?),
        None => None,
    };
    let sensor_addr = sensor.local_addr()?;
    let console_addr = console.local_addr()?;
    let ws_addr = ws.as_ref().map(|l| l.local_addr()).transpose()?;
    info!(%sensor_addr, %console_addr, ?ws_addr, "listening");

    let (cmd_tx, cmd_rx) = mpsc::channel::<Command>(cfg.queue_depth);
    let (push_tx, _) = broadcast::channel::<Arc<Payload>>(1024);
    let pipeline_thread = {
        let push_tx = push_tx.clone();
        thread::Builder::new()
            .name("pipeline".into())
            .spawn(move || run_pipeline(pipeline, cmd_rx, push_tx))?
    };

    let mut tasks = Vec::new();
    for listener in [sensor, console] {
        tasks.push(tokio::spawn(accept_tcp(listener, cmd_tx.clone(), push_tx.clone())));
    }
    if let Some(l) = ws {
        tasks.push(tokio::spawn(accept_ws(l, cmd_tx.clone(), push_tx.clone())));
    }
    tasks.push(tokio::spawn(timers(
        cmd_tx.clone(),
        Duration::from_millis(cfg.board_cadence_ms as u64),
        Duration::from_millis(cfg.snapshot_interval_ms.max(1)),
    )));

    let (stop, stop_rx) = oneshot::channel::<()>();
    let done = tokio::spawn(async move {
        let _ = stop_rx.await;
        for t in &tasks {
            t.abort();
        }
        let _ = cmd_tx.send(Command::Shutdown).await;
        tokio::task::spawn_blocking(move || pipeline_thread.join())
            .await?
            .map_err(|_| anyhow::anyhow!("pipeline thread panicked"))?
    });
    Ok(Running { sensor_addr, console_addr, ws_addr, stop, done })
}

fn run_pipeline(
    mut pipeline: Pipeline,
    mut rx: mpsc::Receiver<Command>,
    push: broadcast::Sender<Arc<Payload>>,
) -> Result<Stats> {
    let mut pushed_since_tick = false;
    while let Some(cmd) = rx.blocking_recv() {
        match cmd {
            Command::Handle { seq, payload, reply } => {
                let handled = pipeline.handle(payload);
                let _ = reply.send((seq, handled.reply));
                for p in handled.pushes {
                    pushed_since_tick |= matches!(p, Payload::BoardUpdate(_));
                    let _ = push.send(Arc::new(p));
                }
            }
            Command::Tick => {
                if let Some(b) = pipeline.flush_alert_board() {
                    let _ = push.send(Arc::new(Payload::BoardUpdate(b)));
                } else if !pushed_since_tick {
                    if let Some(b) = pipeline.latest_board() {
                        let _ = push.send(Arc::new(Payload::BoardUpdate(b.clone())));
                    }
                }
                pushed_since_tick = false;
            }
            Command::Snapshot => {
                if let Err(e) = pipeline.write_snapshots() {
                    warn!(error = %e, "snapshot write failed");
                }
            }
            Command::Shutdown => break,
        }
    }
    pipeline.finish()?;
    Ok(pipeline.stats())
}

async fn timers(tx: mpsc::Sender<Command>, cadence: Duration, snapshots: Duration) {
    let mut board = tokio::time::interval(cadence);
    let mut snap = tokio::time::interval(snapshots);
    board.tick().await;
    snap.tick().await;
    loop {
        let cmd = tokio::select! {
            _ = board.tick() => Command::Tick,
            _ = snap.tick() => Command::Snapshot,
        };
        if tx.send(cmd).await.is_err() {
            return;
        }
    }
}

async fn accept_tcp(listener: TcpListener, cmd: mpsc::Sender<Command>, push: broadcast::Sender<Arc<Payload>>) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                debug!(%peer, "tcp connection");
                tokio::spawn(tcp_connection(stream, cmd.clone(), push.subscribe()));
            }
            Err(e) => warn!(error = %e, "accept failed"),
        }
    }
}

async fn accept_ws(listener: TcpListener, cmd: mpsc::Sender<Command>, push: broadcast::Sender<Arc<Payload>>) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                debug!(%peer, "websocket connection");
                tokio::spawn(ws_connection(stream, cmd.clone(), push.subscribe()));
            }
            Err(e) => warn!(error = %e, "accept failed"),
        }
    }
}

async fn tcp_connection(stream: TcpStream, cmd: mpsc::Sender<Command>, push: broadcast::Receiver<Arc<Payload>>) {
    let (read, mut write) = stream.into_split();
    let (in_tx, in_rx) = mpsc::channel::<String>(64);
    let (out_tx, mut out_rx) = mpsc::channel::<String>(256);
    tokio::spawn(async move {
        let mut lines = BufReader::new(read).lines();
        while let Ok(Some(line)) = lines.next_line().await {
            if in_tx.send(line).await.is_err() {
                break;
            }
        }
    });
    tokio::spawn(async move {
        while let Some(mut line) = out_rx.recv().await {
            line.push('\n');
            if write.write_all(line.as_bytes()).await.is_err() {
                break;
            }
        }
    });
    session(in_rx, out_tx, cmd, push).await;
}

async fn ws_connection(stream: TcpStream, cmd: mpsc::Sender<Command>, push: broadcast::Receiver<Arc<Payload>>) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            warn!(error = %e, "websocket handshake failed");
            return;
        }
    };
    let (mut sink, mut source) = ws.split();
    let (in_tx, in_rx) = mpsc::channel::<String>(64);
    let (out_tx, mut out_rx) = mpsc::channel::<String>(256);
    tokio::spawn(async move {
        while let Some(Ok(msg)) = source.next().await {
            let text = match msg {
                WsMessage::Text(t) => t,
                WsMessage::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
                WsMessage::Close(_) => break,
                _ => continue,
            };
            // A frame may carry several newline-separated messages.
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                if in_tx.send(line.to_owned()).await.is_err() {
                    return;
                }
            }
        }
    });
    tokio::spawn(async move {
        while let Some(line) = out_rx.recv().await {
            if sink.send(WsMessage::Text(line)).await.is_err() {
                break;
            }
        }
    });
    session(in_rx, out_tx, cmd, push).await;
}

/// Per-connection sequencing shared by all transports.
#[derive(Debug, Default)]
struct SeqState {
    last_in: Option<u64>,
    out: u64,
}

impl SeqState {
    fn next_out(&mut self) -> u64 {
        self.out += 1;
        self.out
    }

    /// Checks framing and sequencing of one inbound line.
    fn admit(&mut self, line: &str) -> Result<Message, (u64, &'static str, String)> {
        let msg = Message::parse(line).map_err(|e| (seq_hint(line), e.code(), e.to_string()))?;
        if self.last_in.is_some_and(|l| msg.seq <= l) {
            return Err((msg.seq, "out_of_sequence", format!("seq {} after {}", msg.seq, self.last_in.unwrap())));
        }
        self.last_in = Some(msg.seq);
        if !msg.payload.is_inbound() {
            return Err((msg.seq, "not_inbound", format!("`{}` is sent by the server only", msg.payload.kind())));
        }
        Ok(msg)
    }

    fn reply(&mut self, seq: u64, outcome: Option<Rejection>) -> String {
        let payload = match outcome {
            None => Payload::Ack(Ack { seq }),
            Some(r) => Payload::Error(ErrorReply { seq, code: r.code.into(), detail: r.detail }),
        };
        Message::new(self.next_out(), payload).to_line()
    }

    fn error(&mut self, seq: u64, code: &str, detail: String) -> String {
        Message::new(self.next_out(), Payload::Error(ErrorReply { seq, code: code.into(), detail })).to_line()
    }
}

/// Best-effort `seq` of a line that failed to parse, 0 if none.
fn seq_hint(line: &str) -> u64 {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("seq").and_then(|s| s.as_u64()))
        .unwrap_or(0)
}

async fn session(
    mut inbound: mpsc::Receiver<String>,
    out: mpsc::Sender<String>,
    cmd: mpsc::Sender<Command>,
    mut push: broadcast::Receiver<Arc<Payload>>,
) {
    let mut seqs = SeqState::default();
    let mut console = false;
    let (reply_tx, mut reply_rx) = mpsc::unbounded_channel::<Reply>();
    loop {
        let line = tokio::select! {
            line = inbound.recv() => match line {
                Some(l) => l,
                None => break,
            },
            Some((seq, outcome)) = reply_rx.recv() => {
                if out.send(seqs.reply(seq, outcome)).await.is_err() {
                    break;
                }
                continue;
            }
            p = push.recv(), if console => {
                match p {
                    Ok(p) => {
                        let line = Message::new(seqs.next_out(), (*p).clone()).to_line();
                        if out.send(line).await.is_err() {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => warn!(skipped = n, "console lagging"),
                    Err(broadcast::error::RecvError::Closed) => break,
                }
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match seqs.admit(&line) {
            Ok(msg) => {
                if let Payload::Subscribe(s) = &msg.payload {
                    console = s.role == Role::Console;
                }
                let c = Command::Handle { seq: msg.seq, payload: msg.payload, reply: reply_tx.clone() };
                if cmd.send(c).await.is_err() {
                    break;
                }
            }
            Err((seq, code, detail)) => {
                if out.send(seqs.error(seq, code, detail)).await.is_err() {
                    break;
                }
            }
        }
    }
    // Flush replies still owed to this connection.
    drop(reply_tx);
    while let Ok((seq, outcome)) = reply_rx.try_recv() {
        let _ = out.send(seqs.reply(seq, outcome)).await;
    }
}

/// Batch mode: one inbound stream from `input`, pushes and rejections
/// written to `output` as wire lines. Acks are not echoed.
pub fn serve_lines(mut pipeline: Pipeline, input: impl BufRead, mut output: impl Write) -> Result<Stats> {
    let mut seqs = SeqState::default();
    for (i, line) in input.lines().enumerate() {
        let line = line.with_context(|| format!("reading input line {}", i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        match seqs.admit(&line) {
            Ok(msg) => {
                let handled = pipeline.handle(msg.payload);
                if let Some(r) = handled.reply {
                    warn!(line = i + 1, code = r.code, detail = %r.detail, "rejected");
                    writeln!(output, "{}", seqs.reply(msg.seq, Some(r)))?;
                }
                for p in handled.pushes {
                    writeln!(output, "{}", Message::new(seqs.next_out(), p).to_line())?;
                }
            }
            Err((seq, code, detail)) => {
                warn!(line = i + 1, code, %detail, "rejected");
                writeln!(output, "{}", seqs.error(seq, code, detail))?;
            }
        }
    }
    output.flush()?;
    pipeline.finish()?;
    Ok(pipeline.stats())
}

/// What a client learned from the server's replies.
#[derive(Debug, Default)]
pub struct ClientReport {
    pub sent: usize,
    pub acked: usize,
    pub errors: Vec<ErrorReply>,
}

/// Sends `payloads` over one TCP connection, the i-th no earlier than
/// `delays[i]` after the start, and waits for a reply to each.
pub async fn send_all(addr: &str, payloads: Vec<Payload>, delays: Vec<Duration>) -> Result<ClientReport> {
    let stream = TcpStream::connect(addr).await.with_context(|| format!("connecting to {addr}"))?;
    let (read, mut write) = stream.into_split();
    let total = payloads.len();
    let reader = tokio::spawn(async move {
        let mut report = ClientReport { sent: total, ..ClientReport::default() };
        let mut lines = BufReader::new(read).lines();
        while report.acked + report.errors.len() < total {
            let Some(line) = lines.next_line().await? else {
                anyhow::bail!("server closed the connection after {} replies", report.acked + report.errors.len());
            };
            match Message::parse(&line).map(|m| m.payload) {
                Ok(Payload::Ack(_)) => report.acked += 1,
                Ok(Payload::Error(e)) => {
                    warn!(seq = e.seq, code = %e.code, detail = %e.detail, "server rejected message");
                    report.errors.push(e);
                }
                Ok(_) => {}
                Err(ProtocolError::MalformedMessage(m)) => warn!(%m, "unreadable reply"),
                Err(e) => warn!(error = %e, "unreadable reply"),
            }
        }
        Ok(report)
    });
    let start = tokio::time::Instant::now();
    for (i, p) in payloads.into_iter().enumerate() {
        if let Some(d) = delays.get(i).filter(|d| !d.is_zero()) {
            tokio::time::sleep_until(start + *d).await;
        }
        let mut line = Message::new(i as u64 + 1, p).to_line();
        line.push('\n');
        write.write_all(line.as_bytes()).await?;
    }
    write.flush().await?;
    let report = reader.await.context("reply reader panicked")??;
    Ok(report)
}
