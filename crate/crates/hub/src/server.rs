//! Listener, per-connection tasks and the replay scheduler.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thalamus_core::ingest::{replay_next, ReplayCursor, ReplayPlan, ReplayStep};
use thalamus_core::wire::FrameReader;
use thalamus_core::{Sample, Timestamp};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::{JoinHandle, JoinSet};
use tracing::{debug, info, warn};

use crate::clock::HubClock;
use crate::config::{ConfigError, HubConfig, Limits};
use crate::outbox::Outbox;
use crate::router::{Command, Router, RouterConfig};
use crate::stats::{HubStats, StatsSnapshot};

const COMMAND_CAPACITY: usize = 8192;
const READ_BUFFER: usize = 64 * 1024;
/// Frames handed to one socket write.
const WRITE_BATCH: usize = 64;
/// How long shutdown waits for outboxes to drain.
const FLUSH_DEADLINE: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum HubError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("bind error on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

/// A running hub. Dropping the handle leaves the hub running until the
/// runtime stops; call [`HubHandle::shutdown`] for an orderly stop.
pub struct HubHandle {
    local_addr: SocketAddr,
    clock: HubClock,
    stats: Arc<HubStats>,
    commands: mpsc::Sender<Command>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl HubHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn clock(&self) -> HubClock {
        self.clock
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    /// Stops accepting, stops replay, closes every session and waits (up to
    /// a deadline) for queued frames to be written.
    pub async fn shutdown(self) {
        info!("shutting down");
        self.shutdown.send_replace(true);
        let _ = self.commands.send(Command::Shutdown).await;
        for t in self.tasks {
            let _ = t.await;
        }
        info!("stopped");
    }
}

/// Validates `cfg`, loads every dataset, binds the listener and starts the
/// router, acceptor and replay scheduler.
pub async fn start(cfg: HubConfig) -> Result<HubHandle, HubError> {
    cfg.validate()?;
    let plans = cfg.load_plans()?;
    let listener = TcpListener::bind(&cfg.listen).await.map_err(|source| HubError::Bind {
        addr: cfg.listen.clone(),
        source,
    })?;
    let local_addr = listener.local_addr().map_err(|source| HubError::Bind {
        addr: cfg.listen.clone(),
        source,
    })?;

    let clock = HubClock::new();
    let stats = Arc::new(HubStats::new(clock.started()));
    let (tx, rx) = mpsc::channel(COMMAND_CAPACITY);
    let (shutdown_tx, shutdown_rx) = watch::channel(false);
    let descriptors = plans
        .iter()
        .flat_map(|(p, _)| p.streams.iter().map(|s| s.descriptor.clone()))
        .collect();
    let router = Router::new(
        clock,
        RouterConfig {
            admin_token: cfg.admin_token.clone(),
            seed: cfg.seed,
            history_ms: cfg.limits.history_seconds * 1000,
        },
        stats.clone(),
        descriptors,
    );

    let tasks = vec![
        tokio::spawn(router.run(rx)),
        tokio::spawn(accept_loop(listener, tx.clone(), cfg.limits.clone(), shutdown_rx.clone())),
        tokio::spawn(replay_loop(plans, clock, tx.clone(), shutdown_rx)),
    ];
    info!(addr = %local_addr, devices = cfg.devices.len(), "listening");
    Ok(HubHandle {
        local_addr,
        clock,
        stats,
        commands: tx,
        shutdown: shutdown_tx,
        tasks,
    })
}

async fn accept_loop(
    listener: TcpListener,
    tx: mpsc::Sender<Command>,
    limits: Limits,
    mut shutdown: watch::Receiver<bool>,
) {
    let next_id = AtomicU64::new(1);
    let mut conns = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let conn_id = next_id.fetch_add(1, Ordering::Relaxed);
                    debug!(conn_id, %peer, "accepted");
                    conns.spawn(connection(stream, conn_id, peer, tx.clone(), limits.clone()));
                }
                Err(e) => {
                    warn!(error = %e, "accept failed");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
            },
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
            _ = raised(&mut shutdown) => break,
        }
    }
    drop(listener);
    let drained = tokio::time::timeout(FLUSH_DEADLINE, async {
        while conns.join_next().await.is_some() {}
    })
    .await;
    if drained.is_err() {
        warn!(remaining = conns.len(), "connections did not drain before the deadline");
        conns.abort_all();
    }
}

async fn connection(stream: TcpStream, conn_id: u64, peer: SocketAddr, tx: mpsc::Sender<Command>, limits: Limits) {
    let _ = stream.set_nodelay(true);
    let (rd, wr) = stream.into_split();
    let outbox = Arc::new(Outbox::new(limits.queue_capacity));
    let subscribed = Arc::new(AtomicBool::new(false));
    let open = Command::Open {
        conn_id,
        peer: peer.to_string(),
        outbox: outbox.clone(),
        subscribed: subscribed.clone(),
    };
    if tx.send(open).await.is_err() {
        return;
    }
    let mut writer = tokio::spawn(write_loop(wr, outbox.clone()));
    read_loop(rd, conn_id, &tx, &outbox, &subscribed, &limits).await;
    // The router closes the outbox once it has handled everything this
    // connection sent; if it is gone, close it here.
    if tx.send(Command::Closed { conn_id }).await.is_err() {
        outbox.close();
    }
    if tokio::time::timeout(FLUSH_DEADLINE, &mut writer).await.is_err() {
        debug!(conn_id, "writer still blocked, aborting");
        writer.abort();
    }
}

async fn read_loop(
    mut rd: OwnedReadHalf,
    conn_id: u64,
    tx: &mpsc::Sender<Command>,
    outbox: &Outbox,
    subscribed: &AtomicBool,
    limits: &Limits,
) {
    let mut frames = FrameReader::new(limits.max_frame_bytes);
    let mut buf = vec![0u8; READ_BUFFER];
    let mut closed = outbox.closed_signal();
    let idle = Duration::from_secs(limits.idle_timeout_seconds);
    loop {
        let read = tokio::select! {
            r = tokio::time::timeout(idle, rd.read(&mut buf)) => r,
            _ = raised(&mut closed) => return,
        };
        let n = match read {
            Err(_) if subscribed.load(Ordering::Relaxed) => continue,
            Err(_) => {
                info!(conn_id, "idle timeout, closing");
                return;
            }
            Ok(Ok(0)) => return,
            Ok(Err(e)) => {
                debug!(conn_id, error = %e, "read failed");
                return;
            }
            Ok(Ok(n)) => n,
        };
        // A poisoned reader yields nothing more; the router closes the
        // connection after reporting the oversized frame.
        for r in frames.push(&buf[..n]) {
            let cmd = match r {
                Ok(msg) => Command::Frame { conn_id, msg },
                Err(err) => Command::BadFrame { conn_id, err },
            };
            if tx.send(cmd).await.is_err() {
                return;
            }
        }
    }
}

async fn write_loop(mut wr: OwnedWriteHalf, outbox: Arc<Outbox>) {
    while let Some(batch) = outbox.next_batch(WRITE_BATCH).await {
        if let Err(e) = wr.write_all(&batch).await {
            debug!(error = %e, "write failed");
            outbox.close();
            break;
        }
    }
    let _ = wr.shutdown().await;
}

struct ReplaySource {
    plan: ReplayPlan,
    cursor: ReplayCursor,
    next: Option<(Timestamp, Sample)>,
}

impl ReplaySource {
    fn advance(&mut self, now: Timestamp) {
        self.next = match replay_next(&self.plan, &mut self.cursor, now) {
            ReplayStep::Due { due, sample } => Some((due, sample)),
            ReplayStep::Exhausted => None,
        };
    }
}

/// One scheduler for every replayed device: always sleeps until the
/// earliest due sample, then hands it to the router.
async fn replay_loop(
    plans: Vec<(ReplayPlan, u64)>,
    clock: HubClock,
    tx: mpsc::Sender<Command>,
    mut shutdown: watch::Receiver<bool>,
) {
    let start = clock.now();
    let mut sources: Vec<ReplaySource> = plans
        .into_iter()
        .map(|(plan, delay_ms)| {
            let mut s = ReplaySource {
                plan,
                cursor: ReplayCursor::starting_at(start.saturating_add(delay_ms)),
                next: None,
            };
            s.advance(start);
            s
        })
        .collect();
    loop {
        let next = sources
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.next.as_ref().map(|(due, _)| (*due, i)))
            .min();
        let Some((due, i)) = next else { break };
        if due > clock.now() {
            tokio::select! {
                _ = tokio::time::sleep_until(clock.instant_at(due).into()) => {}
                _ = raised(&mut shutdown) => return,
            }
        }
        let (_, sample) = sources[i].next.take().expect("selected source has a sample");
        if tx.send(Command::Replay(sample)).await.is_err() {
            return;
        }
        sources[i].advance(clock.now());
    }
    if !sources.is_empty() {
        info!("replay finished");
    }
}

/// Resolves once the flag is set (or its sender is gone).
async fn raised(flag: &mut watch::Receiver<bool>) {
    let _ = flag.wait_for(|v| *v).await;
}
