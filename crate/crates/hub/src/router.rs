//! The routing actor. Owns the catalog, sessions, subscriptions, pipelines
//! and history; everything that mutates them runs on this one task.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;
use thalamus_core::dsp::{add_noise, stage_seed, validate_pipeline, NoiseRng, NoiseSpec, Pipeline, SeedContext, Stage};
use thalamus_core::sync::{extract_epoch, Epoch};
use thalamus_core::wire::{DataFrame, Hello, Role};
use thalamus_core::{
    encode_frame, validate_descriptor, Message, Sample, SignalDescriptor, SignalKey, Timestamp, TransformKind,
    TransformSpec, WireError,
};
use tokio::sync::mpsc;
use tracing::{debug, info, warn};

use crate::clock::HubClock;
use crate::outbox::Outbox;
use crate::stats::{HubStats, SessionEntry};

/// How often buffer-window delay stages are checked for expiry.
const FLUSH_TICK: Duration = Duration::from_millis(10);

/// Stage index used to seed hub-side injected noise, distinct from any
/// subscription stage index.
const INJECTED_NOISE_STAGE: usize = usize::MAX;

pub(crate) enum Command {
    Open {
        conn_id: u64,
        peer: String,
        outbox: Arc<Outbox>,
        subscribed: Arc<AtomicBool>,
    },
    Frame {
        conn_id: u64,
        msg: Message,
    },
    BadFrame {
        conn_id: u64,
        err: WireError,
    },
    Closed {
        conn_id: u64,
    },
    Replay(Sample),
    Shutdown,
}

#[derive(Debug, Clone)]
pub(crate) struct RouterConfig {
    pub admin_token: String,
    pub seed: u64,
    pub history_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Owner {
    Replay,
    Conn(u64),
    /// The registering connection went away.
    Orphan,
}

#[derive(Debug)]
struct Entry {
    descriptor: SignalDescriptor,
    owner: Owner,
    /// Set by `drop_device`, cleared by `resume_device`.
    dropped: bool,
}

impl Entry {
    fn live(&self) -> bool {
        !self.dropped && self.owner != Owner::Orphan
    }
}

struct Session {
    outbox: Arc<Outbox>,
    subscribed: Arc<AtomicBool>,
    peer: String,
    identity: String,
    hello: bool,
    client: bool,
    admin: bool,
    grants: BTreeSet<SignalKey>,
    subs: Vec<u64>,
}

struct Subscription {
    outbox: Arc<Outbox>,
    pipelines: BTreeMap<SignalKey, Pipeline>,
    buffered: bool,
}

#[derive(Default)]
struct Fault {
    latency_ms: u64,
    noise: Option<(NoiseSpec, NoiseRng)>,
}

struct Pending {
    deliver_at: Timestamp,
    seq: u64,
    sub: u64,
    frame: Vec<u8>,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        (self.deliver_at, self.seq) == (other.deliver_at, other.seq)
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.deliver_at, self.seq).cmp(&(other.deliver_at, other.seq))
    }
}

pub(crate) struct Router {
    clock: HubClock,
    cfg: RouterConfig,
    stats: Arc<HubStats>,
    catalog: BTreeMap<SignalKey, Entry>,
    sessions: BTreeMap<u64, Session>,
    subs: HashMap<u64, Subscription>,
    /// Subscription ids per signal, in subscription order.
    routes: HashMap<SignalKey, Vec<u64>>,
    faults: HashMap<SignalKey, Fault>,
    pending: BinaryHeap<Reverse<Pending>>,
    history: HashMap<SignalKey, VecDeque<Sample>>,
    next_sub: u64,
    seq: u64,
}

impl Router {
    pub(crate) fn new(clock: HubClock, cfg: RouterConfig, stats: Arc<HubStats>, replayed: Vec<SignalDescriptor>) -> Self {
        let catalog: BTreeMap<_, _> = replayed
            .into_iter()
            .map(|d| {
                (
                    d.key(),
                    Entry {
                        descriptor: d,
                        owner: Owner::Replay,
                        dropped: false,
                    },
                )
            })
            .collect();
        stats.catalog_size.store(catalog.len(), Ordering::Relaxed);
        Router {
            clock,
            cfg,
            stats,
            catalog,
            sessions: BTreeMap::new(),
            subs: HashMap::new(),
            routes: HashMap::new(),
            faults: HashMap::new(),
            pending: BinaryHeap::new(),
            history: HashMap::new(),
            next_sub: 1,
            seq: 0,
        }
    }

    pub(crate) async fn run(mut self, mut rx: mpsc::Receiver<Command>) {
        let mut tick = tokio::time::interval(FLUSH_TICK);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        loop {
            let wake = self
                .pending
                .peek()
                .map(|Reverse(p)| self.clock.instant_at(p.deliver_at));
            let buffered = self.subs.values().any(|s| s.buffered);
            tokio::select! {
                cmd = rx.recv() => match cmd {
                    None | Some(Command::Shutdown) => break,
                    Some(cmd) => {
                        self.release_due();
                        self.handle(cmd);
                    }
                },
                _ = sleep_until(wake), if wake.is_some() => self.release_due(),
                _ = tick.tick(), if buffered => self.flush_windows(),
            }
        }
        for s in self.sessions.values() {
            s.outbox.close();
        }
        debug!("router stopped");
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Open {
                conn_id,
                peer,
                outbox,
                subscribed,
            } => {
                self.sessions.insert(
                    conn_id,
                    Session {
                        outbox,
                        subscribed,
                        peer,
                        identity: String::new(),
                        hello: false,
                        client: false,
                        admin: false,
                        grants: BTreeSet::new(),
                        subs: Vec::new(),
                    },
                );
            }
            Command::Frame { conn_id, msg } => self.on_frame(conn_id, msg),
            Command::BadFrame { conn_id, err } => match err {
                WireError::FrameTooLarge { .. } => self.fail(conn_id, "FRAME_TOO_LARGE", &err.to_string(), true),
                _ => self.fail(conn_id, "DECODE", &err.to_string(), false),
            },
            Command::Closed { conn_id } => self.on_closed(conn_id),
            Command::Replay(sample) => {
                let now = self.clock.now();
                self.route(sample, now);
            }
            Command::Shutdown => {}
        }
    }

    fn send(&self, conn_id: u64, m: &Message) {
        if let Some(s) = self.sessions.get(&conn_id) {
            match encode_frame(m) {
                Ok(f) => s.outbox.push_control(f),
                Err(e) => warn!(conn_id, error = %e, "cannot encode reply"),
            }
        }
    }

    fn fail(&mut self, conn_id: u64, code: &str, message: &str, close: bool) {
        debug!(conn_id, code, message, "error reply");
        self.send(conn_id, &Message::error(code, message));
        if close {
            if let Some(s) = self.sessions.get(&conn_id) {
                s.outbox.close();
            }
        }
    }

    fn on_frame(&mut self, conn_id: u64, msg: Message) {
        let Some(session) = self.sessions.get(&conn_id) else {
            return;
        };
        if !session.hello && !matches!(msg, Message::Hello(_)) {
            let what = msg.type_name();
            self.fail(conn_id, "PROTOCOL", &format!("expected hello, got {what}"), true);
            return;
        }
        match msg {
            Message::Hello(h) => self.on_hello(conn_id, h),
            Message::Subscribe { selection, transforms } => self.on_subscribe(conn_id, selection, transforms),
            Message::Data(frame) => self.on_publish(conn_id, frame),
            Message::Control { action, params } => self.on_control(conn_id, &action, &params),
            other => {
                let what = other.type_name();
                self.fail(conn_id, "PROTOCOL", &format!("{what} frames are hub-to-client only"), false);
            }
        }
    }

    fn on_hello(&mut self, conn_id: u64, h: Hello) {
        let token = &self.cfg.admin_token;
        let suffix = format!("#{token}");
        let admin = !token.is_empty() && h.id.ends_with(&suffix);
        let identity = if admin {
            h.id[..h.id.len() - suffix.len()].to_string()
        } else {
            h.id.clone()
        };
        match h.role {
            Role::Client => {
                let s = self.sessions.get_mut(&conn_id).expect("session exists");
                s.hello = true;
                s.client = true;
                s.admin |= admin;
                s.identity = identity;
                self.register_session(conn_id);
                info!(conn_id, identity = %self.sessions[&conn_id].identity, admin, "client connected");
                let catalog = self.catalog_message();
                self.send(conn_id, &catalog);
            }
            Role::Device => self.on_device_hello(conn_id, h, identity, admin),
        }
    }

    fn on_device_hello(&mut self, conn_id: u64, h: Hello, identity: String, admin: bool) {
        for d in &h.signals {
            if let Err(e) = validate_descriptor(d) {
                self.fail(conn_id, "INVALID_DESCRIPTOR", &format!("{}: {e}", d.key()), false);
                return;
            }
        }
        let mut keys = BTreeSet::new();
        for d in &h.signals {
            let k = d.key();
            let taken = self.catalog.get(&k).is_some_and(|e| e.owner != Owner::Orphan);
            if taken || !keys.insert(k.clone()) {
                self.fail(conn_id, "DUP_SIGNAL", &format!("{k} is already registered"), false);
                return;
            }
        }
        let s = self.sessions.get_mut(&conn_id).expect("session exists");
        s.hello = true;
        s.admin |= admin;
        if s.identity.is_empty() {
            s.identity = identity;
        }
        s.grants.extend(keys.iter().cloned());
        for d in h.signals {
            self.catalog.insert(
                d.key(),
                Entry {
                    descriptor: d,
                    owner: Owner::Conn(conn_id),
                    dropped: false,
                },
            );
        }
        self.register_session(conn_id);
        info!(conn_id, identity = %self.sessions[&conn_id].identity, signals = keys.len(), "device registered");
        self.send(conn_id, &Message::ack("hello", true, format!("registered {}", keys.len())));
        if !keys.is_empty() {
            self.catalog_changed();
        }
    }

    fn register_session(&self, conn_id: u64) {
        let s = &self.sessions[&conn_id];
        let role = if s.admin {
            "admin"
        } else if s.client {
            "client"
        } else {
            "device"
        };
        self.stats.sessions.lock().unwrap().insert(
            conn_id,
            SessionEntry {
                identity: s.identity.clone(),
                role,
                outbox: s.outbox.clone(),
            },
        );
    }

    fn catalog_message(&self) -> Message {
        Message::Catalog {
            signals: self
                .catalog
                .values()
                .filter(|e| e.live())
                .map(|e| e.descriptor.clone())
                .collect(),
        }
    }

    fn catalog_changed(&self) {
        let live = self.catalog.values().filter(|e| e.live()).count();
        self.stats.catalog_size.store(live, Ordering::Relaxed);
        let Ok(frame) = encode_frame(&self.catalog_message()) else {
            return;
        };
        for s in self.sessions.values().filter(|s| s.client) {
            s.outbox.push_control(frame.clone());
        }
    }

    fn on_subscribe(&mut self, conn_id: u64, selection: Vec<SignalKey>, transforms: Vec<TransformSpec>) {
        let reject = |r: &Self, detail: String| {
            debug!(conn_id, %detail, "subscribe rejected");
            r.send(conn_id, &Message::ack("subscribe", false, detail));
        };
        if !self.sessions[&conn_id].client {
            return reject(self, "PROTOCOL: subscribe requires a client hello".into());
        }
        if selection.is_empty() {
            return reject(self, "UNKNOWN_SIGNAL: empty selection".into());
        }
        let unknown: Vec<String> = selection
            .iter()
            .filter(|k| !self.catalog.contains_key(k))
            .map(|k| k.to_string())
            .collect();
        if !unknown.is_empty() {
            return reject(self, format!("UNKNOWN_SIGNAL: {}", unknown.join(", ")));
        }
        let stages = match validate_pipeline(&transforms) {
            Ok(s) => s,
            Err(e) => return reject(self, format!("INVALID_PIPELINE: {e}")),
        };

        let id = self.next_sub;
        self.next_sub += 1;
        let unique: BTreeSet<SignalKey> = selection.into_iter().collect();
        let pipelines: BTreeMap<_, _> = unique
            .iter()
            .map(|k| {
                let ctx = SeedContext {
                    global_seed: self.cfg.seed,
                    device_id: &k.device_id,
                    signal: &k.signal,
                };
                (k.clone(), Pipeline::from_stages(&stages, ctx))
            })
            .collect();
        let buffered = pipelines.values().any(Pipeline::has_buffer_window);
        let s = self.sessions.get_mut(&conn_id).expect("session exists");
        s.outbox.add_queue(id);
        s.subs.push(id);
        s.subscribed.store(true, Ordering::Relaxed);
        let outbox = s.outbox.clone();
        for k in &unique {
            self.routes.entry(k.clone()).or_default().push(id);
        }
        self.subs.insert(
            id,
            Subscription {
                outbox,
                pipelines,
                buffered,
            },
        );
        info!(conn_id, subscription = id, signals = unique.len(), stages = stages.len(), "subscribed");
        self.send(conn_id, &Message::ack("subscribe", true, format!("subscription {id}")));
    }

    fn on_publish(&mut self, conn_id: u64, frame: DataFrame) {
        let sample = frame.into_sample();
        let key = sample.key();
        if !self.sessions[&conn_id].grants.contains(&key) {
            self.fail(conn_id, "NO_GRANT", &format!("no publish grant for {key}"), false);
            return;
        }
        let channels = self.catalog.get(&key).map(|e| e.descriptor.channels as usize);
        if channels != Some(sample.values.len()) {
            self.fail(
                conn_id,
                "BAD_SAMPLE",
                &format!("{key} expects {} values, got {}", channels.unwrap_or(0), sample.values.len()),
                false,
            );
            return;
        }
        let now = self.clock.now();
        self.route(sample, now);
    }

    fn on_closed(&mut self, conn_id: u64) {
        self.stats.sessions.lock().unwrap().remove(&conn_id);
        let Some(s) = self.sessions.remove(&conn_id) else {
            return;
        };
        s.outbox.close();
        for id in &s.subs {
            self.subs.remove(id);
        }
        if !s.subs.is_empty() {
            for ids in self.routes.values_mut() {
                ids.retain(|id| !s.subs.contains(id));
            }
        }
        let mut orphaned = false;
        for e in self.catalog.values_mut() {
            if e.owner == Owner::Conn(conn_id) {
                e.owner = Owner::Orphan;
                orphaned = true;
            }
        }
        info!(conn_id, peer = %s.peer, identity = %s.identity, "session closed");
        if orphaned {
            self.catalog_changed();
        }
    }

    fn remember(&mut self, s: &Sample) {
        let h = self.history.entry(s.key()).or_default();
        h.push_back(s.clone());
        let horizon = s.t.saturating_sub(self.cfg.history_ms);
        while h.front().is_some_and(|f| f.t < horizon) {
            h.pop_front();
        }
    }

    fn route(&mut self, mut sample: Sample, now: Timestamp) {
        let key = sample.key();
        if !self.catalog.get(&key).is_some_and(Entry::live) {
            self.stats.samples_discarded.fetch_add(1, Ordering::Relaxed);
            debug!(signal = %key, t = %sample.t, "discarded sample for unavailable signal");
            return;
        }
        self.stats.samples_in.fetch_add(1, Ordering::Relaxed);
        self.remember(&sample);
        let mut extra = 0;
        if let Some(f) = self.faults.get_mut(&key) {
            if let Some((spec, rng)) = &mut f.noise {
                for v in sample.values.iter_mut() {
                    *v = add_noise(*v, spec, rng);
                }
            }
            extra = f.latency_ms;
        }
        let Some(ids) = self.routes.get(&key) else {
            return;
        };
        let mut out = Vec::new();
        for &id in ids {
            let Some(sub) = self.subs.get_mut(&id) else { continue };
            if let Some(p) = sub.pipelines.get_mut(&key) {
                for d in p.apply(sample.clone(), now) {
                    out.push((id, d.deliver_at.saturating_add(extra), d.sample));
                }
            }
        }
        for (id, at, s) in out {
            self.dispatch(id, at, s, now);
        }
    }

    fn dispatch(&mut self, sub: u64, deliver_at: Timestamp, sample: Sample, now: Timestamp) {
        let frame = match encode_frame(&Message::data(sample)) {
            Ok(f) => f,
            Err(e) => {
                warn!(subscription = sub, error = %e, "dropping unencodable sample");
                return;
            }
        };
        if deliver_at <= now {
            self.enqueue(sub, frame);
        } else {
            self.seq += 1;
            self.pending.push(Reverse(Pending {
                deliver_at,
                seq: self.seq,
                sub,
                frame,
            }));
        }
    }

    fn enqueue(&self, sub: u64, frame: Vec<u8>) {
        let Some(s) = self.subs.get(&sub) else { return };
        if s.outbox.push_data(sub, frame) {
            self.stats.frames_dropped.fetch_add(1, Ordering::Relaxed);
            debug!(subscription = sub, "queue full, dropped oldest frame");
        }
        self.stats.frames_routed.fetch_add(1, Ordering::Relaxed);
    }

    fn release_due(&mut self) {
        let now = self.clock.now();
        while self.pending.peek().is_some_and(|Reverse(p)| p.deliver_at <= now) {
            let Reverse(p) = self.pending.pop().expect("peeked");
            self.enqueue(p.sub, p.frame);
        }
    }

    fn flush_windows(&mut self) {
        let now = self.clock.now();
        let mut out = Vec::new();
        for (&id, sub) in self.subs.iter_mut().filter(|(_, s)| s.buffered) {
            for (key, p) in sub.pipelines.iter_mut() {
                let extra = self.faults.get(key).map_or(0, |f| f.latency_ms);
                for d in p.flush(now) {
                    out.push((id, d.deliver_at.saturating_add(extra), d.sample));
                }
            }
        }
        for (id, at, s) in out {
            self.dispatch(id, at, s, now);
        }
    }

    fn on_control(&mut self, conn_id: u64, action: &str, params: &BTreeMap<String, Value>) {
        if !self.sessions[&conn_id].admin {
            self.fail(conn_id, "UNAUTHORIZED", &format!("{action} requires an admin session"), false);
            return;
        }
        let result = match action {
            "inject_delay" => self.inject_delay(params),
            "inject_noise" => self.inject_noise(params),
            "drop_device" => self.set_dropped(params, true),
            "resume_device" => self.set_dropped(params, false),
            "extract_epoch" => self.extract(conn_id, params),
            "stats" => serde_json::to_string(&self.stats.snapshot())
                .map_err(|e| ControlError::Bad(e.to_string())),
            other => Err(ControlError::Bad(format!("unknown action {other:?}"))),
        };
        match result {
            Ok(detail) => {
                info!(conn_id, action, "control applied");
                self.send(conn_id, &Message::ack("control", true, detail));
            }
            Err(ControlError::Bad(m)) => self.fail(conn_id, "BAD_CONTROL", &m, false),
            Err(ControlError::UnknownTarget(m)) => self.fail(conn_id, "UNKNOWN_TARGET", &m, false),
        }
    }

    /// Catalog keys selected by `device_id` and an optional `signal`.
    fn targets(&self, params: &BTreeMap<String, Value>) -> Result<Vec<SignalKey>, ControlError> {
        let device = str_param(params, "device_id")?;
        let signal = opt_str_param(params, "signal")?;
        let keys: Vec<SignalKey> = self
            .catalog
            .keys()
            .filter(|k| k.device_id == device && signal.is_none_or(|s| k.signal == s))
            .cloned()
            .collect();
        if keys.is_empty() {
            let what = match signal {
                Some(s) => format!("{device}/{s}"),
                None => device.to_string(),
            };
            return Err(ControlError::UnknownTarget(format!("no signal matches {what}")));
        }
        Ok(keys)
    }

    fn inject_delay(&mut self, params: &BTreeMap<String, Value>) -> Result<String, ControlError> {
        let latency = u64_param(params, "latency_ms")?;
        let keys = self.targets(params)?;
        for k in &keys {
            self.faults.entry(k.clone()).or_default().latency_ms = latency;
        }
        Ok(format!("inject_delay latency_ms={latency} on {} signal(s)", keys.len()))
    }

    fn inject_noise(&mut self, params: &BTreeMap<String, Value>) -> Result<String, ControlError> {
        let mut spec = TransformSpec::new(TransformKind::Noise);
        for name in ["kind", "amplitude", "seed"] {
            if let Some(v) = params.get(name) {
                spec.params.insert(name.to_string(), v.clone());
            }
        }
        let noise = match Stage::from_spec(&spec) {
            Ok(Stage::Noise(n)) => n,
            Ok(_) => unreachable!("noise spec yields a noise stage"),
            Err(e) => return Err(ControlError::Bad(e.to_string())),
        };
        let keys = self.targets(params)?;
        for k in &keys {
            let seed = stage_seed(
                noise.seed.unwrap_or(self.cfg.seed),
                &k.device_id,
                &k.signal,
                INJECTED_NOISE_STAGE,
            );
            self.faults.entry(k.clone()).or_default().noise = Some((noise, NoiseRng::seeded(seed)));
        }
        Ok(format!("inject_noise on {} signal(s)", keys.len()))
    }

    fn set_dropped(&mut self, params: &BTreeMap<String, Value>, dropped: bool) -> Result<String, ControlError> {
        if params.contains_key("signal") {
            return Err(ControlError::Bad("drop/resume act on whole devices; omit signal".into()));
        }
        let keys = self.targets(params)?;
        for k in &keys {
            if let Some(e) = self.catalog.get_mut(k) {
                e.dropped = dropped;
            }
        }
        self.catalog_changed();
        let verb = if dropped { "dropped" } else { "resumed" };
        Ok(format!("{verb} {} signal(s)", keys.len()))
    }

    fn extract(&mut self, conn_id: u64, params: &BTreeMap<String, Value>) -> Result<String, ControlError> {
        let t0 = Timestamp(u64_param(params, "t0")?);
        let t1 = Timestamp(u64_param(params, "t1")?);
        let label = opt_str_param(params, "label")?.unwrap_or("").to_string();
        let epoch = Epoch::new(t0, t1, label.clone()).map_err(|e| ControlError::Bad(e.to_string()))?;
        let keys = self.targets(params)?;
        let mut n = 0;
        for k in &keys {
            let Some(h) = self.history.get(k) else { continue };
            let snapshot: Vec<Sample> = h.iter().cloned().collect();
            for s in extract_epoch(&snapshot, &epoch) {
                let mut frame = DataFrame::from(s);
                frame.epoch = Some(label.clone());
                self.send(conn_id, &Message::Data(frame));
                n += 1;
            }
        }
        Ok(format!("extract_epoch samples={n}"))
    }
}

enum ControlError {
    Bad(String),
    UnknownTarget(String),
}

fn str_param<'a>(params: &'a BTreeMap<String, Value>, name: &str) -> Result<&'a str, ControlError> {
    opt_str_param(params, name)?.ok_or_else(|| ControlError::Bad(format!("missing param {name}")))
}

fn opt_str_param<'a>(params: &'a BTreeMap<String, Value>, name: &str) -> Result<Option<&'a str>, ControlError> {
    match params.get(name) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(ControlError::Bad(format!("param {name} must be a string"))),
    }
}

fn u64_param(params: &BTreeMap<String, Value>, name: &str) -> Result<u64, ControlError> {
    params
        .get(name)
        .ok_or_else(|| ControlError::Bad(format!("missing param {name}")))?
        .as_u64()
        .ok_or_else(|| ControlError::Bad(format!("param {name} must be a non-negative integer")))
}

async fn sleep_until(at: Option<std::time::Instant>) {
    match at {
        Some(at) => tokio::time::sleep_until(at.into()).await,
        None => std::future::pending().await,
    }
}
