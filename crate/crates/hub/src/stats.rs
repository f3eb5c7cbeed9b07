use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::outbox::Outbox;

/// Counters shared between the router (writer) and `stats()` readers.
#[derive(Debug)]
pub struct HubStats {
    started: Instant,
    pub(crate) samples_in: AtomicU64,
    pub(crate) samples_discarded: AtomicU64,
    pub(crate) frames_routed: AtomicU64,
    pub(crate) frames_dropped: AtomicU64,
    pub(crate) catalog_size: AtomicUsize,
    pub(crate) sessions: Mutex<BTreeMap<u64, SessionEntry>>,
}

#[derive(Debug, Clone)]
pub(crate) struct SessionEntry {
    pub identity: String,
    pub role: &'static str,
    pub outbox: Arc<Outbox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub conn_id: u64,
    pub identity: String,
    pub role: String,
    pub subscriptions: usize,
    pub queue_depth: usize,
    pub frames_enqueued: u64,
    pub drop_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub uptime_ms: u64,
    pub catalog_size: usize,
    /// Samples accepted for routing (replayed or published).
    pub samples_in: u64,
    /// Samples discarded because their signal was unknown or dropped.
    pub samples_discarded: u64,
    /// Data frames enqueued to subscriptions.
    pub frames_routed: u64,
    /// Frames evicted from full queues, including those of closed sessions.
    pub frames_dropped: u64,
    pub sessions: Vec<SessionStats>,
}

impl StatsSnapshot {
    pub fn total_drops(&self) -> u64 {
        self.sessions.iter().map(|s| s.drop_count).sum()
    }

    pub fn session(&self, identity: &str) -> Option<&SessionStats> {
        self.sessions.iter().find(|s| s.identity == identity)
    }
}

impl HubStats {
    pub(crate) fn new(started: Instant) -> Self {
        HubStats {
            started,
            samples_in: AtomicU64::new(0),
            samples_discarded: AtomicU64::new(0),
            frames_routed: AtomicU64::new(0),
            frames_dropped: AtomicU64::new(0),
            catalog_size: AtomicUsize::new(0),
            sessions: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        let sessions = self.sessions.lock().unwrap().clone();
        let sessions = sessions
            .into_iter()
            .map(|(conn_id, e)| {
                let qs = e.outbox.stats();
                SessionStats {
                    conn_id,
                    identity: e.identity,
                    role: e.role.to_string(),
                    subscriptions: qs.len(),
                    queue_depth: qs.iter().map(|q| q.depth).sum::<usize>() + e.outbox.control_depth(),
                    frames_enqueued: qs.iter().map(|q| q.enqueued).sum(),
                    drop_count: qs.iter().map(|q| q.drop_count).sum(),
                }
            })
            .collect();
        StatsSnapshot {
            uptime_ms: self.started.elapsed().as_millis() as u64,
            catalog_size: self.catalog_size.load(Ordering::Relaxed),
            samples_in: self.samples_in.load(Ordering::Relaxed),
            samples_discarded: self.samples_discarded.load(Ordering::Relaxed),
            frames_routed: self.frames_routed.load(Ordering::Relaxed),
            frames_dropped: self.frames_dropped.load(Ordering::Relaxed),
            sessions,
        }
    }
}
