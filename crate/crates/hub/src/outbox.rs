//! Per-connection outbound buffering.
//!
//! Control frames (acks, catalogs, errors) are never dropped and always go
//! out before data. Data frames sit in one bounded queue per subscription;
//! a full queue evicts its oldest frame.

use std::collections::VecDeque;
use std::sync::Mutex;

use serde::Serialize;
use tokio::sync::{watch, Notify};

#[derive(Debug)]
struct SubQueue {
    id: u64,
    frames: VecDeque<Vec<u8>>,
    enqueued: u64,
    drops: u64,
}

#[derive(Debug, Default)]
struct State {
    control: VecDeque<Vec<u8>>,
    queues: Vec<SubQueue>,
    rr: usize,
    closing: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    pub subscription: u64,
    pub depth: usize,
    pub enqueued: u64,
    pub drop_count: u64,
}

#[derive(Debug)]
pub struct Outbox {
    capacity: usize,
    state: Mutex<State>,
    wake: Notify,
    closed: watch::Sender<bool>,
}

impl Outbox {
    pub fn new(capacity: usize) -> Self {
        Outbox {
            capacity: capacity.max(1),
            state: Mutex::new(State::default()),
            wake: Notify::new(),
            closed: watch::Sender::new(false),
        }
    }

    pub fn push_control(&self, frame: Vec<u8>) {
        let mut st = self.state.lock().unwrap();
        if st.closing {
            return;
        }
        st.control.push_back(frame);
        drop(st);
        self.wake.notify_one();
    }

    pub fn add_queue(&self, id: u64) {
        let mut st = self.state.lock().unwrap();
        st.queues.push(SubQueue {
            id,
            frames: VecDeque::new(),
            enqueued: 0,
            drops: 0,
        });
    }

    /// Enqueues a data frame; returns true if an older frame was evicted.
    pub fn push_data(&self, id: u64, frame: Vec<u8>) -> bool {
        let mut st = self.state.lock().unwrap();
        if st.closing {
            return false;
        }
        let Some(q) = st.queues.iter_mut().find(|q| q.id == id) else {
            return false;
        };
        let mut dropped = false;
        if q.frames.len() >= self.capacity {
            q.frames.pop_front();
            q.drops += 1;
            dropped = true;
        }
        q.frames.push_back(frame);
        q.enqueued += 1;
        drop(st);
        self.wake.notify_one();
        dropped
    }

    /// Stops accepting frames. Already queued frames are still handed to the
    /// writer.
    pub fn close(&self) {
        self.state.lock().unwrap().closing = true;
        self.closed.send_replace(true);
        self.wake.notify_one();
    }

    pub fn is_closed(&self) -> bool {
        *self.closed.borrow()
    }

    pub fn closed_signal(&self) -> watch::Receiver<bool> {
        self.closed.subscribe()
    }

    /// Up to `max` frames concatenated, control frames first.
    /// `Some(empty)` means nothing is ready; `None` means closed and drained.
    fn take(&self, max: usize) -> Option<Vec<u8>> {
        let mut st = self.state.lock().unwrap();
        let mut out = Vec::new();
        let mut n = 0;
        while n < max {
            let Some(f) = st.control.pop_front() else { break };
            out.extend_from_slice(&f);
            n += 1;
        }
        let nq = st.queues.len();
        if nq > 0 {
            // Round-robin across subscriptions so one busy queue cannot
            // starve the others.
            let mut idle = 0;
            while n < max && idle < nq {
                let i = st.rr % nq;
                st.rr = st.rr.wrapping_add(1);
                match st.queues[i].frames.pop_front() {
                    Some(f) => {
                        out.extend_from_slice(&f);
                        n += 1;
                        idle = 0;
                    }
                    None => idle += 1,
                }
            }
        }
        if n == 0 && st.closing {
            return None;
        }
        Some(out)
    }

    /// Waits for the next batch of encoded frames. Returns `None` once the
    /// outbox is closed and everything queued has been taken.
    pub async fn next_batch(&self, max: usize) -> Option<Vec<u8>> {
        loop {
            let batch = self.take(max)?;
            if !batch.is_empty() {
                return Some(batch);
            }
            self.wake.notified().await;
        }
    }

    pub fn stats(&self) -> Vec<QueueStats> {
        let st = self.state.lock().unwrap();
        st.queues
            .iter()
            .map(|q| QueueStats {
                subscription: q.id,
                depth: q.frames.len(),
                enqueued: q.enqueued,
                drop_count: q.drops,
            })
            .collect()
    }

    pub fn control_depth(&self) -> usize {
        self.state.lock().unwrap().control.len()
    }
}
