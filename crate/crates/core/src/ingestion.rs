//! Open-loop request intake and the FIFO backlog feeding the worker.
//!
//! `ingest` never waits on processing: it assigns the next request id, pushes
//! onto the tail and returns. Many producers, one consumer.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::domain::{Payload, Request};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("no experiment is accepting requests")]
    NotRunning,
    #[error("backlog full, request dropped")]
    Dropped,
    #[error("spilling payload failed: {0}")]
    Spill(String),
}

/// Point-in-time counter values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BacklogCounters {
    pub accepted_total: u64,
    pub dequeued_total: u64,
    pub dropped_total: u64,
    pub depth: usize,
}

impl BacklogCounters {
    /// accepted = dequeued + depth + dropped
    pub fn conserved(&self) -> bool {
        self.accepted_total == self.dequeued_total + self.depth as u64 + self.dropped_total
    }
}

#[derive(Debug, Clone)]
struct Spill {
    dir: PathBuf,
    threshold: usize,
}

#[derive(Debug, Default)]
struct Inner {
    queue: VecDeque<Request>,
    next_id: u64,
    accepted_total: u64,
    dequeued_total: u64,
    dropped_total: u64,
    open: bool,
    /// Arrival times of recent accepted requests, oldest first.
    arrivals: VecDeque<f64>,
}

/// Arrivals older than this (seconds, relative to the newest) are forgotten.
const ARRIVAL_HORIZON: f64 = 300.0;

#[derive(Debug)]
pub struct Backlog {
    inner: Mutex<Inner>,
    ready: Condvar,
    capacity: Option<usize>,
    spill: Option<Spill>,
}

impl Default for Backlog {
    fn default() -> Self {
        Self::new(None)
    }
}

impl Backlog {
    /// An open backlog. `capacity` of `None` means unbounded.
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            inner: Mutex::new(Inner {
                next_id: 1,
                open: true,
                ..Inner::default()
            }),
            ready: Condvar::new(),
            capacity,
            spill: None,
        }
    }

    /// Payloads larger than `threshold` bytes are written under `dir` and
    /// held by path.
    pub fn with_spill(mut self, dir: impl Into<PathBuf>, threshold: usize) -> Self {
        self.spill = Some(Spill {
            dir: dir.into(),
            threshold,
        });
        self
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// Stops accepting new requests. Queued requests stay dequeueable.
    pub fn close(&self) {
        self.inner.lock().open = false;
        self.ready.notify_all();
    }

    pub fn reopen(&self) {
        self.inner.lock().open = true;
    }

    pub fn is_open(&self) -> bool {
        self.inner.lock().open
    }

    /// Appends a request at the tail and returns its id.
    pub fn ingest(&self, payload: Payload, now: f64) -> Result<u64, IngestError> {
        let mut inner = self.inner.lock();
        if !inner.open {
            return Err(IngestError::NotRunning);
        }
        let id = inner.next_id;
        inner.next_id += 1;
        inner.accepted_total += 1;
        inner.arrivals.push_back(now);
        while inner
            .arrivals
            .front()
            .is_some_and(|&t| now - t > ARRIVAL_HORIZON)
        {
            inner.arrivals.pop_front();
        }
        if self.capacity.is_some_and(|cap| inner.queue.len() >= cap) {
            inner.dropped_total += 1;
            return Err(IngestError::Dropped);
        }
        let payload = match (&self.spill, payload) {
            (Some(spill), Payload::Inline { bytes }) if bytes.len() > spill.threshold => {
                let path = spill.dir.join(format!("req-{id}.bin"));
                // Writing under the lock keeps id order equal to queue order.
                if let Err(e) =
                    fs::create_dir_all(&spill.dir).and_then(|_| fs::write(&path, &bytes))
                {
                    inner.dropped_total += 1;
                    return Err(IngestError::Spill(e.to_string()));
                }
                Payload::Spilled {
                    path,
                    len: bytes.len() as u64,
                }
            }
            (_, p) => p,
        };
        inner.queue.push_back(Request {
            request_id: id,
            payload,
            arrival_time: now,
            enqueue_time: now,
            start_time: None,
            finish_time: None,
        });
        drop(inner);
        self.ready.notify_one();
        Ok(id)
    }

    /// Removes the head of the queue and stamps its start time.
    pub fn dequeue_oldest(&self, now: f64) -> Option<Request> {
        let mut inner = self.inner.lock();
        let mut req = inner.queue.pop_front()?;
        inner.dequeued_total += 1;
        req.start_time = Some(now.max(req.enqueue_time));
        Some(req)
    }

    /// Like [`dequeue_oldest`](Self::dequeue_oldest) but waits up to
    /// `timeout` for a request to arrive. `now` is evaluated after waking.
    pub fn dequeue_wait(&self, timeout: Duration, now: impl Fn() -> f64) -> Option<Request> {
        let mut inner = self.inner.lock();
        if inner.queue.is_empty() && inner.open {
            self.ready.wait_for(&mut inner, timeout);
        }
        let mut req = inner.queue.pop_front()?;
        inner.dequeued_total += 1;
        req.start_time = Some(now().max(req.enqueue_time));
        Some(req)
    }

    pub fn queue_depth(&self) -> usize {
        self.inner.lock().queue.len()
    }

    pub fn counters(&self) -> BacklogCounters {
        let inner = self.inner.lock();
        BacklogCounters {
            accepted_total: inner.accepted_total,
            dequeued_total: inner.dequeued_total,
            dropped_total: inner.dropped_total,
            depth: inner.queue.len(),
        }
    }

    /// Accepted arrivals with time in `(from, to]`, dropped ones included.
    pub fn arrivals_between(&self, from: f64, to: f64) -> usize {
        let inner = self.inner.lock();
        inner
            .arrivals
            .iter()
            .rev()
            .skip_while(|&&t| t > to)
            .take_while(|&&t| t > from)
            .count()
    }
}

/// Reads the bytes of a payload back, following spill paths.
pub fn load_payload(payload: &Payload) -> std::io::Result<Vec<u8>> {
    match payload {
        Payload::Inline { bytes } => Ok(bytes.clone()),
        Payload::Spilled { path, .. } => fs::read(path),
        Payload::Synthetic { len } => Ok(vec![0; *len as usize]),
    }
}

/// Deletes the spill file behind a payload, if any.
pub fn release_payload(payload: &Payload) {
    if let Payload::Spilled { path, .. } = payload {
        let _ = fs::remove_file(path);
    }
}

/// Length actually present for a payload: spilled files are stat'ed.
pub fn payload_len(payload: &Payload) -> std::io::Result<u64> {
    match payload {
        Payload::Spilled { path, .. } => Ok(fs::metadata(Path::new(path))?.len()),
        p => Ok(p.len()),
    }
}
