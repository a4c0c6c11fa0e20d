//! The request processor shared by both clock modes.
//!
//! Processing is split into [`Processor::begin`] (decode, read the active
//! model once, infer) and [`Processor::complete`] (post-process and build the
//! records), so the discrete-event engine can place the finish on its own
//! clock while the real-time worker simply sleeps in between.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};

use crate::domain::{ClassFilter, MetricsRecord, Request};
use crate::ingestion::{load_payload, payload_len, release_payload};
use crate::knowledge::{IndexName, Knowledge, KnowledgeError};

use super::executor::ExternalExecutor;
use super::inference::{compute_utility, infer, postprocess, request_rng, RawDetections};
use super::repository::{ActiveModel, Repository};

#[derive(Debug, Clone)]
pub struct WorkerSettings {
    pub seed: u64,
    pub confidence_threshold: f64,
    pub class_filter: ClassFilter,
    pub class_universe: u32,
    pub target_response_time: f64,
    /// Added to experiment-clock times to form record timestamps.
    pub epoch: f64,
}

#[derive(Debug, Default)]
pub enum Backend {
    #[default]
    Simulated,
    External(ExternalExecutor),
}

/// A request between `begin` and `complete`.
#[derive(Debug, Clone)]
pub struct InFlight {
    pub request: Request,
    pub active: ActiveModel,
    pub raw: RawDetections,
    pub depth_at_start: usize,
    payload_bytes: Option<u64>,
}

impl InFlight {
    pub fn start_time(&self) -> f64 {
        self.request.start_time.unwrap_or(self.request.enqueue_time)
    }

    /// How long the model occupies the worker.
    pub fn service_time(&self) -> f64 {
        self.raw.sampled_latency
    }
}

/// Output of one processed request.
#[derive(Debug, Clone)]
pub struct Completed {
    pub record: MetricsRecord,
    pub log: Value,
}

pub struct Processor {
    repo: Arc<Repository>,
    settings: WorkerSettings,
    backend: Backend,
    processed: u64,
}

impl Processor {
    pub fn new(repo: Arc<Repository>, settings: WorkerSettings, backend: Backend) -> Self {
        Self {
            repo,
            settings,
            backend,
            processed: 0,
        }
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn repository(&self) -> &Arc<Repository> {
        &self.repo
    }

    /// Decodes the payload and runs inference under the model active right
    /// now. Later switches do not affect this request.
    pub fn begin(&mut self, request: Request, depth_at_start: usize) -> InFlight {
        let payload_bytes = payload_len(&request.payload).ok();
        let active = self.repo.active();
        let raw = match &mut self.backend {
            Backend::Simulated => {
                let mut rng =
                    request_rng(self.settings.seed, request.request_id, active.model.id());
                infer(&active.model, &mut rng, self.settings.class_universe)
            }
            Backend::External(exec) => {
                let bytes = load_payload(&request.payload).unwrap_or_default();
                match exec.infer(
                    request.request_id,
                    &active.model.profile.display_name,
                    &bytes,
                ) {
                    Ok(raw) => raw,
                    Err(e) => {
                        tracing::warn!(
                            request_id = request.request_id,
                            "external executor failed: {e}"
                        );
                        RawDetections {
                            entries: Vec::new(),
                            sampled_latency: f64::MIN_POSITIVE,
                        }
                    }
                }
            }
        };
        InFlight {
            request,
            active,
            raw,
            depth_at_start,
            payload_bytes,
        }
    }

    /// Post-processes and builds the metrics record and verbose log entry.
    pub fn complete(&mut self, flight: InFlight, finish_time: f64) -> Completed {
        let InFlight {
            mut request,
            active,
            raw,
            depth_at_start,
            payload_bytes,
        } = flight;
        let s = &self.settings;
        self.processed += 1;
        let start_time = request.start_time.unwrap_or(request.enqueue_time);
        let finish_time = finish_time.max(start_time);
        request.finish_time = Some(finish_time);
        release_payload(&request.payload);

        let result = postprocess(&raw, s.confidence_threshold, &s.class_filter);
        let model_processing_time = raw.sampled_latency;
        // Rounding in start + latency - arrival must not undercut the latency.
        let total_time = (finish_time - request.arrival_time).max(model_processing_time);
        let utility = compute_utility(total_time, result.avg_confidence, s.target_response_time);
        let profile = &active.model.profile;

        let record = MetricsRecord {
            log_id: 0,
            timestamp: s.epoch + finish_time,
            request_no: self.processed,
            request_id: request.request_id,
            model_name: profile.id.clone(),
            model_generation: active.generation,
            model_processing_time,
            total_time,
            absolute_time: finish_time,
            arrival_time: request.arrival_time,
            start_time,
            finish_time,
            utility,
            kept_count: result.kept_count,
            avg_confidence: result.avg_confidence,
            queue_depth_at_start: depth_at_start,
            cpu_load: Some(profile.cpu_cost),
        };
        let expected = request.payload.len();
        let log = json!({
            "timestamp": record.timestamp,
            "event": "processed",
            "request_id": request.request_id,
            "request_no": self.processed,
            "model": profile.id,
            "model_display_name": profile.display_name,
            "payload_bytes": payload_bytes,
            "payload_ok": payload_bytes == Some(expected),
            "raw_count": result.raw.len(),
            "kept_count": result.kept_count,
            "avg_confidence": result.avg_confidence,
            "sampled_latency": model_processing_time,
            "queue_wait": start_time - request.arrival_time,
            "total_time": total_time,
            "kept": result.kept.iter().map(|d| json!([d.class_id, d.confidence])).collect::<Vec<_>>(),
        });
        Completed { record, log }
    }
}

/// Destination for processed results.
pub trait MetricsSink: Send + Sync {
    /// Stores the record durably, then the verbose log best-effort.
    fn store(&self, record: &MetricsRecord, log: &Value) -> Result<u64, KnowledgeError>;
}

impl MetricsSink for Knowledge {
    fn store(&self, record: &MetricsRecord, log: &Value) -> Result<u64, KnowledgeError> {
        let log_id = self.append_metrics(record)?;
        if let Err(e) = self.append(IndexName::NewLogs, log.clone()) {
            tracing::warn!("verbose log lost for request {}: {e}", record.request_id);
        }
        Ok(log_id)
    }
}

/// Bounded hand-off between the worker and the knowledge store.
///
/// While the sink refuses writes the writer thread retries with backoff; once
/// the buffer is full `submit` blocks, pushing back on the worker instead of
/// dropping records.
pub struct ResultStorage {
    tx: Option<SyncSender<Completed>>,
    writer: Option<JoinHandle<u64>>,
    closing: Arc<AtomicBool>,
}

/// Attempts per record once shutdown has begun and the sink still fails.
const SHUTDOWN_RETRIES: u32 = 50;

impl ResultStorage {
    pub fn spawn(sink: Arc<dyn MetricsSink>, capacity: usize, retry: Duration) -> Self {
        let (tx, rx) = sync_channel::<Completed>(capacity.max(1));
        let closing = Arc::new(AtomicBool::new(false));
        let flag = closing.clone();
        let writer = std::thread::Builder::new()
            .name("result-storage".into())
            .spawn(move || {
                let mut stored = 0u64;
                for item in rx {
                    let mut backoff = retry;
                    let mut attempts = 0u32;
                    loop {
                        match sink.store(&item.record, &item.log) {
                            Ok(_) => {
                                stored += 1;
                                break;
                            }
                            Err(e) => {
                                attempts += 1;
                                if flag.load(Ordering::Acquire) && attempts >= SHUTDOWN_RETRIES {
                                    tracing::error!(
                                        request_id = item.record.request_id,
                                        "giving up on record after shutdown: {e}"
                                    );
                                    break;
                                }
                                tracing::warn!("sink unavailable, retrying: {e}");
                                std::thread::sleep(backoff);
                                backoff = (backoff * 2).min(Duration::from_secs(1));
                            }
                        }
                    }
                }
                stored
            })
            .expect("spawn result-storage thread");
        Self {
            tx: Some(tx),
            writer: Some(writer),
            closing,
        }
    }

    /// Queues a result, blocking while the buffer is full.
    pub fn submit(&self, item: Completed) {
        if let Some(tx) = &self.tx {
            // the writer only exits after tx is dropped
            let _ = tx.send(item);
        }
    }

    /// Flushes everything queued and returns the number of records stored.
    pub fn close(mut self) -> u64 {
        self.shutdown()
    }

    fn shutdown(&mut self) -> u64 {
        self.closing.store(true, Ordering::Release);
        self.tx.take();
        self.writer
            .take()
            .map(|h| h.join().unwrap_or(0))
            .unwrap_or(0)
    }
}

impl Drop for ResultStorage {
    fn drop(&mut self) {
        self.shutdown();
    }
}
