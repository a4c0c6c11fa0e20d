//! The K of MAPE-K: two append-only indexes, online model statistics and the
//! current adaptation rules.
//!
//! `final_metrics` holds one [`MetricsRecord`] per processed request;
//! `new_logs` holds verbose per-request documents plus control-plane events
//! (decisions, switches, rule changes). Readers always see a prefix of each
//! index.

mod index;
pub mod stats;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::{KnowledgeState, MetricsRecord, StrategySpec};

pub use index::IndexStore;
pub use stats::{update_model_stats, DEFAULT_HALF_LIFE};

#[derive(Debug, thiserror::Error)]
pub enum KnowledgeError {
    #[error("unknown index {0:?}")]
    UnknownIndex(String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("field {0:?} has no numeric value in the selected documents")]
    NoNumericField(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("invalid adaptation rules: {0}")]
    InvalidSpec(String),
    #[error("documents must be JSON objects")]
    NotAnObject,
    #[error("corrupt index data: {0}")]
    Corrupt(String),
    #[error("n must be at least 1")]
    ZeroCount,
}

impl KnowledgeError {
    fn storage(e: std::io::Error) -> Self {
        KnowledgeError::StorageFailure(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexName {
    NewLogs,
    FinalMetrics,
}

impl IndexName {
    pub fn as_str(self) -> &'static str {
        match self {
            IndexName::NewLogs => "new_logs",
            IndexName::FinalMetrics => "final_metrics",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            IndexName::NewLogs => "new_logs.jsonl",
            IndexName::FinalMetrics => "final_metrics.jsonl",
        }
    }
}

impl fmt::Display for IndexName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IndexName {
    type Err = KnowledgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "new_logs" => Ok(IndexName::NewLogs),
            "final_metrics" => Ok(IndexName::FinalMetrics),
            other => Err(KnowledgeError::UnknownIndex(other.to_string())),
        }
    }
}

/// Mean of one field over a selection of documents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldMean {
    pub mean: f64,
    pub sample_count: usize,
}

/// Equality filter for [`Knowledge::query_window`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFilter {
    pub field: String,
    pub value: Value,
}

/// Checks a strategy spec before it is stored.
pub type RulesValidator = Box<dyn Fn(&StrategySpec) -> Result<(), String> + Send + Sync>;

pub const CONFIG_FILE: &str = "config.toml";

pub struct Knowledge {
    new_logs: RwLock<IndexStore>,
    final_metrics: RwLock<IndexStore>,
    state: Mutex<KnowledgeState>,
    validator: Option<RulesValidator>,
    dir: Option<PathBuf>,
}

impl fmt::Debug for Knowledge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Knowledge")
            .field("dir", &self.dir)
            .field("new_logs", &self.new_logs.read().len())
            .field("final_metrics", &self.final_metrics.read().len())
            .finish()
    }
}

impl Knowledge {
    pub fn in_memory(state: KnowledgeState) -> Self {
        Self {
            new_logs: RwLock::new(IndexStore::in_memory(IndexName::NewLogs)),
            final_metrics: RwLock::new(IndexStore::in_memory(IndexName::FinalMetrics)),
            state: Mutex::new(state),
            validator: None,
            dir: None,
        }
    }

    /// Opens both index files under `dir`, replaying whatever they hold.
    /// With `sync` every append is fsync'ed before it is acknowledged.
    pub fn persistent(
        dir: impl AsRef<Path>,
        state: KnowledgeState,
        sync: bool,
    ) -> Result<Self, KnowledgeError> {
        let dir = dir.as_ref();
        Ok(Self {
            new_logs: RwLock::new(IndexStore::open(IndexName::NewLogs, dir, sync)?),
            final_metrics: RwLock::new(IndexStore::open(IndexName::FinalMetrics, dir, sync)?),
            state: Mutex::new(state),
            validator: None,
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn with_validator(mut self, validator: RulesValidator) -> Self {
        self.validator = Some(validator);
        self
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn store(&self, index: IndexName) -> &RwLock<IndexStore> {
        match index {
            IndexName::NewLogs => &self.new_logs,
            IndexName::FinalMetrics => &self.final_metrics,
        }
    }

    pub fn append(&self, index: IndexName, doc: Value) -> Result<u64, KnowledgeError> {
        self.store(index).write().append(doc)
    }

    /// Appends a metrics record and folds it into the model statistics.
    pub fn append_metrics(&self, record: &MetricsRecord) -> Result<u64, KnowledgeError> {
        let doc =
            serde_json::to_value(record).map_err(|e| KnowledgeError::Corrupt(e.to_string()))?;
        let mut store = self.final_metrics.write();
        let mut state = self.state.lock();
        if !state.models.contains_key(&record.model_name) {
            return Err(KnowledgeError::UnknownModel(record.model_name.clone()));
        }
        let log_id = store.append(doc)?;
        let half_life = half_life_of(&state.rules);
        update_model_stats(&mut state, record, half_life)?;
        Ok(log_id)
    }

    pub fn len(&self, index: IndexName) -> usize {
        self.store(index).read().len()
    }

    pub fn is_empty(&self, index: IndexName) -> bool {
        self.len(index) == 0
    }

    /// Averages each field over the `n` newest documents that contain it.
    pub fn fetch_latest(
        &self,
        index: IndexName,
        fields: &[&str],
        n: usize,
    ) -> Result<BTreeMap<String, FieldMean>, KnowledgeError> {
        if n == 0 {
            return Err(KnowledgeError::ZeroCount);
        }
        let store = self.store(index).read();
        let mut out = BTreeMap::new();
        for &field in fields {
            let (sum, count) = store
                .latest(n)
                .filter_map(|d| d.get(field).and_then(Value::as_f64))
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                return Err(KnowledgeError::NoNumericField(field.to_string()));
            }
            out.insert(
                field.to_string(),
                FieldMean {
                    mean: sum / count as f64,
                    sample_count: count,
                },
            );
        }
        Ok(out)
    }

    /// Documents with `from <= timestamp < to`, in log_id order.
    pub fn query_window(
        &self,
        index: IndexName,
        from: f64,
        to: f64,
        filter: Option<&FieldFilter>,
    ) -> Vec<Value> {
        let store = self.store(index).read();
        store
            .docs()
            .iter()
            .filter(|d| {
                d.get("timestamp")
                    .and_then(Value::as_f64)
                    .is_some_and(|t| from <= t && t < to)
            })
            .filter(|d| filter.is_none_or(|f| d.get(&f.field) == Some(&f.value)))
            .cloned()
            .collect()
    }

    /// The newest `n` documents, newest first.
    pub fn latest_docs(&self, index: IndexName, n: usize) -> Vec<Value> {
        self.store(index).read().latest(n).cloned().collect()
    }

    /// All documents in log_id order.
    pub fn docs(&self, index: IndexName) -> Vec<Value> {
        self.store(index).read().docs().to_vec()
    }

    pub fn metrics_records(&self) -> Result<Vec<MetricsRecord>, KnowledgeError> {
        self.final_metrics
            .read()
            .docs()
            .iter()
            .map(|d| {
                serde_json::from_value(d.clone())
                    .map_err(|e| KnowledgeError::Corrupt(e.to_string()))
            })
            .collect()
    }

    pub fn index_bytes(&self, index: IndexName) -> Vec<u8> {
        self.store(index).read().to_bytes()
    }

    pub fn get_adaptation_rules(&self) -> StrategySpec {
        self.state.lock().rules.clone()
    }

    /// Replaces the adaptation rules and records the change in `new_logs`.
    /// Invalid specs leave the current rules untouched.
    pub fn set_adaptation_rules(&self, spec: StrategySpec, at: f64) -> Result<(), KnowledgeError> {
        if let Some(validate) = &self.validator {
            validate(&spec).map_err(KnowledgeError::InvalidSpec)?;
        }
        let mut logs = self.new_logs.write();
        let mut state = self.state.lock();
        logs.append(json!({
            "timestamp": at,
            "event": "rules_changed",
            "previous": state.rules,
            "rules": spec,
        }))?;
        state.rules = spec;
        Ok(())
    }

    pub fn state(&self) -> KnowledgeState {
        self.state.lock().clone()
    }

    pub fn set_arrival_rate(&self, rate: f64) {
        self.state.lock().arrival_rate = rate;
    }

    /// Tar archive holding both index files and `config_toml`.
    pub fn export_archive(&self, config_toml: &str) -> Result<Vec<u8>, KnowledgeError> {
        // Lock both so the snapshot is a consistent prefix of each.
        let logs = self.new_logs.read();
        let metrics = self.final_metrics.read();
        build_archive(&[
            (IndexName::NewLogs.file_name(), logs.to_bytes()),
            (IndexName::FinalMetrics.file_name(), metrics.to_bytes()),
            (CONFIG_FILE, config_toml.as_bytes().to_vec()),
        ])
    }
}

fn half_life_of(rules: &StrategySpec) -> f64 {
    rules
        .params
        .get("half_life")
        .and_then(Value::as_f64)
        .filter(|h| *h > 0.0)
        .unwrap_or(DEFAULT_HALF_LIFE)
}

pub(crate) fn build_archive(entries: &[(&str, Vec<u8>)]) -> Result<Vec<u8>, KnowledgeError> {
    let mut builder = tar::Builder::new(Vec::new());
    for (name, bytes) in entries {
        let mut header = tar::Header::new_gnu();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_cksum();
        builder
            .append_data(&mut header, name, bytes.as_slice())
            .map_err(KnowledgeError::storage)?;
    }
    builder.into_inner().map_err(KnowledgeError::storage)
}

/// Contents of an exported experiment archive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Archive {
    pub new_logs: Vec<u8>,
    pub final_metrics: Vec<u8>,
    pub config_toml: String,
}

impl Archive {
    pub fn read(bytes: &[u8]) -> Result<Self, KnowledgeError> {
        let mut archive = tar::Archive::new(bytes);
        let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for entry in archive.entries().map_err(KnowledgeError::storage)? {
            let mut entry = entry.map_err(KnowledgeError::storage)?;
            let name = entry
                .path()
                .map_err(KnowledgeError::storage)?
                .to_string_lossy()
                .into_owned();
            let mut buf = Vec::new();
            entry
                .read_to_end(&mut buf)
                .map_err(KnowledgeError::storage)?;
            files.insert(name, buf);
        }
        let mut take = |name: &str| {
            files
                .remove(name)
                .ok_or_else(|| KnowledgeError::Corrupt(format!("archive lacks {name}")))
        };
        Ok(Self {
            new_logs: take(IndexName::NewLogs.file_name())?,
            final_metrics: take(IndexName::FinalMetrics.file_name())?,
            config_toml: String::from_utf8(take(CONFIG_FILE)?)
                .map_err(|e| KnowledgeError::Corrupt(e.to_string()))?,
        })
    }

    /// Rebuilds an in-memory store from the archived indexes. Model
    /// statistics are replayed from `final_metrics`.
    pub fn into_knowledge(&self, mut state: KnowledgeState) -> Result<Knowledge, KnowledgeError> {
        let new_logs = IndexStore::from_bytes(IndexName::NewLogs, &self.new_logs)?;
        let final_metrics = IndexStore::from_bytes(IndexName::FinalMetrics, &self.final_metrics)?;
        let half_life = half_life_of(&state.rules);
        for doc in final_metrics.docs() {
            if let Ok(rec) = serde_json::from_value::<MetricsRecord>(doc.clone()) {
                state.models.entry(rec.model_name.clone()).or_default();
                update_model_stats(&mut state, &rec, half_life)?;
            }
        }
        Ok(Knowledge {
            new_logs: RwLock::new(new_logs),
            final_metrics: RwLock::new(final_metrics),
            state: Mutex::new(state),
            validator: None,
            dir: None,
        })
    }
}
