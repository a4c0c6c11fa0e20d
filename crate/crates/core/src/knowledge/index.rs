use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use super::{IndexName, KnowledgeError};

/// One append-only index: the raw lines as written plus their parsed form.
///
/// `lines[i]` is exactly the bytes persisted for `docs[i]` (without the
/// trailing newline), so exports can reproduce the file byte-for-byte.
#[derive(Debug)]
pub struct IndexStore {
    name: IndexName,
    lines: Vec<String>,
    docs: Vec<Value>,
    file: Option<(PathBuf, File)>,
    sync: bool,
}

impl IndexStore {
    pub fn in_memory(name: IndexName) -> Self {
        Self {
            name,
            lines: Vec::new(),
            docs: Vec::new(),
            file: None,
            sync: false,
        }
    }

    /// Opens (creating if needed) `<dir>/<name>.jsonl` and replays it.
    /// A torn final line from an interrupted write is discarded.
    pub fn open(name: IndexName, dir: &Path, sync: bool) -> Result<Self, KnowledgeError> {
        std::fs::create_dir_all(dir).map_err(KnowledgeError::storage)?;
        let path = dir.join(name.file_name());
        let mut store = Self::in_memory(name);
        store.sync = sync;
        let mut valid_len = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(KnowledgeError::storage)?);
            for line in reader.split(b'\n') {
                let line = line.map_err(KnowledgeError::storage)?;
                let Ok(text) = String::from_utf8(line) else {
                    break;
                };
                let Ok(doc) = serde_json::from_str::<Value>(&text) else {
                    break;
                };
                let expected = store.docs.len() as u64 + 1;
                if doc.get("log_id").and_then(Value::as_u64) != Some(expected) {
                    break;
                }
                valid_len += text.len() as u64 + 1;
                store.lines.push(text);
                store.docs.push(doc);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(KnowledgeError::storage)?;
        file.set_len(valid_len).map_err(KnowledgeError::storage)?;
        let mut file = file;
        use std::io::Seek;
        file.seek(std::io::SeekFrom::End(0))
            .map_err(KnowledgeError::storage)?;
        store.file = Some((path, file));
        Ok(store)
    }

    /// Builds a store from exported file contents.
    pub fn from_bytes(name: IndexName, bytes: &[u8]) -> Result<Self, KnowledgeError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| KnowledgeError::Corrupt(format!("{}: {e}", name.as_str())))?;
        let mut store = Self::in_memory(name);
        for (i, line) in text.lines().enumerate() {
            let doc: Value = serde_json::from_str(line).map_err(|e| {
                KnowledgeError::Corrupt(format!("{}:{}: {e}", name.as_str(), i + 1))
            })?;
            if doc.get("log_id").and_then(Value::as_u64) != Some(i as u64 + 1) {
                return Err(KnowledgeError::Corrupt(format!(
                    "{}:{}: log_id out of sequence",
                    name.as_str(),
                    i + 1
                )));
            }
            store.lines.push(line.to_string());
            store.docs.push(doc);
        }
        Ok(store)
    }

    pub fn name(&self) -> IndexName {
        self.name
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    /// Stores `doc` under the next log_id. The line reaches the file before
    /// this returns; nothing is kept in memory if the write fails.
    pub fn append(&mut self, doc: Value) -> Result<u64, KnowledgeError> {
        let Value::Object(fields) = doc else {
            return Err(KnowledgeError::NotAnObject);
        };
        let log_id = self.docs.len() as u64 + 1;
        let mut ordered = Map::with_capacity(fields.len() + 1);
        ordered.insert("log_id".into(), log_id.into());
        for (k, v) in fields {
            if k != "log_id" {
                ordered.insert(k, v);
            }
        }
        let doc = Value::Object(ordered);
        let line =
            serde_json::to_string(&doc).map_err(|e| KnowledgeError::Corrupt(e.to_string()))?;
        if let Some((_, file)) = self.file.as_mut() {
            let mut buf = Vec::with_capacity(line.len() + 1);
            buf.extend_from_slice(line.as_bytes());
            buf.push(b'\n');
            file.write_all(&buf).map_err(KnowledgeError::storage)?;
            if self.sync {
                file.sync_data().map_err(KnowledgeError::storage)?;
            }
        }
        self.lines.push(line);
        self.docs.push(doc);
        Ok(log_id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Value] {
        &self.docs
    }

    /// Newest `n` documents, newest first.
    pub fn latest(&self, n: usize) -> impl Iterator<Item = &Value> {
        self.docs.iter().rev().take(n)
    }

    /// File contents: one line per document, newline-terminated.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.lines.iter().map(|l| l.len() + 1).sum());
        for line in &self.lines {
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
        out
    }
}
