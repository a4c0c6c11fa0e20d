//! Child-process inference backend.
//!
//! One JSON document per line in each direction. The worker writes
//! `{"request_id": 1, "model": "yolov5nu", "payload": "<base64>"}` and reads
//! back either a bare array of detections or an object with a `detections`
//! array and an optional `latency` (seconds). Detections are
//! `{"class_id": 0, "confidence": 0.9}` objects or `[class_id, confidence]`
//! pairs.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::time::Instant;

use base64::Engine as _;
use serde_json::{json, Value};

use crate::domain::{Detection, ExecutorConfig};

use super::inference::RawDetections;
use super::RuntimeError;

#[derive(Debug)]
pub struct ExternalExecutor {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ExternalExecutor {
    pub fn spawn(config: &ExecutorConfig) -> Result<Self, RuntimeError> {
        let mut child = Command::new(&config.command)
            .args(&config.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| RuntimeError::Executor(format!("spawn {}: {e}", config.command)))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout piped"));
        Ok(Self {
            child,
            stdin,
            stdout,
        })
    }

    /// Sends one request and blocks for its answer. The returned latency is
    /// the child's own figure when it reports one, else the round trip.
    pub fn infer(
        &mut self,
        request_id: u64,
        model: &str,
        payload: &[u8],
    ) -> Result<RawDetections, RuntimeError> {
        let started = Instant::now();
        let line = json!({
            "request_id": request_id,
            "model": model,
            "payload": base64::engine::general_purpose::STANDARD.encode(payload),
        });
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| RuntimeError::Executor(format!("write: {e}")))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| RuntimeError::Executor(format!("read: {e}")))?;
        if n == 0 {
            return Err(RuntimeError::Executor("executor closed its output".into()));
        }
        let elapsed = started.elapsed().as_secs_f64();
        parse_reply(&reply, elapsed)
    }
}

impl Drop for ExternalExecutor {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn parse_reply(line: &str, measured: f64) -> Result<RawDetections, RuntimeError> {
    let bad = |msg: &str| RuntimeError::Executor(format!("bad reply {:?}: {msg}", line.trim()));
    let value: Value = serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
    let (list, latency) = match &value {
        Value::Array(items) => (items, None),
        Value::Object(obj) => (
            obj.get("detections")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing detections"))?,
            obj.get("latency").and_then(Value::as_f64),
        ),
        _ => return Err(bad("expected array or object")),
    };
    let entries = list
        .iter()
        .map(|d| {
            let (class_id, confidence) = match d {
                Value::Array(pair) if pair.len() == 2 => (pair[0].as_u64(), pair[1].as_f64()),
                Value::Object(o) => (
                    o.get("class_id").and_then(Value::as_u64),
                    o.get("confidence").and_then(Value::as_f64),
                ),
                _ => (None, None),
            };
            match (class_id, confidence) {
                (Some(c), Some(p)) => Ok(Detection {
                    class_id: c as u32,
                    confidence: p.clamp(0.0, 1.0),
                }),
                _ => Err(bad("malformed detection")),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sampled_latency = latency
        .filter(|l| *l > 0.0)
        .unwrap_or(measured.max(f64::MIN_POSITIVE));
    Ok(RawDetections {
        entries,
        sampled_latency,
    })
}
