//! Replay target that posts each request to the ingestion endpoint.

use std::sync::OnceLock;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;

use switchboard_core::loadgen::{IngestTarget, SubmitError};

pub struct HttpTarget {
    url: String,
    // built on the replay thread: a blocking client must not be created or
    // dropped inside the server's async runtime
    client: OnceLock<Result<Client, String>>,
}

#[derive(Deserialize)]
struct Accepted {
    request_id: u64,
}

impl HttpTarget {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            client: OnceLock::new(),
        }
    }

    fn client(&self) -> Result<&Client, SubmitError> {
        self.client
            .get_or_init(|| {
                Client::builder()
                    .timeout(Duration::from_secs(10))
                    .build()
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| SubmitError::Failed(e.clone()))
    }
}

impl IngestTarget for HttpTarget {
    fn submit(&self, payload: Vec<u8>, _issued_at: f64) -> Result<u64, SubmitError> {
        let resp = self
            .client()?
            .post(&self.url)
            .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
            .body(payload)
            .send()
            .map_err(|e| SubmitError::Failed(e.to_string()))?;
        match resp.status() {
            StatusCode::ACCEPTED => {
                let body = resp
                    .bytes()
                    .map_err(|e| SubmitError::Failed(e.to_string()))?;
                serde_json::from_slice::<Accepted>(&body)
                    .map(|a| a.request_id)
                    .map_err(|e| SubmitError::Failed(e.to_string()))
            }
            StatusCode::TOO_MANY_REQUESTS => Err(SubmitError::Dropped),
            StatusCode::CONFLICT => Err(SubmitError::Closed),
            other => Err(SubmitError::Failed(format!("ingestion answered {other}"))),
        }
    }
}
