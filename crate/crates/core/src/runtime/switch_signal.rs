//! File-based switch signal for external strategies.
//!
//! An external controller writes a single model token (id or display name)
//! into a text file; the control loop polls it and switches when the token
//! changes. Trailing whitespace is ignored.

use std::io::ErrorKind;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum SwitchSignalError {
    #[error("cannot read switch file {path}: {source}")]
    UnreadableFile {
        path: String,
        source: std::io::Error,
    },
    #[error("switch file must hold exactly one token, found {0:?}")]
    Malformed(String),
}

/// Reads the token currently in the file. A missing or blank file is `None`.
pub fn read_switch_signal(path: &Path) -> Result<Option<String>, SwitchSignalError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
        Err(source) => {
            return Err(SwitchSignalError::UnreadableFile {
                path: path.display().to_string(),
                source,
            })
        }
    };
    let token = text.trim();
    if token.is_empty() {
        return Ok(None);
    }
    if token.split_whitespace().nth(1).is_some() {
        return Err(SwitchSignalError::Malformed(token.to_string()));
    }
    Ok(Some(token.to_string()))
}

/// Returns the file's token when it differs from `last_seen`.
/// Read failures are logged and treated as no signal.
pub fn poll_switch_signal(path: &Path, last_seen: Option<&str>) -> Option<String> {
    match read_switch_signal(path) {
        Ok(Some(token)) if Some(token.as_str()) != last_seen => Some(token),
        Ok(_) => None,
        Err(e) => {
            tracing::warn!("{e}");
            None
        }
    }
}

/// Writes `token` the same way an external controller would.
pub fn write_switch_signal(path: &Path, token: &str) -> std::io::Result<()> {
    std::fs::write(path, token)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_token_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.csv");
        std::fs::write(&path, "yolov5xu\n").unwrap();
        assert_eq!(
            poll_switch_signal(&path, Some("yolov5nu")).as_deref(),
            Some("yolov5xu")
        );
    }

    #[test]
    fn absent_file() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(
            poll_switch_signal(&dir.path().join("model.csv"), None),
            None
        );
    }

    #[test]
    fn unchanged_file_second_poll() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.csv");
        write_switch_signal(&path, "x").unwrap();
        let first = poll_switch_signal(&path, None);
        assert_eq!(first.as_deref(), Some("x"));
        assert_eq!(poll_switch_signal(&path, first.as_deref()), None);
    }

    #[test]
    fn malformed_and_unreadable_are_none() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.csv");
        std::fs::write(&path, "n x\n").unwrap();
        assert!(matches!(
            read_switch_signal(&path),
            Err(SwitchSignalError::Malformed(_))
        ));
        assert_eq!(poll_switch_signal(&path, None), None);
        // a directory cannot be read as a file
        assert!(matches!(
            read_switch_signal(dir.path()),
            Err(SwitchSignalError::UnreadableFile { .. })
        ));
        assert_eq!(poll_switch_signal(dir.path(), None), None);
    }
}
