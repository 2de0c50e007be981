//! Append-only audit log, one JSON line per authenticated call.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    /// Wall-clock milliseconds since the Unix epoch.
    pub time_ms: u64,
    /// `anonymous` when no valid token was presented.
    pub subject: String,
    /// HTTP method.
    pub action: String,
    /// Request path.
    pub target: String,
    /// HTTP status of the response.
    pub outcome: u16,
}

#[derive(Debug, Default)]
struct Inner {
    file: Option<File>,
    records: Vec<AuditRecord>,
}

#[derive(Debug, Default)]
pub struct AuditLog {
    inner: Mutex<Inner>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) `path`, keeping earlier records.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut records = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                match serde_json::from_str(&line) {
                    Ok(r) => records.push(r),
                    Err(e) => tracing::warn!("skipping unreadable audit line: {e}"),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: Mutex::new(Inner {
                file: Some(file),
                records,
            }),
        })
    }

    pub fn append(&self, subject: &str, action: &str, target: &str, outcome: u16) {
        let time_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let record = AuditRecord {
            time_ms,
            subject: subject.to_owned(),
            action: action.to_owned(),
            target: target.to_owned(),
            outcome,
        };
        let mut inner = self.inner.lock().expect("audit lock");
        if let Some(f) = inner.file.as_mut() {
            let line = serde_json::to_string(&record).expect("serializable");
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                tracing::error!("audit write failed: {e}");
            }
        }
        inner.records.push(record);
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.inner.lock().expect("audit lock").records.clone()
    }

    pub fn sync(&self) {
        if let Some(f) = self.inner.lock().expect("audit lock").file.as_ref() {
            let _ = f.sync_all();
        }
    }
}
