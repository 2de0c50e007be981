//! Single-file persistent store: an append-only JSON-lines journal of
//! request snapshots, measurement records and stream events. The last
//! snapshot of a request wins on replay.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use qnet_core::control::{MeasurementRecord, MeasurementStore, StoreError};
use qnet_core::RequestId;
use serde::{Deserialize, Serialize};

use crate::model::{RequestStatus, ServiceEvent};

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Entry {
    Request(RequestStatus),
    Measurement(MeasurementRecord),
    Event(ServiceEvent),
}

#[derive(Debug, Default)]
pub struct FileStore {
    file: Option<File>,
    requests: BTreeMap<RequestId, RequestStatus>,
    records: BTreeMap<String, MeasurementRecord>,
    events: Vec<ServiceEvent>,
}

impl FileStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens the journal at `path`, replaying whatever it holds. A torn
    /// final line from an unclean shutdown is skipped.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut store = Self::default();
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)?;
        let mut lines = Vec::new();
        for line in BufReader::new(&file).lines() {
            lines.push(line?);
        }
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Entry>(line) {
                Ok(Entry::Request(r)) => {
                    store.requests.insert(r.id, r);
                }
                Ok(Entry::Measurement(m)) => {
                    store.records.insert(m.record_id.clone(), m);
                }
                Ok(Entry::Event(e)) => store.events.push(e),
                Err(e) => tracing::warn!("{}: skipping line {}: {e}", path.display(), i + 1),
            }
        }
        // Terminate a torn line so the next append starts cleanly.
        let len = file.metadata()?.len();
        if len > 0 {
            file.seek(SeekFrom::Start(len - 1))?;
            let mut last = [0u8];
            file.read_exact(&mut last)?;
            if last[0] != b'\n' {
                file.write_all(b"\n")?;
            }
        }
        store.file = Some(file);
        Ok(store)
    }

    fn append(&mut self, entry: &Entry) -> std::io::Result<()> {
        if let Some(f) = self.file.as_mut() {
            let mut line = serde_json::to_string(entry).map_err(std::io::Error::other)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        Ok(())
    }

    pub fn put_request(&mut self, status: RequestStatus) -> std::io::Result<()> {
        let entry = Entry::Request(status);
        self.append(&entry)?;
        let Entry::Request(status) = entry else {
            unreachable!()
        };
        self.requests.insert(status.id, status);
        Ok(())
    }

    pub fn put_event(&mut self, event: ServiceEvent) -> std::io::Result<()> {
        let entry = Entry::Event(event);
        self.append(&entry)?;
        let Entry::Event(event) = entry else {
            unreachable!()
        };
        self.events.push(event);
        Ok(())
    }

    pub fn put_record(&mut self, record: MeasurementRecord) -> Result<String, StoreError> {
        let id = record.record_id.clone();
        if self.records.contains_key(&id) {
            return Err(StoreError::Duplicate(id));
        }
        let entry = Entry::Measurement(record);
        self.append(&entry)
            .map_err(|e| StoreError::Unavailable(e.to_string()))?;
        let Entry::Measurement(record) = entry else {
            unreachable!()
        };
        self.records.insert(id.clone(), record);
        Ok(id)
    }

    pub fn requests(&self) -> &BTreeMap<RequestId, RequestStatus> {
        &self.requests
    }

    pub fn record(&self, record_id: &str) -> Option<&MeasurementRecord> {
        self.records.get(record_id)
    }

    pub fn events(&self) -> &[ServiceEvent] {
        &self.events
    }

    pub fn sync(&self) -> std::io::Result<()> {
        match &self.file {
            Some(f) => f.sync_all(),
            None => Ok(()),
        }
    }
}

/// Handle the control plane writes measurement records through.
#[derive(Debug, Clone)]
pub struct SharedStore(pub Arc<Mutex<FileStore>>);

impl MeasurementStore for SharedStore {
    fn put(&mut self, record: MeasurementRecord) -> Result<String, StoreError> {
        self.0.lock().expect("store lock").put_record(record)
    }

    fn get(&self, record_id: &str) -> Option<MeasurementRecord> {
        self.0
            .lock()
            .expect("store lock")
            .record(record_id)
            .cloned()
    }
}
