//! Persistence of finished requests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::request::{MeasurementRow, RequestState};
use crate::ids::RequestId;
use crate::rwa::RouteAllocation;

/// One protocol step as recorded in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub time: f64,
    pub sender: String,
    /// `None` for local steps that never crossed the bus.
    pub topic: Option<String>,
    pub kind: super::messages::MessageKind,
    pub correlation_id: String,
    pub seq: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhysicsSummary {
    pub batches: u64,
    pub records: u64,
    pub coincidences: u64,
    pub accidentals: u64,
    /// CAR of the pooled counts.
    #[serde(with = "crate::physics::inf_as_string")]
    pub car: f64,
    pub mean_visibility: f64,
    pub mean_fidelity: f64,
}

impl PhysicsSummary {
    pub fn from_rows(rows: &[MeasurementRow]) -> Self {
        let live: Vec<&MeasurementRow> = rows.iter().filter(|r| r.records > 0).collect();
        if live.is_empty() {
            return Self {
                batches: rows.len() as u64,
                car: f64::INFINITY,
                ..Self::default()
            };
        }
        let n = live.len() as f64;
        let coincidences: u64 = rows.iter().map(|r| r.coincidences).sum();
        let accidentals: u64 = rows.iter().map(|r| r.accidentals).sum();
        Self {
            batches: rows.len() as u64,
            records: rows.iter().map(|r| r.records).sum(),
            coincidences,
            accidentals,
            car: if accidentals > 0 {
                (coincidences + accidentals) as f64 / accidentals as f64
            } else {
                f64::INFINITY
            },
            mean_visibility: live.iter().map(|r| r.visibility).sum::<f64>() / n,
            mean_fidelity: live.iter().map(|r| r.fidelity).sum::<f64>() / n,
        }
    }
}

/// Everything the user can retrieve about a finished request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub record_id: String,
    pub request_id: RequestId,
    pub state: RequestState,
    pub route: Option<RouteAllocation>,
    pub rows: Vec<MeasurementRow>,
    pub trace: Vec<TraceEntry>,
    pub physics: PhysicsSummary,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage unavailable: {0}")]
    Unavailable(String),
    #[error("record {0} already stored")]
    Duplicate(String),
}

pub trait MeasurementStore {
    fn put(&mut self, record: MeasurementRecord) -> Result<String, StoreError>;
    fn get(&self, record_id: &str) -> Option<MeasurementRecord>;
}

#[derive(Debug, Default, Clone)]
pub struct MemoryStore {
    records: BTreeMap<String, MeasurementRecord>,
    /// When set, every `put` fails.
    pub fail: bool,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl MeasurementStore for MemoryStore {
    fn put(&mut self, record: MeasurementRecord) -> Result<String, StoreError> {
        if self.fail {
            return Err(StoreError::Unavailable("store disabled".into()));
        }
        let id = record.record_id.clone();
        if self.records.contains_key(&id) {
            return Err(StoreError::Duplicate(id));
        }
        self.records.insert(id.clone(), record);
        Ok(id)
    }

    fn get(&self, record_id: &str) -> Option<MeasurementRecord> {
        self.records.get(record_id).cloned()
    }
}

pub fn record_id_for(request: RequestId) -> String {
    format!("meas-{request}")
}
