//! Request lifecycle and READY bookkeeping.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{ActorId, NodeId, RequestId};
use crate::rwa::RouteAllocation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QubitType {
    TimeBin,
    Polarization,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Requirements {
    pub qubit_type: QubitType,
    /// Entangled pairs per second.
    pub rate: f64,
    /// Seconds of distribution.
    pub duration: f64,
}

impl Requirements {
    /// Measurement records each Q-node collects before sending END.
    pub fn target_records(&self) -> u64 {
        (self.rate * self.duration).ceil().max(1.0) as u64
    }

    /// Names of fields that fail validation.
    pub fn invalid_fields(&self) -> Vec<&'static str> {
        let mut bad = Vec::new();
        if !(self.rate.is_finite() && self.rate > 0.0) {
            bad.push("rate");
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            bad.push("duration");
        }
        bad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub user: String,
    pub qnode_a: NodeId,
    pub qnode_b: NodeId,
    pub requirements: Requirements,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    NoEps,
    Blocked,
    Verification,
    Timeout,
    Calibration,
    RouteLost,
    InvalidEndpoints,
    Aborted,
    Interrupted,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FailureReason::NoEps => "no_eps",
            FailureReason::Blocked => "blocked",
            FailureReason::Verification => "verification",
            FailureReason::Timeout => "timeout",
            FailureReason::Calibration => "calibration",
            FailureReason::RouteLost => "route_lost",
            FailureReason::InvalidEndpoints => "invalid_endpoints",
            FailureReason::Aborted => "aborted",
            FailureReason::Interrupted => "interrupted",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "snake_case")]
pub enum RequestState {
    Submitted,
    Analyzing,
    PathsEstablished,
    Verifying,
    Calibrating,
    Ready,
    Distributing,
    Recalibrating,
    Completed,
    Failed(FailureReason),
}

impl RequestState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, RequestState::Completed | RequestState::Failed(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            RequestState::Submitted => "Submitted",
            RequestState::Analyzing => "Analyzing",
            RequestState::PathsEstablished => "PathsEstablished",
            RequestState::Verifying => "Verifying",
            RequestState::Calibrating => "Calibrating",
            RequestState::Ready => "Ready",
            RequestState::Distributing => "Distributing",
            RequestState::Recalibrating => "Recalibrating",
            RequestState::Completed => "Completed",
            RequestState::Failed(_) => "Failed",
        }
    }
}

impl fmt::Display for RequestState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RequestState::Failed(r) => write!(f, "Failed({r})"),
            other => f.write_str(other.name()),
        }
    }
}

/// The allowed lifecycle relation.
pub fn transition_allowed(from: RequestState, to: RequestState) -> bool {
    use RequestState::*;
    if from.is_terminal() {
        return false;
    }
    matches!(
        (from, to),
        (Submitted, Analyzing)
            | (Analyzing, PathsEstablished)
            | (PathsEstablished, Verifying)
            | (Verifying, Calibrating)
            | (Calibrating, Ready)
            | (Ready, Distributing)
            | (Distributing, Recalibrating)
            | (Recalibrating, Distributing)
            | (Distributing, Completed)
            | (_, Failed(_))
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub time: f64,
    pub from: Option<RequestState>,
    pub to: RequestState,
}

/// One Q-node measurement batch as stored with the request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub time: f64,
    pub node: NodeId,
    pub records: u64,
    pub coincidences: u64,
    pub accidentals: u64,
    #[serde(with = "crate::physics::inf_as_string")]
    pub car: f64,
    pub visibility: f64,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub user: String,
    pub qnode_a: NodeId,
    pub qnode_b: NodeId,
    pub requirements: Requirements,
    pub state: RequestState,
    pub submitted_at: f64,
    pub finished_at: Option<f64>,
    pub route: Option<RouteAllocation>,
    pub measurements: Vec<MeasurementRow>,
    pub transitions: Vec<Transition>,
    /// Set when the measurement store rejected the final record.
    pub data_loss: bool,
    pub record_id: Option<String>,
}

impl RequestRecord {
    pub fn new(id: RequestId, spec: &RequestSpec, now: f64) -> Self {
        Self {
            id,
            user: spec.user.clone(),
            qnode_a: spec.qnode_a.clone(),
            qnode_b: spec.qnode_b.clone(),
            requirements: spec.requirements,
            state: RequestState::Submitted,
            submitted_at: now,
            finished_at: None,
            route: None,
            measurements: Vec::new(),
            transitions: vec![Transition {
                time: now,
                from: None,
                to: RequestState::Submitted,
            }],
            data_loss: false,
            record_id: None,
        }
    }

    /// Moves to `to`, recording the transition. Disallowed moves are refused
    /// and leave the record untouched.
    pub fn transition(&mut self, to: RequestState, now: f64) -> bool {
        if !transition_allowed(self.state, to) {
            return false;
        }
        self.transitions.push(Transition {
            time: now,
            from: Some(self.state),
            to,
        });
        self.state = to;
        if to.is_terminal() {
            self.finished_at = Some(now);
        }
        true
    }

    pub fn records_from(&self, node: &NodeId) -> u64 {
        self.measurements
            .iter()
            .filter(|r| &r.node == node)
            .map(|r| r.records)
            .sum()
    }
}

/// Entities whose READY gates the start of distribution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadyLedger {
    pub request_id: RequestId,
    pub expected: BTreeSet<ActorId>,
    pub received: BTreeSet<ActorId>,
}

impl ReadyLedger {
    pub fn new(request_id: RequestId, allocation: &RouteAllocation, qnodes: [&NodeId; 2]) -> Self {
        let mut expected: BTreeSet<ActorId> =
            allocation.eps_nodes().iter().map(ActorId::from).collect();
        expected.extend(qnodes.iter().map(|n| ActorId::from(*n)));
        if let Some(b) = allocation.bsm() {
            expected.insert(ActorId::from(b));
        }
        Self {
            request_id,
            expected,
            received: BTreeSet::new(),
        }
    }

    /// Records a READY. Returns false for senders outside the ledger.
    pub fn record(&mut self, sender: &ActorId) -> bool {
        if self.expected.contains(sender) {
            self.received.insert(sender.clone());
            true
        } else {
            false
        }
    }

    pub fn complete(&self) -> bool {
        self.received == self.expected
    }
}
