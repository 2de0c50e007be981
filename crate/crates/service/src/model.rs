//! Wire and storage types.

use qnet_core::control::{ControlEvent, RequestRecord, RequestState, Requirements, Transition};
use qnet_core::{NodeId, RequestId, RouteAllocation};
use serde::{Deserialize, Serialize};

/// A request as reported by the service: the control-plane record without
/// its measurement rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestStatus {
    pub id: RequestId,
    pub user: String,
    pub qnode_a: NodeId,
    pub qnode_b: NodeId,
    pub requirements: Requirements,
    /// Display form, e.g. `Completed` or `Failed(timeout)`.
    pub status: String,
    pub state: RequestState,
    pub submitted_at: f64,
    pub finished_at: Option<f64>,
    pub route: Option<RouteAllocation>,
    pub transitions: Vec<Transition>,
    pub records: u64,
    pub data_loss: bool,
    pub record_id: Option<String>,
}

impl RequestStatus {
    pub fn from_record(r: &RequestRecord) -> Self {
        Self {
            id: r.id,
            user: r.user.clone(),
            qnode_a: r.qnode_a.clone(),
            qnode_b: r.qnode_b.clone(),
            requirements: r.requirements,
            status: r.state.to_string(),
            state: r.state,
            submitted_at: r.submitted_at,
            finished_at: r.finished_at,
            route: r.route.clone(),
            transitions: r.transitions.clone(),
            records: r.measurements.iter().map(|m| m.records).sum(),
            data_loss: r.data_loss,
            record_id: r.record_id.clone(),
        }
    }

    /// Moves a request left behind by an earlier run to `Failed(interrupted)`.
    pub fn interrupt(&mut self, now: f64) {
        let to = RequestState::Failed(qnet_core::control::FailureReason::Interrupted);
        self.transitions.push(Transition {
            time: now,
            from: Some(self.state),
            to,
        });
        self.state = to;
        self.status = to.to_string();
        self.finished_at = Some(now);
    }
}

/// One entry of the service's event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceEvent {
    /// Position in the stream, starting at 1 with no gaps.
    pub seq: u64,
    #[serde(flatten)]
    pub event: ControlEvent,
}

impl ServiceEvent {
    pub fn request(&self) -> Option<RequestId> {
        match &self.event {
            ControlEvent::Transition { request, .. }
            | ControlEvent::Measurement { request, .. } => Some(*request),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match &self.event {
            ControlEvent::Transition { .. } => "transition",
            ControlEvent::Measurement { .. } => "measurement",
            ControlEvent::TopologyChanged { .. } => "topology_changed",
            ControlEvent::DiscoveryFinished { .. } => "discovery_finished",
        }
    }

    pub fn time(&self) -> f64 {
        match &self.event {
            ControlEvent::Transition { time, .. }
            | ControlEvent::Measurement { time, .. }
            | ControlEvent::TopologyChanged { time, .. }
            | ControlEvent::DiscoveryFinished { time, .. } => *time,
        }
    }
}
