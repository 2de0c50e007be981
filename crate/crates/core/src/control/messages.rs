//! Protocol message kinds, payload schemas and the topic grammar.
//!
//! | topic | kinds |
//! |---|---|
//! | `qnet/register` | Register |
//! | `qnet/topology/request` | TopologyRequest |
//! | `qnet/topology/response` | TopologyResponse |
//! | `qnet/topology/change` | TopologyChange |
//! | `qnet/verify/req` | VerifyRequest |
//! | `qnet/verify/resp` | VerifyResponse |
//! | `qnet/req/<id>/submit` | Submit |
//! | `qnet/req/<id>/analyze` | Analyze |
//! | `qnet/req/<id>/paths` | PathSetup, PathsEstablished, PathsNotify, PathTeardown |
//! | `qnet/req/<id>/verify` | ProbeRequest, ProbeReport |
//! | `qnet/req/<id>/calibrate` | Calibrate, CalibrationDone |
//! | `qnet/req/<id>/ready` | Ready |
//! | `qnet/req/<id>/start` | Start |
//! | `qnet/req/<id>/measurement` | Measurement |
//! | `qnet/req/<id>/end` | End |
//! | `qnet/req/<id>/stop` | Stop |
//! | `qnet/req/<id>/stored` | Stored |
//!
//! ConfigLoaded, LinksDiscovered and TopologyBuilt are local steps that
//! appear in the trace without crossing the bus.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::request::{FailureReason, RequestSpec, RequestState};
use crate::ids::{LinkId, NodeId, PortId, RequestId};
use crate::rwa::RouteAllocation;
use crate::topology::{FiberLink, Node};

pub const REGISTER: &str = "qnet/register";
pub const TOPOLOGY_REQUEST: &str = "qnet/topology/request";
pub const TOPOLOGY_RESPONSE: &str = "qnet/topology/response";
pub const TOPOLOGY_CHANGE: &str = "qnet/topology/change";
pub const VERIFY_REQ: &str = "qnet/verify/req";
pub const VERIFY_RESP: &str = "qnet/verify/resp";

/// Per-request topic suffixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReqTopic {
    Submit,
    Analyze,
    Paths,
    Verify,
    Calibrate,
    Ready,
    Start,
    Measurement,
    End,
    Stop,
    Stored,
}

impl ReqTopic {
    pub fn suffix(self) -> &'static str {
        match self {
            ReqTopic::Submit => "submit",
            ReqTopic::Analyze => "analyze",
            ReqTopic::Paths => "paths",
            ReqTopic::Verify => "verify",
            ReqTopic::Calibrate => "calibrate",
            ReqTopic::Ready => "ready",
            ReqTopic::Start => "start",
            ReqTopic::Measurement => "measurement",
            ReqTopic::End => "end",
            ReqTopic::Stop => "stop",
            ReqTopic::Stored => "stored",
        }
    }
}

pub fn req_topic(id: RequestId, t: ReqTopic) -> String {
    format!("qnet/req/{id}/{}", t.suffix())
}

pub fn req_filter(id: RequestId) -> String {
    format!("qnet/req/{id}/#")
}

/// Extracts the request id from a `qnet/req/<id>/...` topic.
pub fn topic_request(topic: &str) -> Option<RequestId> {
    let mut parts = topic.split('/');
    match (parts.next(), parts.next(), parts.next()) {
        (Some("qnet"), Some("req"), Some(id)) => id.parse().ok().map(RequestId),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    ConfigLoaded,
    LinksDiscovered,
    Register,
    TopologyRequest,
    TopologyResponse,
    VerifyRequest,
    VerifyResponse,
    TopologyBuilt,
    TopologyChange,
    Submit,
    Analyze,
    PathSetup,
    PathsEstablished,
    PathsNotify,
    ProbeRequest,
    ProbeReport,
    Calibrate,
    CalibrationDone,
    Ready,
    Start,
    Measurement,
    End,
    Stop,
    PathTeardown,
    Stored,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagClaim {
    pub port: PortId,
    pub tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDirection {
    /// From the EPS towards the leg's far end.
    Forward,
    /// From the far end back to the EPS.
    Reverse,
}

/// Outcome of request analysis: the chosen resources, or why none fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum AnalyzeOutcome {
    Selected {
        eps: Vec<NodeId>,
        bsm: Option<NodeId>,
        derated_rate: f64,
        total_loss_db: f64,
    },
    Rejected {
        reason: FailureReason,
    },
    Queued,
}

/// Counts from one measurement batch at a Q-node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSample {
    pub records: u64,
    pub coincidences: u64,
    pub accidentals: u64,
    #[serde(with = "crate::physics::inf_as_string")]
    pub car: f64,
    pub visibility: f64,
    pub fidelity: f64,
}

impl MeasurementSample {
    pub fn empty() -> Self {
        Self {
            records: 0,
            coincidences: 0,
            accidentals: 0,
            car: f64::INFINITY,
            visibility: 0.0,
            fidelity: 0.5,
        }
    }
}

/// Asynchronous change observed in the plant by the SDN agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TopologyDelta {
    LinkDown { link: LinkId },
    LinkUp { link: FiberLink },
    NodeDown { node: NodeId },
    NodeUp { node: Node },
    LinkDegraded { link: LinkId, extra_loss_db: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body", rename_all = "snake_case")]
pub enum Payload {
    ConfigLoaded {
        node: NodeId,
    },
    LinksDiscovered {
        links: Vec<LinkId>,
    },
    Register {
        node: Node,
    },
    TopologyRequest,
    TopologyResponse {
        links: Vec<FiberLink>,
    },
    VerifyRequest {
        resource: NodeId,
        claims: Vec<TagClaim>,
    },
    VerifyResponse {
        resource: NodeId,
        verified: bool,
        unconfirmed: Vec<String>,
    },
    TopologyBuilt {
        nodes: Vec<NodeId>,
        links: Vec<LinkId>,
        lost: Vec<NodeId>,
    },
    TopologyChange {
        delta: TopologyDelta,
    },
    Submit {
        request: RequestId,
        spec: RequestSpec,
    },
    Analyze {
        outcome: AnalyzeOutcome,
    },
    PathSetup {
        allocation: RouteAllocation,
    },
    PathsEstablished {
        ok: bool,
    },
    PathsNotify {
        allocation: RouteAllocation,
        participants: Vec<NodeId>,
        qnodes: [NodeId; 2],
    },
    ProbeRequest,
    ProbeReport {
        leg: usize,
        direction: ProbeDirection,
        measured_db: f64,
    },
    Calibrate {
        recalibration: bool,
    },
    CalibrationDone {
        converged: bool,
        attempts: u32,
        recalibration: bool,
    },
    Ready,
    Start {
        rate: f64,
        target_records: u64,
    },
    Measurement {
        sample: MeasurementSample,
    },
    End {
        records: u64,
    },
    Stop {
        reason: Option<FailureReason>,
    },
    PathTeardown {
        allocation: RouteAllocation,
    },
    Stored {
        record_id: Option<String>,
        state: RequestState,
        data_loss: bool,
    },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::ConfigLoaded { .. } => MessageKind::ConfigLoaded,
            Payload::LinksDiscovered { .. } => MessageKind::LinksDiscovered,
            Payload::Register { .. } => MessageKind::Register,
            Payload::TopologyRequest => MessageKind::TopologyRequest,
            Payload::TopologyResponse { .. } => MessageKind::TopologyResponse,
            Payload::VerifyRequest { .. } => MessageKind::VerifyRequest,
            Payload::VerifyResponse { .. } => MessageKind::VerifyResponse,
            Payload::TopologyBuilt { .. } => MessageKind::TopologyBuilt,
            Payload::TopologyChange { .. } => MessageKind::TopologyChange,
            Payload::Submit { .. } => MessageKind::Submit,
            Payload::Analyze { .. } => MessageKind::Analyze,
            Payload::PathSetup { .. } => MessageKind::PathSetup,
            Payload::PathsEstablished { .. } => MessageKind::PathsEstablished,
            Payload::PathsNotify { .. } => MessageKind::PathsNotify,
            Payload::ProbeRequest => MessageKind::ProbeRequest,
            Payload::ProbeReport { .. } => MessageKind::ProbeReport,
            Payload::Calibrate { .. } => MessageKind::Calibrate,
            Payload::CalibrationDone { .. } => MessageKind::CalibrationDone,
            Payload::Ready => MessageKind::Ready,
            Payload::Start { .. } => MessageKind::Start,
            Payload::Measurement { .. } => MessageKind::Measurement,
            Payload::End { .. } => MessageKind::End,
            Payload::Stop { .. } => MessageKind::Stop,
            Payload::PathTeardown { .. } => MessageKind::PathTeardown,
            Payload::Stored { .. } => MessageKind::Stored,
        }
    }
}
