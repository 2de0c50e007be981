//! Control plane: the Q-NET server, the SDN agent and the resource actors.
//!
//! Actors never share state. Each one reacts to bus deliveries and its own
//! timers through a [`Ctx`], which publishes onto the [`MessageBus`] and
//! schedules deliveries on the runtime's event queue.

pub mod agent;
pub mod messages;
pub mod physical;
pub mod request;
pub mod resource;
pub mod runtime;
pub mod server;
pub mod store;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bus::{BusMessage, MessageBus};
use crate::event::EventQueue;
use crate::ids::{ActorId, NodeId, RequestId};
use crate::rwa::RwaConfig;

pub use agent::{Agent, SimulatedController};
pub use messages::{MeasurementSample, MessageKind, Payload, TopologyDelta};
pub use physical::{CalibrationOutcome, IdealPhysics, PhysicalLayer};
pub use request::{
    transition_allowed, FailureReason, MeasurementRow, QubitType, ReadyLedger, RequestRecord,
    RequestSpec, RequestState, Requirements, Transition,
};
pub use runtime::{ControlPlane, Delivery, DiscoveryError, Plant, SubmitError};
pub use server::{ResourceRecord, ResourceState};
pub use store::{
    MeasurementRecord, MeasurementStore, MemoryStore, PhysicsSummary, StoreError, TraceEntry,
};

pub const SERVER: &str = "server";
pub const AGENT: &str = "agent";

/// What to do with a request that finds every suitable EPS busy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionPolicy {
    /// Fail it with `no_eps` or `blocked`.
    #[default]
    Reject,
    /// Hold it, in arrival order, until resources free up.
    Queue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub rwa: RwaConfig,
    pub bus_latency_s: f64,
    /// Uniform extra delivery delay in `[0, bus_jitter_s)`. Per-pair FIFO
    /// order is kept regardless.
    pub bus_jitter_s: f64,
    pub registration_window_s: f64,
    pub discovery_timeout_s: f64,
    pub probe_tolerance_db: f64,
    /// Deadline for path setup, probing, READY collection and
    /// recalibration.
    pub phase_timeout_s: f64,
    /// Deadline for the second END once the first has arrived.
    pub end_timeout_s: f64,
    pub recalibration_period_s: f64,
    pub calibration_retries: u32,
    pub batch_interval_s: f64,
    pub admission: AdmissionPolicy,
    /// Success probability of a linear-optics Bell-state measurement.
    pub bsm_success_prob: f64,
    pub seed: u64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            rwa: RwaConfig::default(),
            bus_latency_s: 0.001,
            bus_jitter_s: 0.0,
            registration_window_s: 0.1,
            discovery_timeout_s: 5.0,
            probe_tolerance_db: 1.0,
            phase_timeout_s: 10.0,
            end_timeout_s: 10.0,
            recalibration_period_s: 30.0,
            calibration_retries: 3,
            batch_interval_s: 1.0,
            admission: AdmissionPolicy::Reject,
            bsm_success_prob: 0.5,
            seed: 0,
        }
    }
}

/// Observable side effects, for monitoring and event streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ControlEvent {
    Transition {
        request: RequestId,
        time: f64,
        from: Option<RequestState>,
        to: RequestState,
    },
    Measurement {
        request: RequestId,
        time: f64,
        node: NodeId,
        sample: MeasurementSample,
    },
    TopologyChanged {
        time: f64,
        version: u64,
    },
    DiscoveryFinished {
        time: f64,
        ok: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Timer {
    RegistrationWindow,
    DiscoveryTimeout,
    Phase {
        request: RequestId,
        epoch: u64,
    },
    EndTimeout {
        request: RequestId,
    },
    Recalibrate {
        request: RequestId,
        epoch: u64,
    },
    CalibrationFinished {
        request: RequestId,
        converged: bool,
        attempt: u32,
        recalibration: bool,
    },
    MeasurementBatch {
        request: RequestId,
    },
}

pub(crate) enum CpEvent {
    Deliver { to: ActorId, msg: Arc<BusMessage> },
    Timer { actor: ActorId, timer: Timer },
}

/// Handle through which an actor acts on the world during one step.
pub(crate) struct Ctx<'a> {
    pub now: f64,
    pub me: ActorId,
    pub cfg: &'a ControlConfig,
    pub physics: &'a mut dyn PhysicalLayer,
    pub trace: &'a mut Vec<TraceEntry>,
    pub events: &'a mut Vec<ControlEvent>,
    bus: &'a mut MessageBus,
    queue: &'a mut EventQueue<CpEvent>,
    rng: &'a mut ChaCha8Rng,
    last_delivery: &'a mut BTreeMap<(ActorId, ActorId), f64>,
}

impl Ctx<'_> {
    pub fn publish(
        &mut self,
        topic: impl Into<String>,
        correlation_id: impl Into<String>,
        payload: Payload,
    ) {
        let (msg, receivers) = self
            .bus
            .publish(&self.me, topic, correlation_id, payload)
            .expect("protocol topics are well formed");
        self.trace.push(TraceEntry {
            time: self.now,
            sender: msg.sender.to_string(),
            topic: Some(msg.topic.clone()),
            kind: msg.kind,
            correlation_id: msg.correlation_id.clone(),
            seq: Some(msg.seq),
        });
        let msg = Arc::new(msg);
        for to in receivers {
            let mut t = self.now + self.cfg.bus_latency_s;
            if self.cfg.bus_jitter_s > 0.0 {
                t += self.rng.random::<f64>() * self.cfg.bus_jitter_s;
            }
            let key = (self.me.clone(), to.clone());
            if let Some(&prev) = self.last_delivery.get(&key) {
                t = t.max(prev);
            }
            self.last_delivery.insert(key, t);
            self.queue.push(
                t,
                CpEvent::Deliver {
                    to,
                    msg: Arc::clone(&msg),
                },
            );
        }
    }

    /// Records a local protocol step that does not cross the bus.
    pub fn note(&mut self, correlation_id: impl Into<String>, payload: Payload) {
        self.trace.push(TraceEntry {
            time: self.now,
            sender: self.me.to_string(),
            topic: None,
            kind: payload.kind(),
            correlation_id: correlation_id.into(),
            seq: None,
        });
    }

    pub fn timer(&mut self, delay_s: f64, timer: Timer) {
        self.queue.push(
            self.now + delay_s,
            CpEvent::Timer {
                actor: self.me.clone(),
                timer,
            },
        );
    }

    pub fn subscribe(&mut self, filter: &str) {
        self.bus
            .subscribe(&self.me, filter)
            .expect("protocol filters are well formed");
    }

    pub fn emit(&mut self, event: ControlEvent) {
        self.events.push(event);
    }

    pub fn trace_for(&self, correlation_id: &str) -> Vec<TraceEntry> {
        self.trace
            .iter()
            .filter(|e| e.correlation_id == correlation_id)
            .cloned()
            .collect()
    }
}
