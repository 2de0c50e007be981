//! The Q-NET server: resource registry, topology owner and request
//! orchestrator.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::messages::{
    self, req_topic, topic_request, AnalyzeOutcome, Payload, ProbeDirection, ReqTopic, TagClaim,
    TopologyDelta,
};
use super::request::{
    FailureReason, MeasurementRow, ReadyLedger, RequestRecord, RequestSpec, RequestState,
};
use super::store::{record_id_for, MeasurementRecord, MeasurementStore, PhysicsSummary};
use super::{AdmissionPolicy, ControlConfig, ControlEvent, Ctx, Timer};
use crate::bus::BusMessage;
use crate::ids::{ActorId, NodeId, RequestId};
use crate::physics::transmittance;
use crate::rwa::{plan_bsm, plan_entanglement, RouteAllocation, RwaError};
use crate::topology::{FeatureSet, FiberLink, Node, NodeKind, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceState {
    Registered,
    Verified,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceRecord {
    pub id: NodeId,
    pub kind: NodeKind,
    pub features: FeatureSet,
    /// Non-empty port tags, as `port=tag`.
    pub connectivity: Vec<String>,
    pub state: ResourceState,
    #[serde(skip)]
    node: Option<Node>,
}

impl ResourceRecord {
    fn from_node(node: &Node, state: ResourceState) -> Self {
        Self {
            id: node.id.clone(),
            kind: node.kind,
            features: node.features.clone(),
            connectivity: node
                .ports
                .iter()
                .filter(|p| !p.tag.is_empty())
                .map(|p| format!("{}={}", p.id, p.tag))
                .collect(),
            state,
            node: Some(node.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum DiscoveryPhase {
    Idle,
    Registering,
    AwaitTopology,
    Verifying,
    Done,
    Failed,
}

#[derive(Debug, Default)]
struct Active {
    epoch: u64,
    ledger: Option<ReadyLedger>,
    probes: BTreeSet<(usize, bool)>,
    expected_probes: usize,
    ends: BTreeSet<NodeId>,
    ends_complete: bool,
    notified: bool,
    setup_sent: bool,
}

struct Candidate {
    allocation: RouteAllocation,
    derated_rate: f64,
    loss: f64,
}

struct Rejection {
    reason: FailureReason,
    /// Would succeed once other requests release resources.
    retryable: bool,
}

pub struct Server {
    resources: BTreeMap<NodeId, ResourceRecord>,
    pub(crate) phase: DiscoveryPhase,
    discovered: Vec<FiberLink>,
    pending_verify: BTreeSet<NodeId>,
    diagnostics: Vec<String>,
    topology: Option<Topology>,
    requests: BTreeMap<RequestId, RequestRecord>,
    active: BTreeMap<RequestId, Active>,
    waiting: VecDeque<RequestId>,
    store: Box<dyn MeasurementStore + Send>,
}

impl Server {
    pub fn new(store: Box<dyn MeasurementStore + Send>) -> Self {
        Self {
            resources: BTreeMap::new(),
            phase: DiscoveryPhase::Idle,
            discovered: Vec::new(),
            pending_verify: BTreeSet::new(),
            diagnostics: Vec::new(),
            topology: None,
            requests: BTreeMap::new(),
            active: BTreeMap::new(),
            waiting: VecDeque::new(),
            store,
        }
    }

    pub fn topology(&self) -> Option<&Topology> {
        self.topology.as_ref()
    }

    pub fn resources(&self) -> &BTreeMap<NodeId, ResourceRecord> {
        &self.resources
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    pub fn request(&self, id: RequestId) -> Option<&RequestRecord> {
        self.requests.get(&id)
    }

    pub fn requests(&self) -> &BTreeMap<RequestId, RequestRecord> {
        &self.requests
    }

    pub fn store(&self) -> &dyn MeasurementStore {
        self.store.as_ref()
    }

    pub fn waiting(&self) -> impl Iterator<Item = &RequestId> {
        self.waiting.iter()
    }

    pub(crate) fn subscribe(&self, ctx: &mut Ctx) {
        for t in [
            messages::REGISTER,
            messages::TOPOLOGY_RESPONSE,
            messages::TOPOLOGY_CHANGE,
            messages::VERIFY_RESP,
            "qnet/req/#",
        ] {
            ctx.subscribe(t);
        }
    }

    pub(crate) fn begin_discovery(&mut self, ctx: &mut Ctx) {
        self.phase = DiscoveryPhase::Registering;
        ctx.timer(ctx.cfg.registration_window_s, Timer::RegistrationWindow);
    }

    /// Creates the record for a newly submitted request.
    pub(crate) fn create(
        &mut self,
        id: RequestId,
        spec: &RequestSpec,
        now: f64,
        events: &mut Vec<ControlEvent>,
    ) {
        self.requests.insert(id, RequestRecord::new(id, spec, now));
        events.push(ControlEvent::Transition {
            request: id,
            time: now,
            from: None,
            to: RequestState::Submitted,
        });
    }

    pub(crate) fn on_message(&mut self, msg: &BusMessage, ctx: &mut Ctx) {
        match &msg.payload {
            Payload::Register { node } => {
                if self.phase == DiscoveryPhase::Registering || self.phase == DiscoveryPhase::Idle {
                    self.resources.insert(
                        node.id.clone(),
                        ResourceRecord::from_node(node, ResourceState::Registered),
                    );
                }
            }
            Payload::TopologyResponse { links } => self.on_topology_response(links, ctx),
            Payload::VerifyResponse {
                resource,
                verified,
                unconfirmed,
            } => self.on_verify_response(resource, *verified, unconfirmed, ctx),
            Payload::TopologyChange { delta } => self.apply_delta(delta, ctx),
            _ => {
                if let Some(id) = topic_request(&msg.topic) {
                    self.on_request_message(id, msg, ctx);
                }
            }
        }
    }

    pub(crate) fn on_timer(&mut self, timer: Timer, ctx: &mut Ctx) {
        match timer {
            Timer::RegistrationWindow => {
                if self.phase == DiscoveryPhase::Registering {
                    self.phase = DiscoveryPhase::AwaitTopology;
                    ctx.publish(
                        messages::TOPOLOGY_REQUEST,
                        "discovery",
                        Payload::TopologyRequest,
                    );
                    ctx.timer(ctx.cfg.discovery_timeout_s, Timer::DiscoveryTimeout);
                }
            }
            Timer::DiscoveryTimeout => {
                if matches!(
                    self.phase,
                    DiscoveryPhase::AwaitTopology | DiscoveryPhase::Verifying
                ) {
                    self.phase = DiscoveryPhase::Failed;
                    self.diagnostics
                        .push("SDN agent did not answer; discovery aborted".into());
                    ctx.emit(ControlEvent::DiscoveryFinished {
                        time: ctx.now,
                        ok: false,
                    });
                }
            }
            Timer::Phase { request, epoch } => {
                if self.active.get(&request).is_some_and(|a| a.epoch == epoch) {
                    warn!(%request, "phase deadline expired");
                    self.fail(request, FailureReason::Timeout, ctx);
                }
            }
            Timer::EndTimeout { request } => {
                if self.active.get(&request).is_some_and(|a| !a.ends_complete) {
                    self.fail(request, FailureReason::Timeout, ctx);
                }
            }
            Timer::Recalibrate { request, epoch } => {
                let due = self.active.get(&request).is_some_and(|a| a.epoch == epoch)
                    && self.state(request) == Some(RequestState::Distributing);
                if due {
                    self.start_recalibration(request, ctx);
                }
            }
            _ => {}
        }
    }

    fn on_topology_response(&mut self, links: &[FiberLink], ctx: &mut Ctx) {
        if self.phase != DiscoveryPhase::AwaitTopology {
            return;
        }
        self.discovered = links.to_vec();
        self.phase = DiscoveryPhase::Verifying;
        let ids: Vec<NodeId> = self.resources.keys().cloned().collect();
        for id in &ids {
            let rec = &self.resources[id];
            let claims = rec
                .node
                .as_ref()
                .map(|n| {
                    n.ports
                        .iter()
                        .filter(|p| !p.tag.is_empty())
                        .map(|p| TagClaim {
                            port: p.id.clone(),
                            tag: p.tag.clone(),
                        })
                        .collect()
                })
                .unwrap_or_default();
            self.pending_verify.insert(id.clone());
            ctx.publish(
                messages::VERIFY_REQ,
                "discovery",
                Payload::VerifyRequest {
                    resource: id.clone(),
                    claims,
                },
            );
        }
        if ids.is_empty() {
            self.build_topology(ctx);
        }
    }

    fn on_verify_response(
        &mut self,
        resource: &NodeId,
        verified: bool,
        unconfirmed: &[String],
        ctx: &mut Ctx,
    ) {
        if self.phase != DiscoveryPhase::Verifying || !self.pending_verify.remove(resource) {
            return;
        }
        if let Some(rec) = self.resources.get_mut(resource) {
            if verified {
                rec.state = ResourceState::Verified;
            } else {
                rec.state = ResourceState::Lost;
                for u in unconfirmed {
                    self.diagnostics.push(format!(
                        "resource {resource} excluded: agent cannot confirm {u}"
                    ));
                }
            }
        }
        if self.pending_verify.is_empty() {
            self.build_topology(ctx);
        }
    }

    fn build_topology(&mut self, ctx: &mut Ctx) {
        let verified: Vec<Node> = self
            .resources
            .values()
            .filter(|r| r.state == ResourceState::Verified)
            .filter_map(|r| r.node.clone())
            .collect();
        let ids: BTreeSet<&NodeId> = verified.iter().map(|n| &n.id).collect();
        let links: Vec<FiberLink> = self
            .discovered
            .iter()
            .filter(|l| ids.contains(&l.a.node) && ids.contains(&l.b.node))
            .filter(|l| {
                [&l.a, &l.b].iter().all(|e| {
                    verified
                        .iter()
                        .find(|n| n.id == e.node)
                        .is_some_and(|n| n.port(&e.port).is_some())
                })
            })
            .cloned()
            .collect();
        let lost: Vec<NodeId> = self
            .resources
            .values()
            .filter(|r| r.state == ResourceState::Lost)
            .map(|r| r.id.clone())
            .collect();
        let topology = Topology::from_parts(verified, links);
        ctx.note(
            "discovery",
            Payload::TopologyBuilt {
                nodes: topology.nodes().map(|n| n.id.clone()).collect(),
                links: topology.links().map(|l| l.id.clone()).collect(),
                lost,
            },
        );
        self.topology = Some(topology);
        self.phase = DiscoveryPhase::Done;
        ctx.emit(ControlEvent::DiscoveryFinished {
            time: ctx.now,
            ok: true,
        });
    }

    fn state(&self, id: RequestId) -> Option<RequestState> {
        self.requests.get(&id).map(|r| r.state)
    }

    fn transition(&mut self, id: RequestId, to: RequestState, ctx: &mut Ctx) -> bool {
        let Some(rec) = self.requests.get_mut(&id) else {
            return false;
        };
        let from = rec.state;
        if !rec.transition(to, ctx.now) {
            warn!(%id, %from, %to, "refused state transition");
            return false;
        }
        if let Some(a) = self.active.get_mut(&id) {
            a.epoch += 1;
        }
        ctx.emit(ControlEvent::Transition {
            request: id,
            time: ctx.now,
            from: Some(from),
            to,
        });
        true
    }

    fn epoch(&self, id: RequestId) -> u64 {
        self.active.get(&id).map_or(0, |a| a.epoch)
    }

    fn arm_phase_timer(&self, id: RequestId, ctx: &mut Ctx) {
        ctx.timer(
            ctx.cfg.phase_timeout_s,
            Timer::Phase {
                request: id,
                epoch: self.epoch(id),
            },
        );
    }

    fn on_request_message(&mut self, id: RequestId, msg: &BusMessage, ctx: &mut Ctx) {
        let Some(state) = self.state(id) else {
            return;
        };
        if state.is_terminal() {
            return;
        }
        let corr = id.to_string();
        match &msg.payload {
            Payload::Submit { .. } => {
                if state == RequestState::Submitted && !self.active.contains_key(&id) {
                    if ctx.cfg.admission == AdmissionPolicy::Queue && !self.waiting.is_empty() {
                        self.waiting.push_back(id);
                        ctx.publish(
                            req_topic(id, ReqTopic::Analyze),
                            corr,
                            Payload::Analyze {
                                outcome: AnalyzeOutcome::Queued,
                            },
                        );
                    } else {
                        self.analyze(id, true, ctx);
                    }
                }
            }
            Payload::PathsEstablished { ok } => {
                if state != RequestState::Analyzing || msg.sender.as_str() != super::AGENT {
                    return;
                }
                if !ok {
                    self.fail(id, FailureReason::RouteLost, ctx);
                    return;
                }
                self.transition(id, RequestState::PathsEstablished, ctx);
                let rec = &self.requests[&id];
                let allocation = rec.route.clone().expect("route set at analysis");
                let qnodes = [rec.qnode_a.clone(), rec.qnode_b.clone()];
                let participants = participants(&allocation, &qnodes);
                ctx.publish(
                    req_topic(id, ReqTopic::Paths),
                    corr.clone(),
                    Payload::PathsNotify {
                        allocation: allocation.clone(),
                        participants,
                        qnodes,
                    },
                );
                if let Some(a) = self.active.get_mut(&id) {
                    a.notified = true;
                    a.expected_probes = allocation.legs().len() * 2;
                }
                self.transition(id, RequestState::Verifying, ctx);
                ctx.publish(req_topic(id, ReqTopic::Verify), corr, Payload::ProbeRequest);
                self.arm_phase_timer(id, ctx);
            }
            Payload::ProbeReport {
                leg,
                direction,
                measured_db,
            } => {
                if state != RequestState::Verifying {
                    return;
                }
                let allocation = self.requests[&id].route.clone().expect("route set");
                let legs = allocation.legs();
                let Some(path) = legs.get(*leg) else { return };
                let expected_sender = match direction {
                    ProbeDirection::Forward => &path.src,
                    ProbeDirection::Reverse => &path.dst,
                };
                if msg.sender.as_str() != expected_sender.as_str() {
                    return;
                }
                if (measured_db - path.total_loss_db).abs() > ctx.cfg.probe_tolerance_db {
                    warn!(%id, leg, measured_db, expected = path.total_loss_db, "probe loss mismatch");
                    self.fail(id, FailureReason::Verification, ctx);
                    return;
                }
                let a = self.active.get_mut(&id).expect("active");
                a.probes
                    .insert((*leg, *direction == ProbeDirection::Forward));
                if a.probes.len() == a.expected_probes {
                    self.transition(id, RequestState::Calibrating, ctx);
                    let rec = &self.requests[&id];
                    let ledger = ReadyLedger::new(id, &allocation, [&rec.qnode_a, &rec.qnode_b]);
                    self.active.get_mut(&id).expect("active").ledger = Some(ledger);
                    ctx.publish(
                        req_topic(id, ReqTopic::Calibrate),
                        corr,
                        Payload::Calibrate {
                            recalibration: false,
                        },
                    );
                    self.arm_phase_timer(id, ctx);
                }
            }
            Payload::Ready => {
                if state != RequestState::Calibrating {
                    return;
                }
                let a = self.active.get_mut(&id).expect("active");
                let ledger = a.ledger.as_mut().expect("ledger created with calibration");
                if !ledger.record(&msg.sender) {
                    warn!(%id, sender = %msg.sender, "READY from non-participant ignored");
                    return;
                }
                if ledger.complete() {
                    self.transition(id, RequestState::Ready, ctx);
                    let req = self.requests[&id].requirements;
                    ctx.publish(
                        req_topic(id, ReqTopic::Start),
                        corr,
                        Payload::Start {
                            rate: req.rate,
                            target_records: req.target_records(),
                        },
                    );
                    self.transition(id, RequestState::Distributing, ctx);
                    self.arm_recalibration(id, ctx);
                }
            }
            Payload::CalibrationDone {
                converged,
                recalibration,
                ..
            } => {
                if !converged {
                    self.fail(id, FailureReason::Calibration, ctx);
                    return;
                }
                if *recalibration && state == RequestState::Recalibrating {
                    let Some(allocation) = self.requests[&id].route.clone() else {
                        return;
                    };
                    let eps: BTreeSet<ActorId> =
                        allocation.eps_nodes().iter().map(ActorId::from).collect();
                    if !eps.contains(&msg.sender) {
                        return;
                    }
                    // With two sources, wait for both to finish.
                    let a = self.active.get_mut(&id).expect("active");
                    let ledger = a.ledger.get_or_insert_with(|| ReadyLedger {
                        request_id: id,
                        expected: eps.clone(),
                        received: BTreeSet::new(),
                    });
                    ledger.record(&msg.sender);
                    if !ledger.complete() {
                        return;
                    }
                    a.ledger = None;
                    self.transition(id, RequestState::Distributing, ctx);
                    if self.active[&id].ends_complete {
                        self.complete(id, ctx);
                    } else {
                        self.arm_recalibration(id, ctx);
                    }
                }
            }
            Payload::Measurement { sample } => {
                if !matches!(
                    state,
                    RequestState::Distributing | RequestState::Recalibrating
                ) {
                    return;
                }
                let node = NodeId::new(msg.sender.as_str());
                let rec = self.requests.get_mut(&id).expect("request");
                if node != rec.qnode_a && node != rec.qnode_b {
                    return;
                }
                rec.measurements.push(MeasurementRow {
                    time: ctx.now,
                    node: node.clone(),
                    records: sample.records,
                    coincidences: sample.coincidences,
                    accidentals: sample.accidentals,
                    car: sample.car,
                    visibility: sample.visibility,
                    fidelity: sample.fidelity,
                });
                ctx.emit(ControlEvent::Measurement {
                    request: id,
                    time: ctx.now,
                    node,
                    sample: *sample,
                });
            }
            Payload::End { .. } => self.collect_end_signal(id, &msg.sender, ctx),
            _ => {}
        }
    }

    /// Records one END. Completion follows once both Q-nodes have sent one.
    fn collect_end_signal(&mut self, id: RequestId, sender: &ActorId, ctx: &mut Ctx) {
        let Some(state) = self.state(id) else { return };
        if !matches!(
            state,
            RequestState::Distributing | RequestState::Recalibrating
        ) {
            return;
        }
        let rec = &self.requests[&id];
        let node = NodeId::new(sender.as_str());
        if node != rec.qnode_a && node != rec.qnode_b {
            warn!(%id, %sender, "END from non-participant ignored");
            return;
        }
        let a = self.active.get_mut(&id).expect("active");
        let first = a.ends.is_empty();
        a.ends.insert(node);
        if a.ends.len() < 2 {
            if first {
                ctx.timer(ctx.cfg.end_timeout_s, Timer::EndTimeout { request: id });
            }
            return;
        }
        a.ends_complete = true;
        if state == RequestState::Distributing {
            self.complete(id, ctx);
        }
    }

    fn arm_recalibration(&self, id: RequestId, ctx: &mut Ctx) {
        if ctx.cfg.recalibration_period_s > 0.0 {
            ctx.timer(
                ctx.cfg.recalibration_period_s,
                Timer::Recalibrate {
                    request: id,
                    epoch: self.epoch(id),
                },
            );
        }
    }

    fn start_recalibration(&mut self, id: RequestId, ctx: &mut Ctx) {
        if !self.transition(id, RequestState::Recalibrating, ctx) {
            return;
        }
        if let Some(a) = self.active.get_mut(&id) {
            a.ledger = None;
        }
        ctx.publish(
            req_topic(id, ReqTopic::Calibrate),
            id.to_string(),
            Payload::Calibrate {
                recalibration: true,
            },
        );
        self.arm_phase_timer(id, ctx);
    }

    /// Analyzes a submitted request: validates endpoints, selects an EPS and
    /// commits its route. Returns false when the request stays queued.
    fn analyze(&mut self, id: RequestId, announce_queue: bool, ctx: &mut Ctx) -> bool {
        let corr = id.to_string();
        let result = self.select(id, ctx.cfg);
        match result {
            Ok(c) => {
                let topo = self.topology.as_mut().expect("selection needs a topology");
                if topo.occupy_all(&c.allocation.claims()).is_err() {
                    self.transition(id, RequestState::Analyzing, ctx);
                    self.fail(id, FailureReason::Blocked, ctx);
                    return true;
                }
                self.active.insert(id, Active::default());
                self.transition(id, RequestState::Analyzing, ctx);
                let rec = self.requests.get_mut(&id).expect("request");
                rec.route = Some(c.allocation.clone());
                ctx.publish(
                    req_topic(id, ReqTopic::Analyze),
                    corr.clone(),
                    Payload::Analyze {
                        outcome: AnalyzeOutcome::Selected {
                            eps: c.allocation.eps_nodes(),
                            bsm: c.allocation.bsm().cloned(),
                            derated_rate: c.derated_rate,
                            total_loss_db: c.loss,
                        },
                    },
                );
                ctx.publish(
                    req_topic(id, ReqTopic::Paths),
                    corr,
                    Payload::PathSetup {
                        allocation: c.allocation,
                    },
                );
                self.active.get_mut(&id).expect("active").setup_sent = true;
                self.arm_phase_timer(id, ctx);
                true
            }
            Err(r) if r.retryable && ctx.cfg.admission == AdmissionPolicy::Queue => {
                if announce_queue {
                    self.waiting.push_back(id);
                    ctx.publish(
                        req_topic(id, ReqTopic::Analyze),
                        corr,
                        Payload::Analyze {
                            outcome: AnalyzeOutcome::Queued,
                        },
                    );
                }
                false
            }
            Err(r) => {
                self.transition(id, RequestState::Analyzing, ctx);
                ctx.publish(
                    req_topic(id, ReqTopic::Analyze),
                    corr,
                    Payload::Analyze {
                        outcome: AnalyzeOutcome::Rejected { reason: r.reason },
                    },
                );
                self.fail(id, r.reason, ctx);
                true
            }
        }
    }

    fn endpoints_valid(&self, rec: &RequestRecord, topo: &Topology) -> bool {
        if rec.qnode_a == rec.qnode_b {
            return false;
        }
        [&rec.qnode_a, &rec.qnode_b].iter().all(|q| {
            topo.node(q).is_ok_and(|n| n.kind == NodeKind::QNode)
                && self
                    .resources
                    .get(*q)
                    .is_some_and(|r| r.state == ResourceState::Verified)
        })
    }

    /// EPS selection: among sources whose pair rate, derated by both leg
    /// transmittances, meets the requested rate and that have a free channel
    /// pair routable to both Q-nodes, the one with the smallest total leg
    /// loss wins, ties going to the smaller id. When no single source fits,
    /// two sources joined at a BSM node are tried the same way.
    fn select(&self, id: RequestId, cfg: &ControlConfig) -> Result<Candidate, Rejection> {
        let reject = |reason, retryable| Rejection { reason, retryable };
        let Some(topo) = self.topology.as_ref() else {
            return Err(reject(FailureReason::InvalidEndpoints, false));
        };
        let rec = &self.requests[&id];
        if !self.endpoints_valid(rec, topo) {
            return Err(reject(FailureReason::InvalidEndpoints, false));
        }
        let rate = rec.requirements.rate;
        let (qa, qb) = (&rec.qnode_a, &rec.qnode_b);
        let mut busy = false;
        let mut blocked = false;
        let mut best: Option<Candidate> = None;
        let consider = |c: Candidate, best: &mut Option<Candidate>| {
            if best.as_ref().is_none_or(|b| c.loss < b.loss) {
                *best = Some(c);
            }
        };
        let eps_nodes: Vec<&Node> = topo.nodes_of_kind(NodeKind::Eps).collect();
        for eps in &eps_nodes {
            let pair_rate = eps.features.eps.as_ref().map_or(0.0, |f| f.pair_rate_cps);
            match plan_entanglement(topo, id, &eps.id, qa, qb, &cfg.rwa) {
                Ok(route) => {
                    let derated = pair_rate
                        * transmittance(route.leg_a.total_loss_db)
                        * transmittance(route.leg_b.total_loss_db);
                    if derated >= rate {
                        let loss = route.total_loss_db();
                        consider(
                            Candidate {
                                allocation: RouteAllocation::Direct(route),
                                derated_rate: derated,
                                loss,
                            },
                            &mut best,
                        );
                    }
                }
                Err(RwaError::NoFreePair(_)) => busy = true,
                Err(RwaError::Blocked { .. }) => blocked = true,
                Err(e) => debug!(%id, eps = %eps.id, error = %e, "EPS not usable"),
            }
        }
        if best.is_none() {
            for bsm in topo.nodes_of_kind(NodeKind::BsmNode) {
                for e1 in &eps_nodes {
                    for e2 in &eps_nodes {
                        if e1.id == e2.id {
                            continue;
                        }
                        match plan_bsm(topo, id, &e1.id, &e2.id, &bsm.id, qa, qb, &cfg.rwa) {
                            Ok((first, second)) => {
                                let r = |n: &Node, route: &crate::rwa::EntanglementRoute| {
                                    n.features.eps.as_ref().map_or(0.0, |f| f.pair_rate_cps)
                                        * transmittance(route.leg_a.total_loss_db)
                                        * transmittance(route.leg_b.total_loss_db)
                                };
                                let derated =
                                    r(e1, &first).min(r(e2, &second)) * cfg.bsm_success_prob;
                                if derated >= rate {
                                    let loss = first.total_loss_db() + second.total_loss_db();
                                    consider(
                                        Candidate {
                                            allocation: RouteAllocation::Swap {
                                                bsm: bsm.id.clone(),
                                                first,
                                                second,
                                            },
                                            derated_rate: derated,
                                            loss,
                                        },
                                        &mut best,
                                    );
                                }
                            }
                            Err(RwaError::NoFreePair(_)) => busy = true,
                            Err(RwaError::Blocked { .. }) => blocked = true,
                            Err(_) => {}
                        }
                    }
                }
            }
        }
        match best {
            Some(c) => Ok(c),
            None if blocked => Err(reject(FailureReason::Blocked, true)),
            None => Err(reject(FailureReason::NoEps, busy)),
        }
    }

    /// Both ENDs received: stop the sources, release the paths, store.
    fn complete(&mut self, id: RequestId, ctx: &mut Ctx) {
        let corr = id.to_string();
        ctx.publish(
            req_topic(id, ReqTopic::Stop),
            corr.clone(),
            Payload::Stop { reason: None },
        );
        self.teardown(id, ctx);
        self.transition(id, RequestState::Completed, ctx);
        self.store_measurements(id, ctx);
        self.finish(id, ctx);
    }

    /// Fails a request from any live state, releasing whatever it holds.
    pub(crate) fn fail(&mut self, id: RequestId, reason: FailureReason, ctx: &mut Ctx) {
        if self.state(id).is_none_or(|s| s.is_terminal()) {
            return;
        }
        self.waiting.retain(|w| *w != id);
        let notified = self.active.get(&id).is_some_and(|a| a.notified);
        if notified {
            ctx.publish(
                req_topic(id, ReqTopic::Stop),
                id.to_string(),
                Payload::Stop {
                    reason: Some(reason),
                },
            );
        }
        self.teardown(id, ctx);
        self.transition(id, RequestState::Failed(reason), ctx);
        self.store_measurements(id, ctx);
        self.finish(id, ctx);
    }

    fn teardown(&mut self, id: RequestId, ctx: &mut Ctx) {
        let Some(allocation) = self.requests.get(&id).and_then(|r| r.route.clone()) else {
            return;
        };
        if let Some(topo) = self.topology.as_mut() {
            if let Err(e) = topo.release_all(&allocation.claims()) {
                warn!(%id, error = %e, "route release failed, freeing by owner");
                topo.release_owner(id);
            }
        }
        if self.active.get(&id).is_some_and(|a| a.setup_sent) {
            ctx.publish(
                req_topic(id, ReqTopic::Paths),
                id.to_string(),
                Payload::PathTeardown { allocation },
            );
        }
    }

    /// Persists the record of a terminal request and announces it.
    fn store_measurements(&mut self, id: RequestId, ctx: &mut Ctx) {
        let rec = self.requests.get(&id).expect("request");
        let record = MeasurementRecord {
            record_id: record_id_for(id),
            request_id: id,
            state: rec.state,
            route: rec.route.clone(),
            rows: rec.measurements.clone(),
            trace: ctx.trace_for(&id.to_string()),
            physics: PhysicsSummary::from_rows(&rec.measurements),
        };
        let stored = self.store.put(record);
        let rec = self.requests.get_mut(&id).expect("request");
        match stored {
            Ok(rid) => rec.record_id = Some(rid),
            Err(e) => {
                warn!(%id, error = %e, "measurement store failed");
                rec.data_loss = true;
            }
        }
        let payload = Payload::Stored {
            record_id: rec.record_id.clone(),
            state: rec.state,
            data_loss: rec.data_loss,
        };
        ctx.publish(req_topic(id, ReqTopic::Stored), id.to_string(), payload);
    }

    fn finish(&mut self, id: RequestId, ctx: &mut Ctx) {
        self.active.remove(&id);
        self.admit_waiting(ctx);
    }

    /// Retries queued requests in arrival order, stopping at the first one
    /// that still cannot be placed.
    fn admit_waiting(&mut self, ctx: &mut Ctx) {
        while let Some(&next) = self.waiting.front() {
            if self.state(next) != Some(RequestState::Submitted) {
                self.waiting.pop_front();
                continue;
            }
            self.waiting.pop_front();
            if !self.analyze(next, false, ctx) {
                self.waiting.push_front(next);
                break;
            }
        }
    }

    fn apply_delta(&mut self, delta: &TopologyDelta, ctx: &mut Ctx) {
        let Some(topo) = self.topology.as_mut() else {
            warn!("topology change before discovery ignored");
            return;
        };
        let mut broken_links = Vec::new();
        let mut broken_node = None;
        let mut degraded = None;
        match delta {
            TopologyDelta::LinkDown { link } => {
                if topo.remove_link(link).is_err() {
                    topo.mark_changed();
                }
                broken_links.push(link.clone());
            }
            TopologyDelta::LinkUp { link } => {
                let mut l = link.clone();
                l.occupied.clear();
                if let Err(e) = topo.add_link(l) {
                    warn!(error = %e, "link up not applied");
                    topo.mark_changed();
                }
            }
            TopologyDelta::NodeDown { node } => {
                match topo.remove_node(node) {
                    Ok(links) => broken_links.extend(links.into_iter().map(|l| l.id)),
                    Err(_) => topo.mark_changed(),
                }
                if let Some(r) = self.resources.get_mut(node) {
                    r.state = ResourceState::Lost;
                }
                broken_node = Some(node.clone());
            }
            TopologyDelta::NodeUp { node } => {
                if let Err(e) = topo.add_node(node.clone()) {
                    warn!(error = %e, "node up not applied");
                    topo.mark_changed();
                }
                self.resources.insert(
                    node.id.clone(),
                    ResourceRecord::from_node(node, ResourceState::Registered),
                );
            }
            TopologyDelta::LinkDegraded { link, .. } => {
                topo.mark_changed();
                degraded = Some(link.clone());
            }
        }
        let version = topo.version();
        ctx.emit(ControlEvent::TopologyChanged {
            time: ctx.now,
            version,
        });

        let live: Vec<(RequestId, RouteAllocation)> = self
            .requests
            .values()
            .filter(|r| !r.state.is_terminal())
            .filter_map(|r| r.route.clone().map(|a| (r.id, a)))
            .collect();
        for (id, allocation) in live {
            let lost = broken_links.iter().any(|l| allocation.uses_link(l))
                || broken_node
                    .as_ref()
                    .is_some_and(|n| allocation.touches_node(n));
            if lost {
                self.fail(id, FailureReason::RouteLost, ctx);
            } else if degraded.as_ref().is_some_and(|l| allocation.uses_link(l))
                && self.state(id) == Some(RequestState::Distributing)
            {
                self.start_recalibration(id, ctx);
            }
        }
    }

    /// Marks every live request Failed(reason), for shutdown.
    pub(crate) fn abort_all(&mut self, reason: FailureReason, ctx: &mut Ctx) {
        let live: Vec<RequestId> = self
            .requests
            .values()
            .filter(|r| !r.state.is_terminal())
            .map(|r| r.id)
            .collect();
        for id in live {
            self.fail(id, reason, ctx);
        }
    }
}

fn participants(allocation: &RouteAllocation, qnodes: &[NodeId; 2]) -> Vec<NodeId> {
    let mut set: BTreeSet<NodeId> = allocation.eps_nodes().into_iter().collect();
    set.extend(qnodes.iter().cloned());
    if let Some(b) = allocation.bsm() {
        set.insert(b.clone());
    }
    set.into_iter().collect()
}
