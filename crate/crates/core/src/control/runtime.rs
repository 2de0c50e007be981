//! Single-threaded event loop hosting every control-plane actor.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::agent::{Agent, DeltaError, SimulatedController};
use super::messages::{self, Payload, ReqTopic, TopologyDelta};
use super::physical::{IdealPhysics, PhysicalLayer};
use super::request::{FailureReason, RequestRecord, RequestSpec};
use super::resource::Resource;
use super::server::{DiscoveryPhase, Server};
use super::store::{MeasurementStore, MemoryStore, TraceEntry};
use super::{ControlConfig, ControlEvent, CpEvent, Ctx, Timer, AGENT, SERVER};
use crate::bus::MessageBus;
use crate::event::EventQueue;
use crate::ids::{ActorId, NodeId, RequestId};
use crate::topology::{FiberLink, Node, NodeKind, Topology};

/// The physical plant: node configurations as the resources hold them, and
/// the fibers as the optical controller sees them.
#[derive(Debug, Clone, Default)]
pub struct Plant {
    pub nodes: Vec<Node>,
    pub links: Vec<FiberLink>,
}

impl Plant {
    pub fn from_topology(topology: &Topology) -> Self {
        Self {
            nodes: topology.nodes().cloned().collect(),
            links: topology
                .links()
                .map(|l| {
                    let mut l = l.clone();
                    l.occupied.clear();
                    l
                })
                .collect(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscoveryError {
    #[error("SDN agent unreachable; no topology was built")]
    AgentUnreachable,
    #[error("discovery did not finish")]
    Incomplete,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubmitError {
    #[error("no topology yet; discovery has not completed")]
    NoTopology,
    #[error("unknown Q-node `{0}`")]
    UnknownNode(NodeId),
    #[error("invalid requirements: {}", .0.join(", "))]
    Invalid(Vec<&'static str>),
}

pub struct ControlPlane<P: PhysicalLayer = IdealPhysics> {
    cfg: ControlConfig,
    now: f64,
    queue: EventQueue<CpEvent>,
    bus: MessageBus,
    server: Server,
    agent: Agent,
    resources: BTreeMap<NodeId, Resource>,
    physics: P,
    trace: Vec<TraceEntry>,
    events: Vec<ControlEvent>,
    rng: ChaCha8Rng,
    last_delivery: BTreeMap<(ActorId, ActorId), f64>,
    unreachable: BTreeSet<ActorId>,
    next_request: u64,
    dropped: u64,
    deliveries: Option<Vec<Delivery>>,
}

/// One bus message handed to its receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub time: f64,
    pub sender: ActorId,
    pub receiver: ActorId,
    pub seq: u64,
}

macro_rules! ctx {
    ($s:ident, $me:expr) => {
        Ctx {
            now: $s.now,
            me: $me,
            cfg: &$s.cfg,
            physics: &mut $s.physics,
            trace: &mut $s.trace,
            events: &mut $s.events,
            bus: &mut $s.bus,
            queue: &mut $s.queue,
            rng: &mut $s.rng,
            last_delivery: &mut $s.last_delivery,
        }
    };
}

impl ControlPlane<IdealPhysics> {
    pub fn ideal(plant: Plant, cfg: ControlConfig) -> Self {
        Self::new(
            plant,
            cfg,
            IdealPhysics::new(),
            Box::new(MemoryStore::new()),
        )
    }
}

impl<P: PhysicalLayer> ControlPlane<P> {
    pub fn new(
        plant: Plant,
        cfg: ControlConfig,
        physics: P,
        store: Box<dyn MeasurementStore + Send>,
    ) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut cp = Self {
            now: 0.0,
            queue: EventQueue::new(),
            bus: MessageBus::new(),
            server: Server::new(store),
            agent: Agent::new(SimulatedController::new(plant.nodes.clone(), plant.links)),
            resources: plant
                .nodes
                .into_iter()
                .map(|n| (n.id.clone(), Resource::new(n)))
                .collect(),
            physics,
            trace: Vec::new(),
            events: Vec::new(),
            rng,
            last_delivery: BTreeMap::new(),
            unreachable: BTreeSet::new(),
            next_request: 1,
            dropped: 0,
            deliveries: None,
            cfg,
        };
        let mut ctx = ctx!(cp, ActorId::from(SERVER));
        cp.server.subscribe(&mut ctx);
        let mut ctx = ctx!(cp, ActorId::from(AGENT));
        cp.agent.subscribe(&mut ctx);
        cp
    }

    pub fn config(&self) -> &ControlConfig {
        &self.cfg
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn topology(&self) -> Option<&Topology> {
        self.server.topology()
    }

    pub fn request(&self, id: RequestId) -> Option<&RequestRecord> {
        self.server.request(id)
    }

    pub fn requests(&self) -> impl Iterator<Item = &RequestRecord> {
        self.server.requests().values()
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn physics(&self) -> &P {
        &self.physics
    }

    pub fn physics_mut(&mut self) -> &mut P {
        &mut self.physics
    }

    pub fn dropped_deliveries(&self) -> u64 {
        self.dropped
    }

    /// Starts or stops recording every delivery, dropped ones excluded.
    pub fn record_deliveries(&mut self, on: bool) {
        self.deliveries = on.then(Vec::new);
    }

    pub fn deliveries(&self) -> &[Delivery] {
        self.deliveries.as_deref().unwrap_or(&[])
    }

    /// Takes the observable events produced since the last call.
    pub fn drain_events(&mut self) -> Vec<ControlEvent> {
        std::mem::take(&mut self.events)
    }

    /// Makes an actor deaf: deliveries and timers addressed to it are lost.
    pub fn set_unreachable(&mut self, actor: &ActorId, unreachable: bool) {
        if unreachable {
            self.unreachable.insert(actor.clone());
        } else {
            self.unreachable.remove(actor);
        }
    }

    /// Schedules the discovery sequence at the current time: resources load
    /// their configuration, the agent discovers links from port tags, the
    /// resources register and the server opens its registration window.
    pub fn start_discovery(&mut self) {
        let ids: Vec<NodeId> = self.resources.keys().cloned().collect();
        for id in &ids {
            let mut ctx = ctx!(self, ActorId::from(id));
            self.resources[id].load_config(&mut ctx);
        }
        if !self.unreachable.contains(&ActorId::from(AGENT)) {
            let mut ctx = ctx!(self, ActorId::from(AGENT));
            self.agent.discover(&mut ctx);
        }
        for id in &ids {
            let mut ctx = ctx!(self, ActorId::from(id));
            self.resources[id].register(&mut ctx);
        }
        let mut ctx = ctx!(self, ActorId::from(SERVER));
        self.server.begin_discovery(&mut ctx);
    }

    /// Runs discovery to completion and returns the verified topology.
    pub fn run_discovery(&mut self) -> Result<Topology, DiscoveryError> {
        self.start_discovery();
        while !matches!(
            self.server.phase,
            DiscoveryPhase::Done | DiscoveryPhase::Failed
        ) {
            if !self.step() {
                break;
            }
        }
        match self.server.phase {
            DiscoveryPhase::Done => Ok(self.server.topology().cloned().expect("built")),
            DiscoveryPhase::Failed => Err(DiscoveryError::AgentUnreachable),
            _ => Err(DiscoveryError::Incomplete),
        }
    }

    pub fn discovery_finished(&self) -> bool {
        matches!(
            self.server.phase,
            DiscoveryPhase::Done | DiscoveryPhase::Failed
        )
    }

    /// Ids handed out from now on start at `next`, so that requests
    /// recovered from an earlier run keep theirs.
    pub fn set_next_request_id(&mut self, next: u64) {
        self.next_request = self.next_request.max(next);
    }

    /// Creates a request in Submitted and sends it to the server on behalf
    /// of its user. Processing continues as events run.
    pub fn submit(&mut self, spec: RequestSpec) -> Result<RequestId, SubmitError> {
        let topo = self.server.topology().ok_or(SubmitError::NoTopology)?;
        let bad = spec.requirements.invalid_fields();
        if !bad.is_empty() {
            return Err(SubmitError::Invalid(bad));
        }
        for q in [&spec.qnode_a, &spec.qnode_b] {
            if topo.node(q).map_or(true, |n| n.kind != NodeKind::QNode) {
                return Err(SubmitError::UnknownNode(q.clone()));
            }
        }
        let id = RequestId(self.next_request);
        self.next_request += 1;
        self.server.create(id, &spec, self.now, &mut self.events);
        let portal = ActorId::new(format!("portal:{}", spec.user));
        let mut ctx = ctx!(self, portal);
        ctx.publish(
            messages::req_topic(id, ReqTopic::Submit),
            id.to_string(),
            Payload::Submit { request: id, spec },
        );
        Ok(id)
    }

    /// Submits and runs until the request is terminal.
    pub fn handle_request(&mut self, spec: RequestSpec) -> Result<RequestRecord, SubmitError> {
        let id = self.submit(spec)?;
        while !self.request(id).is_some_and(|r| r.state.is_terminal()) {
            if !self.step() {
                break;
            }
        }
        Ok(self.request(id).cloned().expect("created"))
    }

    /// Hands a plant change to the agent, which reports it to the server.
    pub fn inject_delta(&mut self, delta: TopologyDelta) -> Result<(), DeltaError> {
        let mut ctx = ctx!(self, ActorId::from(AGENT));
        self.agent.observe(delta, &mut ctx)
    }

    /// Injects a change and runs until the server has applied it. Returns the
    /// server's topology version afterwards.
    pub fn notify_topology_change(&mut self, delta: TopologyDelta) -> Result<u64, DeltaError> {
        self.inject_delta(delta)?;
        self.run_until(self.now + self.cfg.bus_latency_s + self.cfg.bus_jitter_s);
        Ok(self.topology().map_or(0, |t| t.version()))
    }

    pub fn next_event_time(&self) -> Option<f64> {
        self.queue.peek_time()
    }

    /// Moves the clock forward without running anything. Refuses to skip
    /// pending events.
    pub fn advance_to(&mut self, t: f64) {
        if let Some(next) = self.queue.peek_time() {
            assert!(next >= t, "advance_to would skip a pending event");
        }
        if t > self.now {
            self.now = t;
        }
    }

    /// Executes the earliest event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some((time, _, event)) = self.queue.pop() else {
            return false;
        };
        debug_assert!(time >= self.now, "event scheduled in the past");
        self.now = self.now.max(time);
        match event {
            CpEvent::Deliver { to, msg } => {
                if self.unreachable.contains(&to) {
                    self.dropped += 1;
                    return true;
                }
                if let Some(log) = &mut self.deliveries {
                    log.push(Delivery {
                        time,
                        sender: msg.sender.clone(),
                        receiver: to.clone(),
                        seq: msg.seq,
                    });
                }
                self.dispatch(&to, |actor, ctx| actor.on_message(&msg, ctx));
            }
            CpEvent::Timer { actor, timer } => {
                if self.unreachable.contains(&actor) {
                    return true;
                }
                self.dispatch_timer(&actor, timer);
            }
        }
        true
    }

    fn dispatch(&mut self, to: &ActorId, f: impl FnOnce(ActorRef<'_>, &mut Ctx)) {
        let mut ctx = ctx!(self, to.clone());
        match to.as_str() {
            SERVER => f(ActorRef::Server(&mut self.server), &mut ctx),
            AGENT => f(ActorRef::Agent(&mut self.agent), &mut ctx),
            other => {
                if let Some(r) = self.resources.get_mut(&NodeId::new(other)) {
                    f(ActorRef::Resource(r), &mut ctx);
                }
            }
        }
    }

    fn dispatch_timer(&mut self, to: &ActorId, timer: Timer) {
        self.dispatch(to, |actor, ctx| actor.on_timer(timer, ctx));
    }

    /// Runs every event scheduled at or before `t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: f64) {
        while self.queue.peek_time().is_some_and(|next| next <= t) {
            self.step();
        }
        if t > self.now {
            self.now = t;
        }
    }

    /// Runs until no events remain.
    pub fn run_until_idle(&mut self) {
        while self.step() {}
    }

    /// Fails every live request with `reason`.
    pub fn abort_live(&mut self, reason: FailureReason) {
        let mut ctx = ctx!(self, ActorId::from(SERVER));
        self.server.abort_all(reason, &mut ctx);
    }
}

enum ActorRef<'a> {
    Server(&'a mut Server),
    Agent(&'a mut Agent),
    Resource(&'a mut Resource),
}

impl ActorRef<'_> {
    fn on_message(self, msg: &crate::bus::BusMessage, ctx: &mut Ctx) {
        match self {
            ActorRef::Server(s) => s.on_message(msg, ctx),
            ActorRef::Agent(a) => a.on_message(msg, ctx),
            ActorRef::Resource(r) => r.on_message(msg, ctx),
        }
    }

    fn on_timer(self, timer: Timer, ctx: &mut Ctx) {
        match self {
            ActorRef::Server(s) => s.on_timer(timer, ctx),
            ActorRef::Agent(a) => a.on_timer(timer, ctx),
            ActorRef::Resource(r) => r.on_timer(timer, ctx),
        }
    }
}

/// Projects a trace onto its message kinds, collapsing consecutive repeats.
pub fn kind_sequence(trace: &[TraceEntry]) -> Vec<messages::MessageKind> {
    let mut out: Vec<messages::MessageKind> = Vec::new();
    for e in trace {
        if out.last() != Some(&e.kind) {
            out.push(e.kind);
        }
    }
    out
}
