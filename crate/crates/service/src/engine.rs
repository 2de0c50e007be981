//! The control plane on its own thread. HTTP handlers send it commands;
//! it publishes snapshots and journals every event it emits.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use qnet_core::control::agent::DeltaError;
use qnet_core::control::store::record_id_for;
use qnet_core::control::{
    ControlConfig, ControlEvent, ControlPlane, FailureReason, MeasurementRecord, PhysicsSummary,
    Plant, RequestSpec, ResourceRecord, SubmitError, TopologyDelta,
};
use qnet_core::physics::profiles::Profile;
use qnet_core::sim::SimPhysics;
use qnet_core::topology::{FiberLink, Node, Topology, WavelengthChannel};
use qnet_core::RequestId;
use serde::Serialize;
use tokio::sync::{oneshot, watch};

use crate::model::{RequestStatus, ServiceEvent};
use crate::store::{FileStore, SharedStore};

/// Steps taken per loop iteration when running unthrottled.
const UNTHROTTLED_BATCH: usize = 20_000;

#[derive(Debug, Clone, Serialize)]
pub struct Occupancy {
    pub channel: WavelengthChannel,
    pub request: RequestId,
}

#[derive(Debug, Clone, Serialize)]
pub struct LinkView {
    #[serde(flatten)]
    pub link: FiberLink,
    pub occupied: Vec<Occupancy>,
}

/// The verified topology at one version.
#[derive(Debug, Clone, Serialize)]
pub struct TopologyView {
    pub version: u64,
    pub nodes: Vec<Node>,
    pub links: Vec<LinkView>,
    pub resources: Vec<ResourceRecord>,
    /// The same topology as a TOML document.
    pub document: String,
}

impl TopologyView {
    fn capture(
        topology: &Topology,
        resources: &BTreeMap<qnet_core::NodeId, ResourceRecord>,
    ) -> Self {
        Self {
            version: topology.version(),
            nodes: topology.nodes().cloned().collect(),
            links: topology
                .links()
                .map(|l| LinkView {
                    link: l.clone(),
                    occupied: l
                        .occupied
                        .iter()
                        .map(|(c, r)| Occupancy {
                            channel: *c,
                            request: *r,
                        })
                        .collect(),
                })
                .collect(),
            resources: resources.values().cloned().collect(),
            document: topology.to_document(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryStatus {
    Running,
    Done,
    Failed,
}

/// What readers see between engine iterations.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub sim_time: f64,
    pub discovery: DiscoveryStatus,
    pub topology: Option<Arc<TopologyView>>,
    pub requests: BTreeMap<RequestId, RequestStatus>,
}

pub struct Shared {
    pub snapshot: RwLock<Snapshot>,
    pub store: Arc<Mutex<FileStore>>,
    /// Sequence number of the newest journaled event.
    pub latest_seq: watch::Sender<u64>,
}

impl Shared {
    /// Up to `limit` events with sequence numbers above `after`.
    pub fn events_after(&self, after: u64, limit: usize) -> Vec<ServiceEvent> {
        let store = self.store.lock().expect("store lock");
        let events = store.events();
        let start = (after as usize).min(events.len());
        events[start..events.len().min(start + limit)].to_vec()
    }

    pub fn latest_seq(&self) -> u64 {
        *self.latest_seq.borrow()
    }
}

pub enum Command {
    Submit(
        RequestSpec,
        oneshot::Sender<Result<RequestStatus, SubmitError>>,
    ),
    Delta(TopologyDelta, oneshot::Sender<Result<u64, DeltaError>>),
    Shutdown,
}

pub struct EngineSettings {
    pub topology: Topology,
    pub profile: Profile,
    pub control: ControlConfig,
    pub seed: u64,
    /// Simulated seconds per wall-clock second; `None` runs as fast as
    /// events allow.
    pub time_scale: Option<f64>,
}

/// Marks requests left live by an earlier run as interrupted, stores an
/// empty record for each and journals the transitions. Returns the time
/// the earlier run reached.
fn recover(store: &mut FileStore) -> std::io::Result<f64> {
    let mut last = store.events().last().map_or(0.0, ServiceEvent::time);
    for r in store.requests().values() {
        for t in &r.transitions {
            last = last.max(t.time);
        }
    }
    let stuck: Vec<RequestStatus> = store
        .requests()
        .values()
        .filter(|r| !r.state.is_terminal())
        .cloned()
        .collect();
    let mut seq = store.events().last().map_or(0, |e| e.seq);
    for mut status in stuck {
        let from = status.state;
        status.interrupt(last);
        let record_id = record_id_for(status.id);
        if store.record(&record_id).is_none() {
            let record = MeasurementRecord {
                record_id: record_id.clone(),
                request_id: status.id,
                state: status.state,
                route: status.route.clone(),
                rows: Vec::new(),
                trace: Vec::new(),
                physics: PhysicsSummary::from_rows(&[]),
            };
            store.put_record(record).map_err(std::io::Error::other)?;
        }
        status.record_id = Some(record_id);
        seq += 1;
        store.put_event(ServiceEvent {
            seq,
            event: ControlEvent::Transition {
                request: status.id,
                time: last,
                from: Some(from),
                to: status.state,
            },
        })?;
        tracing::info!(request = %status.id, "marked interrupted request as failed");
        store.put_request(status)?;
    }
    Ok(last)
}

pub struct EngineHandle {
    commands: Sender<Command>,
    thread: Option<JoinHandle<()>>,
}

impl EngineHandle {
    pub fn spawn(
        settings: EngineSettings,
        store: FileStore,
    ) -> std::io::Result<(Self, Arc<Shared>)> {
        let mut store = store;
        let resume_at = recover(&mut store)?;
        let requests = store.requests().clone();
        let next_id = requests.keys().last().map_or(1, |id| id.0 + 1);
        let latest = store.events().last().map_or(0, |e| e.seq);
        let shared = Arc::new(Shared {
            snapshot: RwLock::new(Snapshot {
                sim_time: resume_at,
                discovery: DiscoveryStatus::Running,
                topology: None,
                requests,
            }),
            store: Arc::new(Mutex::new(store)),
            latest_seq: watch::channel(latest).0,
        });
        let (tx, rx) = std::sync::mpsc::channel();
        let worker = shared.clone();
        let thread = std::thread::Builder::new()
            .name("qnet-engine".into())
            .spawn(move || {
                let plant = Plant::from_topology(&settings.topology);
                let physics =
                    SimPhysics::with_profile(&settings.topology, settings.profile, settings.seed);
                let mut cp = ControlPlane::new(
                    plant,
                    settings.control,
                    physics,
                    Box::new(SharedStore(worker.store.clone())),
                );
                cp.set_next_request_id(next_id);
                cp.advance_to(resume_at);
                Engine {
                    cp,
                    shared: worker,
                    seq: latest,
                    time_scale: settings.time_scale,
                }
                .run(rx);
            })?;
        Ok((
            Self {
                commands: tx,
                thread: Some(thread),
            },
            shared,
        ))
    }

    pub fn send(&self, cmd: Command) -> bool {
        self.commands.send(cmd).is_ok()
    }

    /// Stops the engine, failing live requests as interrupted, and waits
    /// for the journal to be flushed.
    pub fn shutdown(&mut self) {
        let _ = self.commands.send(Command::Shutdown);
        if let Some(t) = self.thread.take() {
            if t.join().is_err() {
                tracing::error!("engine thread panicked");
            }
        }
    }
}

impl Drop for EngineHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Engine {
    cp: ControlPlane<SimPhysics>,
    shared: Arc<Shared>,
    seq: u64,
    time_scale: Option<f64>,
}

impl Engine {
    fn run(mut self, rx: Receiver<Command>) {
        let wall0 = Instant::now();
        let sim0 = self.cp.now();
        self.cp.start_discovery();
        self.publish(BTreeSet::new());
        let tick = Duration::from_millis(10);
        loop {
            let busy = self.time_scale.is_none() && self.cp.next_event_time().is_some();
            let first = match rx.recv_timeout(if busy { Duration::ZERO } else { tick }) {
                Ok(cmd) => Some(cmd),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => break,
            };
            let mut stop = false;
            for cmd in first
                .into_iter()
                .chain(std::iter::from_fn(|| rx.try_recv().ok()))
            {
                if !self.handle(cmd) {
                    stop = true;
                    break;
                }
            }
            if stop {
                break;
            }
            match self.time_scale {
                Some(scale) => {
                    let target = sim0 + wall0.elapsed().as_secs_f64() * scale;
                    self.cp.run_until(target);
                }
                None => {
                    for _ in 0..UNTHROTTLED_BATCH {
                        if !self.cp.step() {
                            break;
                        }
                    }
                }
            }
            self.publish(BTreeSet::new());
        }
        self.cp.abort_live(FailureReason::Interrupted);
        for _ in 0..UNTHROTTLED_BATCH {
            if !self.cp.step() {
                break;
            }
        }
        self.publish(BTreeSet::new());
        if let Err(e) = self.shared.store.lock().expect("store lock").sync() {
            tracing::error!("store sync failed: {e}");
        }
    }

    fn handle(&mut self, cmd: Command) -> bool {
        match cmd {
            Command::Submit(spec, reply) => {
                let result = self.cp.submit(spec);
                let touched = result.iter().copied().collect();
                self.publish(touched);
                let status = result.map(|id| {
                    self.shared.snapshot.read().expect("snapshot lock").requests[&id].clone()
                });
                let _ = reply.send(status);
            }
            Command::Delta(delta, reply) => {
                let result = self.cp.inject_delta(delta);
                let _ =
                    reply.send(result.map(|()| self.cp.topology().map_or(0, Topology::version)));
            }
            Command::Shutdown => return false,
        }
        true
    }

    /// Journals new events and refreshes the snapshot for whatever they
    /// touched. `touched` names requests to refresh regardless.
    fn publish(&mut self, mut touched: BTreeSet<RequestId>) {
        let events = self.cp.drain_events();
        let mut transitioned = touched.clone();
        let mut topology_dirty = false;
        let mut discovery = None;
        {
            let mut store = self.shared.store.lock().expect("store lock");
            for event in events {
                match &event {
                    ControlEvent::Transition { request, .. } => {
                        transitioned.insert(*request);
                        touched.insert(*request);
                        topology_dirty = true;
                    }
                    ControlEvent::Measurement { request, .. } => {
                        touched.insert(*request);
                    }
                    ControlEvent::TopologyChanged { .. } => topology_dirty = true,
                    ControlEvent::DiscoveryFinished { ok, .. } => {
                        topology_dirty = true;
                        discovery = Some(if *ok {
                            DiscoveryStatus::Done
                        } else {
                            DiscoveryStatus::Failed
                        });
                    }
                }
                self.seq += 1;
                if let Err(e) = store.put_event(ServiceEvent {
                    seq: self.seq,
                    event,
                }) {
                    tracing::error!("journal write failed: {e}");
                }
            }
            let mut snap = self.shared.snapshot.write().expect("snapshot lock");
            snap.sim_time = self.cp.now();
            if let Some(d) = discovery {
                snap.discovery = d;
            }
            if topology_dirty {
                snap.topology = self
                    .cp
                    .topology()
                    .map(|t| Arc::new(TopologyView::capture(t, self.cp.server().resources())));
            }
            for id in &touched {
                if let Some(r) = self.cp.request(*id) {
                    let status = RequestStatus::from_record(r);
                    if transitioned.contains(id) {
                        if let Err(e) = store.put_request(status.clone()) {
                            tracing::error!("journal write failed: {e}");
                        }
                    }
                    snap.requests.insert(*id, status);
                }
            }
        }
        self.shared.latest_seq.send_replace(self.seq);
    }
}
