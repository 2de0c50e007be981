//! Scenario execution: the control plane and the optical plant advance on
//! one simulated clock. Plant events (drifts, servos, faults, arrivals,
//! sampling) run before control-plane events scheduled for the same instant.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optics::{child_seed, SimPhysics};
use super::scenario::{Fault, LoadedScenario};
use super::servo::DriftProcess;
use crate::control::{
    ControlConfig, ControlEvent, ControlPlane, DiscoveryError, FailureReason, MemoryStore,
    PhysicsSummary, RequestState, ResourceState, TopologyDelta, TraceEntry, Transition,
};
use crate::event::EventQueue;
use crate::ids::{LinkId, NodeId, RequestId};
use crate::physics::{inf_as_string, raman_noise_rate, visibility_from_noise};

/// Guard against a control plane that never drains after the horizon.
const DRAIN_STEP_LIMIT: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("discovery failed: {0}")]
    Discovery(#[from] DiscoveryError),
    #[error("control plane did not settle after the run ended")]
    NoQuiescence,
    #[error("writing output: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing table: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySummary {
    pub version: u64,
    pub nodes: usize,
    pub links: usize,
    pub verified: Vec<NodeId>,
    pub lost: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestReport {
    pub id: RequestId,
    pub arrival_s: f64,
    pub qnode_a: NodeId,
    pub qnode_b: NodeId,
    pub rate: f64,
    pub duration: f64,
    pub eps: Vec<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bsm: Option<NodeId>,
    pub state: RequestState,
    pub transitions: Vec<Transition>,
    pub batches: usize,
    pub records: u64,
    pub physics: PhysicsSummary,
    pub data_loss: bool,
}

/// An arrival the control plane refused outright.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedArrival {
    pub index: usize,
    pub time: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultReport {
    pub time: f64,
    pub fault: Fault,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub time_s: f64,
    pub request: RequestId,
    pub state: String,
    pub launch_power_dbm: Option<f64>,
    #[serde(with = "inf_as_string")]
    pub car: f64,
    pub visibility: f64,
    pub fidelity: f64,
    pub rate_hz: f64,
    pub delay_offset_ps: f64,
    pub polarization_offset_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub launch_power_dbm: f64,
    pub filter_bandwidth_ghz: f64,
    pub raman_cps: f64,
    pub singles_a: f64,
    pub singles_b: f64,
    pub coincidences: f64,
    pub accidentals: f64,
    #[serde(with = "inf_as_string")]
    pub car: f64,
    pub visibility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: usize,
    pub completed: usize,
    pub failed: usize,
    pub rejected: usize,
    pub failures: BTreeMap<String, usize>,
    #[serde(with = "inf_as_string")]
    pub min_car: f64,
    /// Mean over requests that collected records; `None` if none did.
    pub mean_fidelity: Option<f64>,
    pub mean_visibility: Option<f64>,
    /// Average of the sampled visibility series over Distributing samples.
    pub time_avg_visibility: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub topology: TopologySummary,
    pub requests: Vec<RequestReport>,
    pub rejected: Vec<RejectedArrival>,
    pub faults: Vec<FaultReport>,
    pub initial_occupancy: usize,
    pub final_occupancy: usize,
    pub summary: Summary,
    pub series: Vec<SeriesRow>,
    pub sweep: Vec<SweepRow>,
    pub trace: Vec<TraceEntry>,
    pub events: Vec<ControlEvent>,
}

impl ScenarioReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write_series<W: Write>(&self, out: W) -> Result<(), EngineError> {
        write_rows(out, &self.series)
    }

    pub fn write_sweep<W: Write>(&self, out: W) -> Result<(), EngineError> {
        write_rows(out, &self.sweep)
    }
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SimEvent {
    Drift(usize),
    Servo(usize),
    Fault(usize),
    Arrival(usize),
    Sample,
}

/// Runs a resolved scenario with `seed`.
pub fn run_scenario(loaded: &LoadedScenario, seed: u64) -> Result<ScenarioReport, EngineError> {
    Engine::new(loaded, seed).run()
}

struct Engine<'a> {
    loaded: &'a LoadedScenario,
    seed: u64,
    cp: ControlPlane<SimPhysics>,
    queue: EventQueue<SimEvent>,
    drifts: Vec<(DriftProcess, Vec<LinkId>)>,
    drift_rng: ChaCha8Rng,
    arrivals: BTreeMap<RequestId, f64>,
    rejected: Vec<RejectedArrival>,
    faults: Vec<FaultReport>,
    series: Vec<SeriesRow>,
    events: Vec<ControlEvent>,
}

impl<'a> Engine<'a> {
    fn new(loaded: &'a LoadedScenario, seed: u64) -> Self {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let control_seed = child_seed(&mut master);
        let drift_rng = ChaCha8Rng::seed_from_u64(child_seed(&mut master));
        let sample_rng = ChaCha8Rng::seed_from_u64(child_seed(&mut master));
        let servo_rng = ChaCha8Rng::seed_from_u64(child_seed(&mut master));
        let physics = SimPhysics::new(loaded, sample_rng, servo_rng);
        let cfg = ControlConfig {
            seed: control_seed,
            ..loaded.scenario.control.clone()
        };
        let plant = crate::control::Plant::from_topology(&loaded.topology);
        let cp = ControlPlane::new(plant, cfg, physics, Box::new(MemoryStore::new()));
        let all_links: Vec<LinkId> = loaded.topology.links().map(|l| l.id.clone()).collect();
        let drifts = loaded
            .scenario
            .drifts
            .iter()
            .map(|d| {
                let links = if d.link == "*" {
                    all_links.clone()
                } else {
                    vec![LinkId::new(d.link.as_str())]
                };
                (
                    DriftProcess {
                        quantity: d.quantity,
                        sigma_per_sqrt_s: d.sigma(),
                        interval_s: d.interval_s,
                    },
                    links,
                )
            })
            .collect();
        Self {
            loaded,
            seed,
            cp,
            queue: EventQueue::new(),
            drifts,
            drift_rng,
            arrivals: BTreeMap::new(),
            rejected: Vec::new(),
            faults: Vec::new(),
            series: Vec::new(),
            events: Vec::new(),
        }
    }

    fn schedule(&mut self) {
        let s = &self.loaded.scenario;
        let now = self.cp.now();
        for (i, (d, _)) in self.drifts.iter().enumerate() {
            self.queue.push(d.interval_s, SimEvent::Drift(i));
        }
        for (i, v) in s.servos.iter().enumerate() {
            self.queue.push(now + v.period_s, SimEvent::Servo(i));
        }
        for (i, f) in s.faults.iter().enumerate() {
            self.queue.push(f.at().max(now), SimEvent::Fault(i));
        }
        for (i, r) in s.requests.iter().enumerate() {
            self.queue.push(r.at_s.max(now), SimEvent::Arrival(i));
        }
        self.queue
            .push(now.max(s.sample_interval_s), SimEvent::Sample);
    }

    fn run(mut self) -> Result<ScenarioReport, EngineError> {
        let duration = self.loaded.scenario.duration_s;
        let topology = self.cp.run_discovery()?;
        let initial_occupancy = topology.occupancy_total();
        self.schedule();
        loop {
            let sim_t = self.queue.peek_time();
            let cp_t = self.cp.next_event_time();
            let plant_first = match (sim_t, cp_t) {
                (Some(a), Some(b)) => a <= b,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            let t = if plant_first { sim_t } else { cp_t }.expect("one is set");
            if t > duration {
                break;
            }
            if plant_first {
                let (time, _, ev) = self.queue.pop().expect("peeked");
                self.cp.advance_to(time);
                self.handle(ev);
            } else {
                self.cp.step();
            }
            self.events.extend(self.cp.drain_events());
        }
        self.cp.advance_to(duration.max(self.cp.now()));
        self.cp.abort_live(FailureReason::Aborted);
        let mut steps = 0;
        while self.cp.step() {
            steps += 1;
            if steps > DRAIN_STEP_LIMIT {
                return Err(EngineError::NoQuiescence);
            }
        }
        self.events.extend(self.cp.drain_events());
        Ok(self.report(initial_occupancy))
    }

    fn handle(&mut self, ev: SimEvent) {
        let now = self.cp.now();
        match ev {
            SimEvent::Drift(i) => {
                let (process, links) = &self.drifts[i];
                for l in links {
                    let delta = process.step(&mut self.drift_rng);
                    self.cp.physics_mut().drift(l, process.quantity, delta);
                }
                self.queue
                    .push(now + process.interval_s, SimEvent::Drift(i));
            }
            SimEvent::Servo(i) => {
                let servo = self.loaded.scenario.servos[i];
                let live: Vec<RequestId> = self
                    .cp
                    .requests()
                    .filter(|r| r.state == RequestState::Distributing)
                    .map(|r| r.id)
                    .collect();
                for id in live {
                    self.cp.physics_mut().servo_step(id, &servo, true);
                }
                self.queue.push(now + servo.period_s, SimEvent::Servo(i));
            }
            SimEvent::Fault(i) => {
                let fault = self.loaded.scenario.faults[i].clone();
                let outcome = self.inject(&fault);
                self.faults.push(FaultReport {
                    time: now,
                    fault,
                    outcome,
                });
            }
            SimEvent::Arrival(i) => {
                let spec = self.loaded.scenario.requests[i].spec();
                match self.cp.submit(spec) {
                    Ok(id) => {
                        self.arrivals.insert(id, now);
                    }
                    Err(e) => self.rejected.push(RejectedArrival {
                        index: i,
                        time: now,
                        error: e.to_string(),
                    }),
                }
            }
            SimEvent::Sample => {
                self.sample(now);
                self.queue.push(
                    now + self.loaded.scenario.sample_interval_s,
                    SimEvent::Sample,
                );
            }
        }
    }

    fn inject(&mut self, fault: &Fault) -> String {
        let result = match fault {
            Fault::LinkLossIncrease { link, db, .. } => {
                let total = self.cp.physics_mut().add_extra_loss(link, *db);
                self.cp.inject_delta(TopologyDelta::LinkDegraded {
                    link: link.clone(),
                    extra_loss_db: total,
                })
            }
            Fault::LinkDown { link, .. } => {
                self.cp.physics_mut().set_link_down(link);
                self.cp
                    .inject_delta(TopologyDelta::LinkDown { link: link.clone() })
            }
            Fault::NodeDown { node, .. } => {
                self.cp.physics_mut().set_node_down(node);
                self.cp
                    .inject_delta(TopologyDelta::NodeDown { node: node.clone() })
            }
            Fault::PowerStep { dbm, .. } => {
                self.cp.physics_mut().set_launch_power(*dbm);
                Ok(())
            }
        };
        match result {
            Ok(()) => "applied".into(),
            Err(e) => format!("rejected: {e}"),
        }
    }

    fn sample(&mut self, now: f64) {
        let power = self.cp.physics().launch_power_dbm();
        let rows: Vec<SeriesRow> = self
            .cp
            .requests()
            .filter(|r| {
                matches!(
                    r.state,
                    RequestState::Distributing | RequestState::Recalibrating
                )
            })
            .filter_map(|r| {
                let s = self.cp.physics().optical_state(r.id)?;
                Some(SeriesRow {
                    time_s: now,
                    request: r.id,
                    state: r.state.name().to_string(),
                    launch_power_dbm: power,
                    car: s.stats.car,
                    visibility: s.visibility,
                    fidelity: s.fidelity,
                    rate_hz: s.record_rate_hz.min(r.requirements.rate),
                    delay_offset_ps: s.delay_offset_ps,
                    polarization_offset_rad: s.polarization_offset_rad,
                })
            })
            .collect();
        self.series.extend(rows);
    }

    fn sweep(&self) -> Vec<SweepRow> {
        let Some(spec) = &self.loaded.scenario.sweep else {
            return Vec::new();
        };
        let mut profile = self.loaded.default_profile.clone();
        let Some(c) = profile.coexistence.clone() else {
            return Vec::new();
        };
        if let Some(bw) = spec.filter_bandwidth_ghz {
            profile.channel.filter_bandwidth_ghz = bw;
        }
        let powers = if spec.launch_power_dbm.is_empty() {
            c.sweep_dbm.clone()
        } else {
            spec.launch_power_dbm.clone()
        };
        powers
            .into_iter()
            .filter_map(|dbm| {
                let stats = profile.coexistence_stats(dbm)?;
                let signal = profile.channel.channel(c.signal_loss_db());
                Some(SweepRow {
                    launch_power_dbm: dbm,
                    filter_bandwidth_ghz: profile.channel.filter_bandwidth_ghz,
                    raman_cps: raman_noise_rate(dbm, &signal),
                    singles_a: stats.singles_a,
                    singles_b: stats.singles_b,
                    coincidences: stats.true_coinc,
                    accidentals: stats.accidentals,
                    car: stats.car,
                    visibility: visibility_from_noise(&stats, profile.intrinsic_visibility),
                })
            })
            .collect()
    }

    fn report(self, initial_occupancy: usize) -> ScenarioReport {
        let topo = self.cp.topology().expect("discovery finished");
        let resources = self.cp.server().resources();
        let of_state = |s: ResourceState| -> Vec<NodeId> {
            resources
                .values()
                .filter(|r| r.state == s)
                .map(|r| r.id.clone())
                .collect()
        };
        let topology = TopologySummary {
            version: topo.version(),
            nodes: topo.node_count(),
            links: topo.link_count(),
            verified: of_state(ResourceState::Verified),
            lost: of_state(ResourceState::Lost),
        };
        let requests: Vec<RequestReport> = self
            .cp
            .requests()
            .map(|r| RequestReport {
                id: r.id,
                arrival_s: self.arrivals.get(&r.id).copied().unwrap_or(r.submitted_at),
                qnode_a: r.qnode_a.clone(),
                qnode_b: r.qnode_b.clone(),
                rate: r.requirements.rate,
                duration: r.requirements.duration,
                eps: r.route.as_ref().map(|a| a.eps_nodes()).unwrap_or_default(),
                bsm: r.route.as_ref().and_then(|a| a.bsm().cloned()),
                state: r.state,
                transitions: r.transitions.clone(),
                batches: r.measurements.len(),
                records: r.measurements.iter().map(|m| m.records).sum(),
                physics: PhysicsSummary::from_rows(&r.measurements),
                data_loss: r.data_loss,
            })
            .collect();
        let summary = summarize(&requests, self.rejected.len(), &self.series);
        let sweep = self.sweep();
        ScenarioReport {
            scenario: self.loaded.scenario.name.clone(),
            seed: self.seed,
            duration_s: self.loaded.scenario.duration_s,
            topology,
            requests,
            rejected: self.rejected,
            faults: self.faults,
            initial_occupancy,
            final_occupancy: topo.occupancy_total(),
            summary,
            series: self.series,
            sweep,
            trace: self.cp.trace().to_vec(),
            events: self.events,
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, sum) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| sum / n as f64)
}

fn summarize(requests: &[RequestReport], rejected: usize, series: &[SeriesRow]) -> Summary {
    let mut failures = BTreeMap::new();
    for r in requests {
        if let RequestState::Failed(reason) = &r.state {
            *failures.entry(reason.to_string()).or_insert(0) += 1;
        }
    }
    let measured: Vec<&RequestReport> = requests.iter().filter(|r| r.physics.records > 0).collect();
    Summary {
        requests: requests.len(),
        completed: requests
            .iter()
            .filter(|r| r.state == RequestState::Completed)
            .count(),
        failed: requests
            .iter()
            .filter(|r| matches!(r.state, RequestState::Failed(_)))
            .count(),
        rejected,
        failures,
        min_car: measured
            .iter()
            .map(|r| r.physics.car)
            .fold(f64::INFINITY, f64::min),
        mean_fidelity: mean(measured.iter().map(|r| r.physics.mean_fidelity)),
        mean_visibility: mean(measured.iter().map(|r| r.physics.mean_visibility)),
        time_avg_visibility: mean(
            series
                .iter()
                .filter(|s| s.state == RequestState::Distributing.name())
                .map(|s| s.visibility),
        ),
    }
}
