//! Independent oracles: random multigraphs with exhaustive path search,
//! brute-force first fit, and lifecycle checks over scenario reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use qnet_core::control::PhysicalLayer;
use qnet_core::control::{
    transition_allowed, AdmissionPolicy, ControlConfig, MessageKind, QubitType, RequestState,
};
use qnet_core::ids::{LinkId, NodeId, RequestId};
use qnet_core::rwa::{route_entanglement, RouteAllocation, RwaConfig, WeightCoefficients};
use qnet_core::sim::{
    ClassicalLight, DriftQuantity, DriftSpec, Fault, LoadedScenario, Observable, ProfileSelection,
    RequestArrival, Scenario, ScenarioReport, ServoLoop, SimPhysics,
};
use qnet_core::topology::{
    load_topology, Band, BandAttenuation, Endpoint, FiberLink, Node, NodeKind, WavelengthChannel,
};
use qnet_core::Topology;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSpec {
    pub a: usize,
    pub b: usize,
    pub length_km: f64,
    pub att_o: f64,
    pub att_c: f64,
    pub pdl_db: f64,
    pub pmd: f64,
    pub grid: u32,
}

/// An undirected multigraph of switches. Node `i` is `n{i}`, edge `j` is
/// `e{j:02}` so that id order matches index order.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub insertion_db: Vec<f64>,
    pub edges: Vec<EdgeSpec>,
}

pub fn node_name(i: usize) -> NodeId {
    NodeId::new(format!("n{i}"))
}

impl GraphSpec {
    /// Up to 8 nodes and 14 edges. Dyadic weights make every path sum exact,
    /// so even tie-breaking can be compared.
    pub fn random<R: Rng>(rng: &mut R, dyadic: bool) -> Self {
        let n = rng.random_range(2..=8);
        let m = rng.random_range(0..=14);
        let insertion_db = (0..n)
            .map(|_| {
                if dyadic {
                    rng.random_range(0..=8) as f64 * 0.125
                } else {
                    rng.random_range(0.0..1.5)
                }
            })
            .collect();
        let edges = (0..m)
            .map(|_| {
                let a = rng.random_range(0..n);
                let b = (a + rng.random_range(1..n)) % n;
                if dyadic {
                    EdgeSpec {
                        a,
                        b,
                        length_km: rng.random_range(1..=40) as f64 * 0.25,
                        att_o: 0.5,
                        att_c: 0.25,
                        pdl_db: 0.0,
                        pmd: 0.0,
                        grid: rng.random_range(1..=8),
                    }
                } else {
                    EdgeSpec {
                        a,
                        b,
                        length_km: rng.random_range(0.1..60.0),
                        att_o: rng.random_range(0.0..0.5),
                        att_c: rng.random_range(0.0..0.3),
                        pdl_db: rng.random_range(0.0..0.5),
                        pmd: rng.random_range(0.0..0.2),
                        grid: rng.random_range(1..=8),
                    }
                }
            })
            .collect();
        Self {
            insertion_db,
            edges,
        }
    }

    pub fn node_count(&self) -> usize {
        self.insertion_db.len()
    }

    pub fn build(&self) -> Topology {
        let mut nodes: Vec<Node> = self
            .insertion_db
            .iter()
            .enumerate()
            .map(|(i, &db)| {
                Node::new(node_name(i).as_str(), NodeKind::OpticalSwitch, "S")
                    .with_insertion_loss(db)
            })
            .collect();
        for (j, e) in self.edges.iter().enumerate() {
            nodes[e.a] = nodes[e.a].clone().with_port(format!("p{j}"), "");
            nodes[e.b] = nodes[e.b].clone().with_port(format!("p{j}"), "");
        }
        let mut t = Topology::new();
        for n in nodes {
            t.add_node(n).expect("unique node ids");
        }
        for (j, e) in self.edges.iter().enumerate() {
            let mut l = FiberLink::new(
                format!("e{j:02}"),
                Endpoint::new(node_name(e.a).as_str(), format!("p{j}")),
                Endpoint::new(node_name(e.b).as_str(), format!("p{j}")),
                e.length_km,
                BandAttenuation {
                    o: e.att_o,
                    c: e.att_c,
                },
                e.grid,
            );
            l.pdl_db = e.pdl_db;
            l.pmd_ps_per_sqrt_km = e.pmd;
            t.add_link(l).expect("valid link");
        }
        t
    }
}

fn hop_weight(t: &Topology, l: &FiberLink, band: Band, k: &WeightCoefficients) -> f64 {
    let ia = t.node(&l.a.node).unwrap().insertion_loss_db;
    let ib = t.node(&l.b.node).unwrap().insertion_loss_db;
    let att = match band {
        Band::O => l.attenuation_db_per_km.o,
        Band::C => l.attenuation_db_per_km.c,
    };
    l.length_km * att
        + ia
        + ib
        + k.alpha_pdl * l.pdl_db
        + k.alpha_pmd * l.pmd_ps_per_sqrt_km * l.length_km.sqrt()
}

/// Every simple path from `src` to `dst` with its weight, summed hop by hop
/// from the source.
pub fn all_simple_paths(
    t: &Topology,
    src: &NodeId,
    dst: &NodeId,
    band: Band,
    k: &WeightCoefficients,
) -> Vec<(f64, Vec<LinkId>)> {
    fn walk(
        t: &Topology,
        at: &NodeId,
        dst: &NodeId,
        band: Band,
        k: &WeightCoefficients,
        visited: &mut BTreeSet<NodeId>,
        path: &mut Vec<LinkId>,
        weight: f64,
        out: &mut Vec<(f64, Vec<LinkId>)>,
    ) {
        if at == dst {
            out.push((weight, path.clone()));
            return;
        }
        for l in t.links() {
            let next = if &l.a.node == at {
                &l.b.node
            } else if &l.b.node == at {
                &l.a.node
            } else {
                continue;
            };
            if visited.contains(next) {
                continue;
            }
            visited.insert(next.clone());
            path.push(l.id.clone());
            walk(
                t,
                next,
                dst,
                band,
                k,
                visited,
                path,
                weight + hop_weight(t, l, band, k),
                out,
            );
            path.pop();
            visited.remove(next);
        }
    }
    let mut out = Vec::new();
    let mut visited = BTreeSet::from([src.clone()]);
    walk(
        t,
        src,
        dst,
        band,
        k,
        &mut visited,
        &mut Vec::new(),
        0.0,
        &mut out,
    );
    out
}

/// Minimum by weight, then by link-id sequence.
pub fn brute_shortest(
    t: &Topology,
    src: &NodeId,
    dst: &NodeId,
    band: Band,
    k: &WeightCoefficients,
) -> Option<(f64, Vec<LinkId>)> {
    all_simple_paths(t, src, dst, band, k)
        .into_iter()
        .min_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)))
}

/// Lowest channel index of `band` free on every hop, scanning the full
/// grid of the narrowest link.
pub fn brute_first_fit(t: &Topology, hops: &[LinkId], band: Band) -> Option<WavelengthChannel> {
    if hops.is_empty() {
        return None;
    }
    let links: Vec<&FiberLink> = hops.iter().map(|h| t.link(h).unwrap()).collect();
    let grid = links.iter().map(|l| l.total_wavelengths).min().unwrap();
    (0..grid)
        .map(|i| WavelengthChannel { band, index: i })
        .find(|ch| links.iter().all(|l| !l.occupied.keys().any(|c| c == ch)))
}

pub fn config_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn metro_topology() -> Topology {
    let text = std::fs::read_to_string(config_dir().join("topology.toml")).unwrap();
    load_topology(&text).unwrap()
}

pub fn load_config(name: &str) -> LoadedScenario {
    LoadedScenario::load(&config_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// A scenario on the metro topology with random arrivals, faults, drifts
/// and servos, fully determined by `seed`.
pub fn random_scenario(seed: u64) -> LoadedScenario {
    use rand::seq::IndexedRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let topology = metro_topology();
    let qnodes: Vec<NodeId> = topology
        .nodes_of_kind(NodeKind::QNode)
        .map(|n| n.id.clone())
        .collect();
    let links: Vec<LinkId> = topology.links().map(|l| l.id.clone()).collect();
    let nodes: Vec<NodeId> = topology.nodes().map(|n| n.id.clone()).collect();
    let duration_s = 60.0;

    let requests = (0..rng.random_range(1..=6))
        .map(|_| {
            let a = qnodes.choose(&mut rng).unwrap().clone();
            let mut b = qnodes.choose(&mut rng).unwrap().clone();
            while b == a {
                b = qnodes.choose(&mut rng).unwrap().clone();
            }
            RequestArrival {
                at_s: rng.random_range(0.0..40.0),
                user: "sim".into(),
                qnode_a: a,
                qnode_b: b,
                qubit_type: if rng.random_bool(0.5) {
                    QubitType::TimeBin
                } else {
                    QubitType::Polarization
                },
                rate: *[1.0, 5.0, 20.0, 100.0, 1e9].choose(&mut rng).unwrap(),
                duration: rng.random_range(1.0..20.0),
            }
        })
        .collect();

    let faults = (0..rng.random_range(0..=3))
        .map(|_| {
            let at_s = rng.random_range(0.0..50.0);
            match rng.random_range(0..4) {
                0 => Fault::LinkDown {
                    at_s,
                    link: links.choose(&mut rng).unwrap().clone(),
                },
                1 => Fault::NodeDown {
                    at_s,
                    node: nodes.choose(&mut rng).unwrap().clone(),
                },
                2 => Fault::LinkLossIncrease {
                    at_s,
                    link: links.choose(&mut rng).unwrap().clone(),
                    db: rng.random_range(0.0..6.0),
                },
                _ => Fault::PowerStep {
                    at_s,
                    dbm: rng.random_range(-5.0..10.0),
                },
            }
        })
        .collect();

    let mut drifts = Vec::new();
    for quantity in [
        DriftQuantity::PolarizationOffset,
        DriftQuantity::DelayOffset,
    ] {
        if rng.random_bool(0.5) {
            drifts.push(DriftSpec {
                link: "*".into(),
                quantity,
                sigma: Some(quantity.default_sigma() * rng.random_range(0.5..5.0)),
                interval_s: 1.0,
            });
        }
    }
    let mut servos = Vec::new();
    for observable in [Observable::PolarizationVisibility, Observable::HomDip] {
        if rng.random_bool(0.6) {
            servos.push(ServoLoop::new(observable));
        }
    }

    let control = ControlConfig {
        admission: if rng.random_bool(0.5) {
            AdmissionPolicy::Queue
        } else {
            AdmissionPolicy::Reject
        },
        recalibration_period_s: rng.random_range(3.0..20.0),
        bus_jitter_s: if rng.random_bool(0.5) { 0.002 } else { 0.0 },
        seed,
        ..ControlConfig::default()
    };

    let scenario = Scenario {
        name: format!("random-{seed}"),
        topology: PathBuf::from("topology.toml"),
        profiles: ProfileSelection::default(),
        requests,
        drifts,
        servos,
        faults,
        duration_s,
        seed,
        classical: ClassicalLight {
            launch_power_dbm: rng.random_bool(0.5).then(|| rng.random_range(-5.0..8.0)),
            links: Vec::new(),
        },
        sample_interval_s: 1.0,
        calibration_step_s: 0.1,
        sweep: None,
        control,
    };
    LoadedScenario::with_topology(scenario, topology, Path::new(&config_dir())).unwrap()
}

/// Lifecycle violations in a report: transitions outside the allowed
/// relation or not chained, START before the last READY of its ledger,
/// batches outside a distribution interval, leaked channels.
pub fn lifecycle_violations(report: &ScenarioReport) -> Vec<String> {
    let mut out = Vec::new();
    for r in &report.requests {
        let mut prev: Option<RequestState> = None;
        for (i, t) in r.transitions.iter().enumerate() {
            if t.from != prev {
                out.push(format!(
                    "request {}: transition {i} starts from {:?}, expected {:?}",
                    r.id, t.from, prev
                ));
            }
            match t.from {
                None if t.to != RequestState::Submitted => {
                    out.push(format!("request {}: first state {}", r.id, t.to))
                }
                Some(f) if !transition_allowed(f, t.to) => {
                    out.push(format!("request {}: {f} -> {} not allowed", r.id, t.to))
                }
                _ => {}
            }
            prev = Some(t.to);
        }
        if !r.state.is_terminal() {
            out.push(format!("request {} ended in {}", r.id, r.state));
        }

        let corr = r.id.to_string();
        let mut expected: BTreeSet<String> = r.eps.iter().map(|e| e.to_string()).collect();
        expected.insert(r.qnode_a.to_string());
        expected.insert(r.qnode_b.to_string());
        if let Some(b) = &r.bsm {
            expected.insert(b.to_string());
        }
        let mut ready = BTreeSet::new();
        for e in report.trace.iter().filter(|e| e.correlation_id == corr) {
            match e.kind {
                MessageKind::Ready => {
                    ready.insert(e.sender.clone());
                }
                MessageKind::Start if ready != expected => out.push(format!(
                    "request {}: START at {} with READY from {ready:?}, ledger {expected:?}",
                    r.id, e.time
                )),
                _ => {}
            }
        }
    }

    let mut intervals: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &report.requests {
        let mut open = None;
        let mut spans = Vec::new();
        for t in &r.transitions {
            match (t.to, open) {
                (RequestState::Distributing, None) => open = Some(t.time),
                (s, Some(start))
                    if s != RequestState::Distributing && s != RequestState::Recalibrating =>
                {
                    spans.push((start, t.time));
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(start) = open {
            spans.push((start, f64::INFINITY));
        }
        intervals.insert(r.id.to_string(), spans);
    }
    for e in report
        .trace
        .iter()
        .filter(|e| e.kind == MessageKind::Measurement)
    {
        let spans = intervals
            .get(&e.correlation_id)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        if !spans.iter().any(|&(a, b)| e.time >= a && e.time <= b) {
            out.push(format!(
                "request {}: measurement at {} outside distribution",
                e.correlation_id, e.time
            ));
        }
    }

    if report.final_occupancy != report.initial_occupancy {
        out.push(format!(
            "occupancy {} after the run, {} before",
            report.final_occupancy, report.initial_occupancy
        ));
    }
    out
}

/// `P(|Z| > x)` for a standard normal, by composite Simpson integration of
/// the density over `[x, x + 40]`.
pub fn gaussian_two_sided_tail(x: f64) -> f64 {
    let n = 200_000;
    let (a, b) = (x, x + 40.0);
    let h = (b - a) / n as f64;
    let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut sum = pdf(a) + pdf(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * pdf(a + k as f64 * h);
    }
    2.0 * sum * h / 3.0
}

/// Base-10 logarithms of the Mills-ratio bracket on `P(|Z| > x)`:
/// `2 φ(x) x/(1+x²) ≤ P ≤ 2 φ(x)/x`, evaluated in log space so that
/// far tails do not underflow.
pub fn log10_gaussian_tail_bracket(x: f64) -> (f64, f64) {
    let ln_phi = -x * x / 2.0 - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let ln2 = std::f64::consts::LN_2;
    let upper = ln2 + ln_phi - x.ln();
    let lower = ln2 + ln_phi + x.ln() - (1.0 + x * x).ln();
    (
        lower / std::f64::consts::LN_10,
        upper / std::f64::consts::LN_10,
    )
}

/// Relative closeness.
pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

pub fn coexist_topology() -> Topology {
    let text = std::fs::read_to_string(config_dir().join("coexist_topology.toml")).unwrap();
    load_topology(&text).unwrap()
}

/// Tracks a far-local route on the coexistence topology with the delay
/// servo's compensation set so the photons are `offset_ps` apart.
pub fn tracked_route(offset_ps: f64, seed: u64) -> (SimPhysics, RequestId) {
    let mut topo = coexist_topology();
    let loaded = load_config("coexist_sweep.toml");
    let id = RequestId(1);
    let route = route_entanglement(
        &mut topo,
        id,
        &NodeId::new("eps"),
        &NodeId::new("far"),
        &NodeId::new("local"),
        &RwaConfig::default(),
    )
    .unwrap();
    let mut physics = SimPhysics::with_profile(&topo, loaded.default_profile.clone(), seed);
    let outcome = physics.calibrate(id, &RouteAllocation::Direct(route), 0.0);
    assert!(outcome.converged);
    physics.set_residual_delay(id, offset_ps);
    assert!(close(
        physics.optical_state(id).unwrap().delay_offset_ps,
        offset_ps,
        1e-12
    ));
    (physics, id)
}

/// Delay-servo iterations until the residual is under 2 ps, within the
/// servo's step budget.
pub fn steps_to_recover(servo: &ServoLoop, offset_ps: f64, seed: u64) -> Option<u32> {
    let (mut physics, id) = tracked_route(offset_ps, seed);
    for step in 0..servo.step_budget {
        let residual = physics.optical_state(id).unwrap().delay_offset_ps;
        if residual.abs() < 2.0 {
            return Some(step);
        }
        physics.servo_step(id, servo, true).unwrap();
    }
    let residual = physics.optical_state(id).unwrap().delay_offset_ps;
    (residual.abs() < 2.0).then_some(servo.step_budget)
}
