#![allow(dead_code)]

pub mod oracle;

use qnet_core::control::{
    ControlConfig, ControlPlane, Plant, QubitType, RequestSpec, Requirements,
};
use qnet_core::topology::load_topology;
use qnet_core::Topology;

/// Switch `sw` at the centre, Q-nodes `q1`, `q2` and source `e1` on spokes.
pub fn star_doc(wavelengths: u32, pair_rate: f64) -> String {
    format!(
        r#"
[[nodes]]
id = "sw"
kind = "switch"
site = "FNAL"
switch = {{ port_count = 3 }}
ports = [{{ id = "p1", tag = "q1:p1" }}, {{ id = "p2", tag = "q2:p1" }}, {{ id = "p3", tag = "e1:p1" }}]

[[nodes]]
id = "q1"
kind = "qnode"
site = "FNAL"
ports = [{{ id = "p1", tag = "sw:p1" }}]

[[nodes]]
id = "q2"
kind = "qnode"
site = "ANL"
ports = [{{ id = "p1", tag = "sw:p2" }}]

[[nodes]]
id = "e1"
kind = "eps"
site = "FNAL"
eps = {{ pair_rate_cps = {pair_rate:e}, wavelengths = {wavelengths} }}
ports = [{{ id = "p1", tag = "sw:p3" }}]

[[links]]
id = "L1"
a = {{ node = "sw", port = "p1" }}
b = {{ node = "q1", port = "p1" }}
length_km = 2.0
attenuation_db_per_km = {{ O = 0.35, C = 0.2 }}
total_wavelengths = 8

[[links]]
id = "L2"
a = {{ node = "sw", port = "p2" }}
b = {{ node = "q2", port = "p1" }}
length_km = 3.0
attenuation_db_per_km = {{ O = 0.35, C = 0.2 }}
total_wavelengths = 8

[[links]]
id = "L3"
a = {{ node = "sw", port = "p3" }}
b = {{ node = "e1", port = "p1" }}
length_km = 1.0
attenuation_db_per_km = {{ O = 0.35, C = 0.2 }}
total_wavelengths = 8
"#
    )
}

pub fn star(wavelengths: u32, pair_rate: f64) -> Topology {
    load_topology(&star_doc(wavelengths, pair_rate)).expect("fixture parses")
}

pub fn plane(topology: &Topology, cfg: ControlConfig) -> ControlPlane {
    ControlPlane::ideal(Plant::from_topology(topology), cfg)
}

pub fn spec(a: &str, b: &str, rate: f64, duration: f64) -> RequestSpec {
    RequestSpec {
        user: "alice".into(),
        qnode_a: a.into(),
        qnode_b: b.into(),
        requirements: Requirements {
            qubit_type: QubitType::TimeBin,
            rate,
            duration,
        },
    }
}

/// One line per trace entry: time, sender, topic (or `-` for local steps),
/// kind.
pub fn render_trace(trace: &[qnet_core::control::TraceEntry]) -> String {
    trace
        .iter()
        .map(|e| {
            format!(
                "{:.4} {} {} {:?}\n",
                e.time,
                e.sender,
                e.topic.as_deref().unwrap_or("-"),
                e.kind
            )
        })
        .collect()
}

pub fn golden_path(name: &str) -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Compares against a pinned file. With `QNET_BLESS=1` the file is
/// rewritten instead.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_path(name);
    if std::env::var_os("QNET_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected =
        std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        return Ok(());
    }
    let diff = expected
        .lines()
        .zip(actual.lines())
        .enumerate()
        .find(|(_, (e, a))| e != a)
        .map(|(i, (e, a))| format!("line {}: expected `{e}`, got `{a}`", i + 1))
        .unwrap_or_else(|| {
            format!(
                "length differs: expected {} lines, got {}",
                expected.lines().count(),
                actual.lines().count()
            )
        });
    Err(format!("{name}: {diff}"))
}

/// Kinds in order of first appearance.
pub fn first_occurrences(
    trace: &[qnet_core::control::TraceEntry],
) -> Vec<qnet_core::control::MessageKind> {
    let mut out = Vec::new();
    for e in trace {
        if !out.contains(&e.kind) {
            out.push(e.kind);
        }
    }
    out
}

use qnet_core::control::{MessageKind, RequestState, TraceEntry};

pub const DISCOVERY_ORDER: [MessageKind; 8] = [
    MessageKind::ConfigLoaded,
    MessageKind::LinksDiscovered,
    MessageKind::Register,
    MessageKind::TopologyRequest,
    MessageKind::TopologyResponse,
    MessageKind::VerifyRequest,
    MessageKind::VerifyResponse,
    MessageKind::TopologyBuilt,
];

pub const REQUEST_ORDER: [MessageKind; 15] = [
    MessageKind::Submit,
    MessageKind::Analyze,
    MessageKind::PathSetup,
    MessageKind::PathsEstablished,
    MessageKind::PathsNotify,
    MessageKind::ProbeRequest,
    MessageKind::ProbeReport,
    MessageKind::Calibrate,
    MessageKind::Ready,
    MessageKind::Start,
    MessageKind::Measurement,
    MessageKind::End,
    MessageKind::Stop,
    MessageKind::PathTeardown,
    MessageKind::Stored,
];

/// Discovery on the shipped four-site topology.
pub fn discovery_trace() -> Vec<TraceEntry> {
    let topo = oracle::metro_topology();
    let mut cp = plane(&topo, ControlConfig::default());
    cp.run_discovery().expect("discovery succeeds");
    cp.run_until_idle();
    cp.trace().to_vec()
}

/// One feasible request on the star fixture, after discovery.
pub fn request_trace() -> (RequestState, Vec<TraceEntry>) {
    let topo = star(8, 1e6);
    let mut cp = plane(&topo, ControlConfig::default());
    cp.run_discovery().expect("discovery succeeds");
    let skip = cp.trace().len();
    let rec = cp
        .handle_request(spec("q1", "q2", 10.0, 3.0))
        .expect("accepted");
    cp.run_until_idle();
    (rec.state, cp.trace()[skip..].to_vec())
}

/// Checks both pinned traces. Returns the first mismatch.
pub fn check_protocol_traces() -> Result<(), String> {
    let discovery = discovery_trace();
    if first_occurrences(&discovery) != DISCOVERY_ORDER {
        return Err(format!(
            "discovery order {:?}",
            first_occurrences(&discovery)
        ));
    }
    if qnet_core::control::runtime::kind_sequence(&discovery) != DISCOVERY_ORDER {
        return Err("discovery phases interleave".into());
    }
    check_golden("discovery.txt", &render_trace(&discovery))?;
    let (state, request) = request_trace();
    if state != RequestState::Completed {
        return Err(format!("request ended {state}"));
    }
    if first_occurrences(&request) != REQUEST_ORDER {
        return Err(format!("request order {:?}", first_occurrences(&request)));
    }
    check_golden("request.txt", &render_trace(&request))
}
