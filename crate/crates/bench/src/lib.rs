//! Fixtures shared by the benchmarks.

use std::fmt::Write;
use std::path::PathBuf;

use qnet_core::sim::LoadedScenario;
use qnet_core::topology::load_topology;
use qnet_core::Topology;

pub fn config_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn load_config(name: &str) -> LoadedScenario {
    LoadedScenario::load(&config_dir().join(name)).expect("shipped scenario loads")
}

pub fn metro_topology() -> Topology {
    let text =
        std::fs::read_to_string(config_dir().join("topology.toml")).expect("topology readable");
    load_topology(&text).expect("topology parses")
}

/// A ring of `n` switches `s{i}`, each with a Q-node `q{i}`, and one EPS
/// `e0` on `s0`.
pub fn ring_topology(n: usize) -> Topology {
    assert!(n >= 3);
    let mut doc = String::new();
    for i in 0..n {
        let (prev, next) = ((i + n - 1) % n, (i + 1) % n);
        let extra = if i == 0 {
            r#", { id = "x", tag = "e0:p" }"#
        } else {
            ""
        };
        let ports = if i == 0 { 4 } else { 3 };
        writeln!(
            doc,
            r#"[[nodes]]
id = "s{i}"
kind = "switch"
site = "RING"
insertion_loss_db = 0.5
switch = {{ port_count = {ports} }}
ports = [{{ id = "w", tag = "s{prev}:e" }}, {{ id = "e", tag = "s{next}:w" }}, {{ id = "q", tag = "q{i}:p" }}{extra}]

[[nodes]]
id = "q{i}"
kind = "qnode"
site = "RING"
ports = [{{ id = "p", tag = "s{i}:q" }}]
"#
        )
        .unwrap();
    }
    doc.push_str(
        r#"[[nodes]]
id = "e0"
kind = "eps"
site = "RING"
eps = { pair_rate_cps = 1e7, wavelengths = 16 }
ports = [{ id = "p", tag = "s0:x" }]

[[links]]
id = "src"
a = { node = "s0", port = "x" }
b = { node = "e0", port = "p" }
length_km = 0.01
attenuation_db_per_km = { O = 0.35, C = 0.2 }
total_wavelengths = 16
"#,
    );
    for i in 0..n {
        let next = (i + 1) % n;
        let km = 1.0 + (i % 7) as f64;
        writeln!(
            doc,
            r#"
[[links]]
id = "r{i:04}"
a = {{ node = "s{i}", port = "e" }}
b = {{ node = "s{next}", port = "w" }}
length_km = {km:.1}
attenuation_db_per_km = {{ O = 0.35, C = 0.2 }}
total_wavelengths = 16

[[links]]
id = "a{i:04}"
a = {{ node = "s{i}", port = "q" }}
b = {{ node = "q{i}", port = "p" }}
length_km = 0.5
attenuation_db_per_km = {{ O = 0.35, C = 0.2 }}
total_wavelengths = 16"#
        )
        .unwrap();
    }
    load_topology(&doc).expect("ring parses")
}
