//! Scenario documents and their resolution against files on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::servo::{DriftQuantity, ServoLoop};
use crate::control::{ControlConfig, QubitType, RequestSpec, Requirements};
use crate::ids::{LinkId, NodeId};
use crate::physics::profiles::{Profile, ProfileError};
use crate::topology::{load_topology, LoadError, NodeKind, Topology};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("topology {path}: {source}")]
    Topology {
        path: PathBuf,
        #[source]
        source: LoadError,
    },
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("scenario: {0}")]
    Invalid(String),
}

impl ScenarioError {
    pub fn is_io(&self) -> bool {
        matches!(self, ScenarioError::Io { .. })
    }
}

/// Which physics preset applies where. Values name a built-in profile or a
/// profile file (ending in `.toml`, relative to the scenario).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSelection {
    #[serde(default = "default_profile")]
    pub default: String,
    /// Per-EPS overrides.
    #[serde(default)]
    pub eps: BTreeMap<NodeId, String>,
}

fn default_profile() -> String {
    "qlan2_coexist".into()
}

impl Default for ProfileSelection {
    fn default() -> Self {
        Self {
            default: default_profile(),
            eps: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestArrival {
    pub at_s: f64,
    #[serde(default = "default_user")]
    pub user: String,
    pub qnode_a: NodeId,
    pub qnode_b: NodeId,
    #[serde(default = "default_qubit")]
    pub qubit_type: QubitType,
    pub rate: f64,
    pub duration: f64,
}

fn default_user() -> String {
    "sim".into()
}

fn default_qubit() -> QubitType {
    QubitType::TimeBin
}

impl RequestArrival {
    pub fn spec(&self) -> RequestSpec {
        RequestSpec {
            user: self.user.clone(),
            qnode_a: self.qnode_a.clone(),
            qnode_b: self.qnode_b.clone(),
            requirements: Requirements {
                qubit_type: self.qubit_type,
                rate: self.rate,
                duration: self.duration,
            },
        }
    }
}

/// A drift applied to one link, or to every link with `link = "*"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    #[serde(default = "all_links")]
    pub link: String,
    pub quantity: DriftQuantity,
    /// Per square-root second; defaults depend on the quantity.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "default_interval")]
    pub interval_s: f64,
}

fn all_links() -> String {
    "*".into()
}

fn default_interval() -> f64 {
    1.0
}

impl DriftSpec {
    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| self.quantity.default_sigma())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    LinkLossIncrease {
        at_s: f64,
        link: LinkId,
        db: f64,
    },
    LinkDown {
        at_s: f64,
        link: LinkId,
    },
    NodeDown {
        at_s: f64,
        node: NodeId,
    },
    /// Sets the classical launch power.
    PowerStep {
        at_s: f64,
        dbm: f64,
    },
}

impl Fault {
    pub fn at(&self) -> f64 {
        match self {
            Fault::LinkLossIncrease { at_s, .. }
            | Fault::LinkDown { at_s, .. }
            | Fault::NodeDown { at_s, .. }
            | Fault::PowerStep { at_s, .. } => *at_s,
        }
    }
}

/// Classical light sharing the fibers with the quantum channels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalLight {
    /// Launch power; `None` means dark fiber.
    #[serde(default)]
    pub launch_power_dbm: Option<f64>,
    /// Links carrying the classical light. Empty means every link.
    #[serde(default)]
    pub links: Vec<LinkId>,
}

/// Launch-power sweep over the default profile's coexistence link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Powers to evaluate; defaults to the profile's own list.
    #[serde(default)]
    pub launch_power_dbm: Vec<f64>,
    /// Overrides the profile's filter bandwidth.
    #[serde(default)]
    pub filter_bandwidth_ghz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Topology file, relative to the scenario.
    pub topology: PathBuf,
    #[serde(default)]
    pub profiles: ProfileSelection,
    #[serde(default)]
    pub requests: Vec<RequestArrival>,
    #[serde(default)]
    pub drifts: Vec<DriftSpec>,
    #[serde(default)]
    pub servos: Vec<ServoLoop>,
    #[serde(default)]
    pub faults: Vec<Fault>,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub classical: ClassicalLight,
    #[serde(default = "default_sample_interval")]
    pub sample_interval_s: f64,
    /// Time one servo iteration takes during calibration.
    #[serde(default = "default_calibration_step")]
    pub calibration_step_s: f64,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub control: ControlConfig,
}

fn default_sample_interval() -> f64 {
    1.0
}

fn default_calibration_step() -> f64 {
    0.1
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }
}

/// A scenario with every file reference resolved.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub topology: Topology,
    pub default_profile: Profile,
    pub eps_profiles: BTreeMap<NodeId, Profile>,
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn resolve_profile(name: &str, base: &Path) -> Result<Profile, ScenarioError> {
    if name.ends_with(".toml") {
        let path = base.join(name);
        let text = read(&path)?;
        Ok(Profile::parse(name, &text)?)
    } else {
        Ok(Profile::builtin(name)?)
    }
}

impl LoadedScenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = read(path)?;
        let scenario = Scenario::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::resolve(scenario, base)
    }

    /// Resolves file references relative to `base`.
    pub fn resolve(scenario: Scenario, base: &Path) -> Result<Self, ScenarioError> {
        let topo_path = base.join(&scenario.topology);
        let topo_text = read(&topo_path)?;
        let topology = load_topology(&topo_text).map_err(|source| ScenarioError::Topology {
            path: topo_path.clone(),
            source,
        })?;
        Self::with_topology(scenario, topology, base)
    }

    pub fn with_topology(
        scenario: Scenario,
        topology: Topology,
        base: &Path,
    ) -> Result<Self, ScenarioError> {
        let default_profile = resolve_profile(&scenario.profiles.default, base)?;
        let mut eps_profiles = BTreeMap::new();
        for (eps, name) in &scenario.profiles.eps {
            eps_profiles.insert(eps.clone(), resolve_profile(name, base)?);
        }
        let loaded = Self {
            scenario,
            topology,
            default_profile,
            eps_profiles,
        };
        loaded.validate()?;
        Ok(loaded)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let s = &self.scenario;
        let t = &self.topology;
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(s.duration_s > 0.0 && s.duration_s.is_finite()) {
            return bad("duration_s must be positive".into());
        }
        if !(s.sample_interval_s > 0.0) {
            return bad("sample_interval_s must be positive".into());
        }
        if !(s.calibration_step_s > 0.0) {
            return bad("calibration_step_s must be positive".into());
        }
        for eps in s.profiles.eps.keys() {
            if t.node(eps).map_or(true, |n| n.kind != NodeKind::Eps) {
                return bad(format!("profiles.eps: `{eps}` is not an EPS node"));
            }
        }
        for (i, r) in s.requests.iter().enumerate() {
            if !(r.at_s >= 0.0) {
                return bad(format!("requests[{i}].at_s must be non-negative"));
            }
            for q in [&r.qnode_a, &r.qnode_b] {
                if t.node(q).map_or(true, |n| n.kind != NodeKind::QNode) {
                    return bad(format!("requests[{i}]: unknown Q-node `{q}`"));
                }
            }
            let bad_fields = r.spec().requirements.invalid_fields();
            if !bad_fields.is_empty() {
                return bad(format!("requests[{i}]: invalid {}", bad_fields.join(", ")));
            }
        }
        for (i, d) in s.drifts.iter().enumerate() {
            if d.link != "*" && !t.contains_link(&LinkId::new(d.link.as_str())) {
                return bad(format!("drifts[{i}]: unknown link `{}`", d.link));
            }
            if !(d.sigma() >= 0.0) || !(d.interval_s > 0.0) {
                return bad(format!(
                    "drifts[{i}]: sigma must be >= 0 and interval_s > 0"
                ));
            }
        }
        for (i, v) in s.servos.iter().enumerate() {
            v.validate()
                .map_err(|m| ScenarioError::Invalid(format!("servos[{i}]: {m}")))?;
        }
        for (i, f) in s.faults.iter().enumerate() {
            if !(f.at() >= 0.0) {
                return bad(format!("faults[{i}].at_s must be non-negative"));
            }
            match f {
                Fault::LinkLossIncrease { link, db, .. } => {
                    if !t.contains_link(link) {
                        return bad(format!("faults[{i}]: unknown link `{link}`"));
                    }
                    if !(*db >= 0.0) {
                        return bad(format!("faults[{i}]: db must be non-negative"));
                    }
                }
                Fault::LinkDown { link, .. } if !t.contains_link(link) => {
                    return bad(format!("faults[{i}]: unknown link `{link}`"));
                }
                Fault::NodeDown { node, .. } if !t.contains_node(node) => {
                    return bad(format!("faults[{i}]: unknown node `{node}`"));
                }
                _ => {}
            }
        }
        for l in &s.classical.links {
            if !t.contains_link(l) {
                return bad(format!("classical.links: unknown link `{l}`"));
            }
        }
        if s.sweep.is_some() && self.default_profile.coexistence.is_none() {
            return bad(format!(
                "sweep needs a profile with a coexistence section; `{}` has none",
                self.default_profile.name
            ));
        }
        Ok(())
    }

    pub fn profile_for(&self, eps: &NodeId) -> &Profile {
        self.eps_profiles.get(eps).unwrap_or(&self.default_profile)
    }
}
