//! Typed model of the optical fabric: nodes, fiber links and per-link
//! wavelength occupancy.

mod document;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{LinkId, NodeId, PortId, RequestId};

pub use document::{load_topology, Diagnostic, LoadError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    #[serde(rename = "qnode")]
    QNode,
    #[serde(rename = "eps")]
    Eps,
    #[serde(rename = "bsm")]
    BsmNode,
    #[serde(rename = "switch")]
    OpticalSwitch,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeKind::QNode => "qnode",
            NodeKind::Eps => "eps",
            NodeKind::BsmNode => "bsm",
            NodeKind::OpticalSwitch => "switch",
        })
    }
}

/// Telecom band. O-band (1310 nm) sorts before C-band (1550 nm).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Band {
    O,
    C,
}

impl Band {
    /// The band used for clock light when quantum signals travel in `self`.
    pub fn other(self) -> Band {
        match self {
            Band::O => Band::C,
            Band::C => Band::O,
        }
    }
}

/// One slot of a link's abstract wavelength grid.
///
/// The derived ordering is the first-fit order: every O-band slot precedes
/// every C-band slot, then ascending index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WavelengthChannel {
    pub band: Band,
    pub index: u32,
}

impl WavelengthChannel {
    pub fn new(band: Band, index: u32) -> Self {
        Self { band, index }
    }
}

impl fmt::Display for WavelengthChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}:{}", self.band, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Port {
    pub id: PortId,
    /// Discovery tag `node:port` naming the remote end of the attached fiber.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub tag: String,
}

impl Port {
    pub fn new(id: impl Into<String>, tag: impl Into<String>) -> Self {
        Self {
            id: PortId::new(id),
            tag: tag.into(),
        }
    }

    /// Parsed tag, `None` when the tag is empty or malformed.
    pub fn tag_endpoint(&self) -> Option<Endpoint> {
        Endpoint::parse_tag(&self.tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsFeatures {
    pub pair_rate_cps: f64,
    /// Number N of wavelength channels; serves N/2 user pairs.
    pub wavelengths: u32,
    #[serde(default = "default_quantum_band")]
    pub band: Band,
}

fn default_quantum_band() -> Band {
    Band::O
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QNodeFeatures {
    /// Name of the detector parameter set used by the physics layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchFeatures {
    pub port_count: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<EpsFeatures>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qnode: Option<QNodeFeatures>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch: Option<SwitchFeatures>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub site: String,
    #[serde(default)]
    pub insertion_loss_db: f64,
    #[serde(default)]
    pub ports: Vec<Port>,
    #[serde(flatten)]
    pub features: FeatureSet,
}

impl Node {
    pub fn new(id: impl Into<String>, kind: NodeKind, site: impl Into<String>) -> Self {
        Self {
            id: NodeId::new(id),
            kind,
            site: site.into(),
            insertion_loss_db: 0.0,
            ports: Vec::new(),
            features: FeatureSet::default(),
        }
    }

    pub fn with_port(mut self, id: impl Into<String>, tag: impl Into<String>) -> Self {
        self.ports.push(Port::new(id, tag));
        self
    }

    pub fn with_eps(mut self, pair_rate_cps: f64, wavelengths: u32, band: Band) -> Self {
        self.features.eps = Some(EpsFeatures {
            pair_rate_cps,
            wavelengths,
            band,
        });
        self
    }

    pub fn with_insertion_loss(mut self, db: f64) -> Self {
        self.insertion_loss_db = db;
        self
    }

    pub fn port(&self, id: &PortId) -> Option<&Port> {
        self.ports.iter().find(|p| &p.id == id)
    }
}

/// One end of a fiber: a port on a node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub node: NodeId,
    pub port: PortId,
}

impl Endpoint {
    pub fn new(node: impl Into<String>, port: impl Into<String>) -> Self {
        Self {
            node: NodeId::new(node),
            port: PortId::new(port),
        }
    }

    /// Parses a `node:port` discovery tag.
    pub fn parse_tag(tag: &str) -> Option<Endpoint> {
        let (node, port) = tag.split_once(':')?;
        if node.is_empty() || port.is_empty() || port.contains(':') {
            return None;
        }
        Some(Endpoint::new(node, port))
    }

    pub fn tag(&self) -> String {
        format!("{}:{}", self.node, self.port)
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node, self.port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandAttenuation {
    #[serde(rename = "O")]
    pub o: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

impl BandAttenuation {
    pub fn get(&self, band: Band) -> f64 {
        match band {
            Band::O => self.o,
            Band::C => self.c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberLink {
    pub id: LinkId,
    pub a: Endpoint,
    pub b: Endpoint,
    pub length_km: f64,
    pub attenuation_db_per_km: BandAttenuation,
    /// Grid size per band.
    pub total_wavelengths: u32,
    #[serde(default)]
    pub pdl_db: f64,
    #[serde(default)]
    pub pmd_ps_per_sqrt_km: f64,
    /// Occupied channels and the request holding each one.
    #[serde(skip)]
    pub occupied: BTreeMap<WavelengthChannel, RequestId>,
}

impl FiberLink {
    pub fn new(
        id: impl Into<String>,
        a: Endpoint,
        b: Endpoint,
        length_km: f64,
        attenuation: BandAttenuation,
        total_wavelengths: u32,
    ) -> Self {
        Self {
            id: LinkId::new(id),
            a,
            b,
            length_km,
            attenuation_db_per_km: attenuation,
            total_wavelengths,
            pdl_db: 0.0,
            pmd_ps_per_sqrt_km: 0.0,
            occupied: BTreeMap::new(),
        }
    }

    /// The node at the other end, or `None` if `node` is not an endpoint.
    pub fn peer(&self, node: &NodeId) -> Option<&NodeId> {
        if &self.a.node == node {
            Some(&self.b.node)
        } else if &self.b.node == node {
            Some(&self.a.node)
        } else {
            None
        }
    }

    pub fn touches(&self, node: &NodeId) -> bool {
        &self.a.node == node || &self.b.node == node
    }

    pub fn fiber_loss_db(&self, band: Band) -> f64 {
        self.length_km * self.attenuation_db_per_km.get(band)
    }

    pub fn in_grid(&self, channel: WavelengthChannel) -> bool {
        channel.index < self.total_wavelengths
    }

    pub fn is_free(&self, channel: WavelengthChannel) -> bool {
        self.in_grid(channel) && !self.occupied.contains_key(&channel)
    }

    pub fn occupied_in(&self, band: Band) -> usize {
        self.occupied.keys().filter(|c| c.band == band).count()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("unknown link `{0}`")]
    UnknownLink(LinkId),
    #[error("duplicate id `{0}`")]
    Duplicate(String),
    #[error("EPS wavelength count must be even and at least 2, got {0}")]
    OddWavelengthCount(u32),
    #[error("channel {channel} is outside the grid of link `{link}`")]
    OutOfGrid {
        link: LinkId,
        channel: WavelengthChannel,
    },
    #[error("channel {channel} on link `{link}` is already occupied")]
    Occupied {
        link: LinkId,
        channel: WavelengthChannel,
    },
    #[error("channel {channel} on link `{link}` is not held by request {owner}")]
    NotHeld {
        link: LinkId,
        channel: WavelengthChannel,
        owner: RequestId,
    },
    #[error("invalid link `{0}`: {1}")]
    InvalidLink(LinkId, String),
}

/// A single channel claim on a link, held by a request.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Claim {
    pub link: LinkId,
    pub channel: WavelengthChannel,
    pub owner: RequestId,
}

/// Undirected multigraph of nodes and fiber links.
///
/// `version` starts at 1 and increases on every mutation, including channel
/// occupancy changes.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    nodes: BTreeMap<NodeId, Node>,
    links: BTreeMap<LinkId, FiberLink>,
    /// Links incident to each node, derived from `links`.
    incident: BTreeMap<NodeId, BTreeSet<LinkId>>,
    version: u64,
}

impl Default for Topology {
    fn default() -> Self {
        Self::new()
    }
}

impl Topology {
    pub fn new() -> Self {
        Self {
            nodes: BTreeMap::new(),
            links: BTreeMap::new(),
            incident: BTreeMap::new(),
            version: 1,
        }
    }

    /// Builds a topology from already validated parts. Used by discovery,
    /// which has its own verification rules.
    pub(crate) fn from_parts(nodes: Vec<Node>, links: Vec<FiberLink>) -> Self {
        let mut t = Self {
            nodes: nodes.into_iter().map(|n| (n.id.clone(), n)).collect(),
            ..Self::new()
        };
        for l in links {
            t.index(&l);
            t.links.insert(l.id.clone(), l);
        }
        t
    }

    fn index(&mut self, link: &FiberLink) {
        for n in [&link.a.node, &link.b.node] {
            self.incident
                .entry(n.clone())
                .or_default()
                .insert(link.id.clone());
        }
    }

    fn unindex(&mut self, link: &FiberLink) {
        for n in [&link.a.node, &link.b.node] {
            if let Some(set) = self.incident.get_mut(n) {
                set.remove(&link.id);
                if set.is_empty() {
                    self.incident.remove(n);
                }
            }
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn bump(&mut self) {
        self.version += 1;
    }

    /// Records a change that leaves the graph itself untouched, such as a
    /// degraded link.
    pub fn mark_changed(&mut self) {
        self.bump();
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn links(&self) -> impl Iterator<Item = &FiberLink> {
        self.links.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn node(&self, id: &NodeId) -> Result<&Node, TopologyError> {
        self.nodes
            .get(id)
            .ok_or_else(|| TopologyError::UnknownNode(id.clone()))
    }

    pub fn link(&self, id: &LinkId) -> Result<&FiberLink, TopologyError> {
        self.links
            .get(id)
            .ok_or_else(|| TopologyError::UnknownLink(id.clone()))
    }

    pub fn contains_node(&self, id: &NodeId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn contains_link(&self, id: &LinkId) -> bool {
        self.links.contains_key(id)
    }

    pub fn nodes_of_kind(&self, kind: NodeKind) -> impl Iterator<Item = &Node> {
        self.nodes.values().filter(move |n| n.kind == kind)
    }

    /// All links incident to `node` with the peer at the other end. Parallel
    /// links appear once each.
    pub fn neighbors(&self, node: &NodeId) -> Result<Vec<(&FiberLink, &NodeId)>, TopologyError> {
        self.node(node)?;
        Ok(self
            .incident
            .get(node)
            .into_iter()
            .flatten()
            .filter_map(|id| {
                let l = &self.links[id];
                l.peer(node).map(|p| (l, p))
            })
            .collect())
    }

    /// Free channels of `band` on a link, in first-fit order.
    pub fn available_channels(
        &self,
        link: &LinkId,
        band: Band,
    ) -> Result<Vec<WavelengthChannel>, TopologyError> {
        let l = self.link(link)?;
        Ok((0..l.total_wavelengths)
            .map(|i| WavelengthChannel::new(band, i))
            .filter(|c| !l.occupied.contains_key(c))
            .collect())
    }

    /// Checks that every claim could be applied together, without mutating.
    pub fn check_claims(&self, claims: &[Claim]) -> Result<(), TopologyError> {
        let mut seen = std::collections::BTreeSet::new();
        for c in claims {
            let l = self.link(&c.link)?;
            if !l.in_grid(c.channel) {
                return Err(TopologyError::OutOfGrid {
                    link: c.link.clone(),
                    channel: c.channel,
                });
            }
            if l.occupied.contains_key(&c.channel) || !seen.insert((&c.link, c.channel)) {
                return Err(TopologyError::Occupied {
                    link: c.link.clone(),
                    channel: c.channel,
                });
            }
        }
        Ok(())
    }

    /// Occupies every claimed channel, or none of them.
    pub fn occupy_all(&mut self, claims: &[Claim]) -> Result<(), TopologyError> {
        self.check_claims(claims)?;
        for c in claims {
            let l = self.links.get_mut(&c.link).expect("checked above");
            l.occupied.insert(c.channel, c.owner);
        }
        self.bump();
        Ok(())
    }

    pub fn occupy(
        &mut self,
        link: &LinkId,
        channel: WavelengthChannel,
        owner: RequestId,
    ) -> Result<(), TopologyError> {
        self.occupy_all(&[Claim {
            link: link.clone(),
            channel,
            owner,
        }])
    }

    /// Releases every claim, or none of them if any is not currently held by
    /// its owner. Claims on links that no longer exist are skipped.
    pub fn release_all(&mut self, claims: &[Claim]) -> Result<(), TopologyError> {
        for c in claims {
            let Some(l) = self.links.get(&c.link) else {
                continue;
            };
            if l.occupied.get(&c.channel) != Some(&c.owner) {
                return Err(TopologyError::NotHeld {
                    link: c.link.clone(),
                    channel: c.channel,
                    owner: c.owner,
                });
            }
        }
        for c in claims {
            if let Some(l) = self.links.get_mut(&c.link) {
                l.occupied.remove(&c.channel);
            }
        }
        self.bump();
        Ok(())
    }

    /// Total number of occupied channels across all links.
    pub fn occupancy_total(&self) -> usize {
        self.links.values().map(|l| l.occupied.len()).sum()
    }

    /// Snapshot of occupancy keyed by link, for equality checks.
    pub fn occupancy(&self) -> BTreeMap<LinkId, BTreeMap<WavelengthChannel, RequestId>> {
        self.links
            .values()
            .filter(|l| !l.occupied.is_empty())
            .map(|l| (l.id.clone(), l.occupied.clone()))
            .collect()
    }

    /// Drops every occupancy entry held by `owner`. Returns how many were freed.
    pub fn release_owner(&mut self, owner: RequestId) -> usize {
        let mut freed = 0;
        for l in self.links.values_mut() {
            let before = l.occupied.len();
            l.occupied.retain(|_, o| *o != owner);
            freed += before - l.occupied.len();
        }
        if freed > 0 {
            self.bump();
        }
        freed
    }

    pub fn add_node(&mut self, node: Node) -> Result<(), TopologyError> {
        if self.nodes.contains_key(&node.id) {
            return Err(TopologyError::Duplicate(node.id.to_string()));
        }
        self.nodes.insert(node.id.clone(), node);
        self.bump();
        Ok(())
    }

    pub fn add_port(&mut self, node: &NodeId, port: Port) -> Result<(), TopologyError> {
        let n = self
            .nodes
            .get_mut(node)
            .ok_or_else(|| TopologyError::UnknownNode(node.clone()))?;
        if n.port(&port.id).is_some() {
            return Err(TopologyError::Duplicate(format!("{node}:{}", port.id)));
        }
        n.ports.push(port);
        self.bump();
        Ok(())
    }

    /// Removes a node and every link incident to it. Returns the removed links.
    pub fn remove_node(&mut self, id: &NodeId) -> Result<Vec<FiberLink>, TopologyError> {
        self.nodes
            .remove(id)
            .ok_or_else(|| TopologyError::UnknownNode(id.clone()))?;
        let doomed = self.incident.remove(id).unwrap_or_default();
        let removed: Vec<FiberLink> = doomed
            .iter()
            .filter_map(|lid| self.links.remove(lid))
            .collect();
        for l in &removed {
            self.unindex(l);
        }
        self.bump();
        Ok(removed)
    }

    pub fn add_link(&mut self, link: FiberLink) -> Result<(), TopologyError> {
        if self.links.contains_key(&link.id) {
            return Err(TopologyError::Duplicate(link.id.to_string()));
        }
        if link.a.node == link.b.node {
            return Err(TopologyError::InvalidLink(link.id, "self-loop".into()));
        }
        if !(link.length_km > 0.0) {
            return Err(TopologyError::InvalidLink(
                link.id,
                "length_km must be > 0".into(),
            ));
        }
        for end in [&link.a, &link.b] {
            let node = self.node(&end.node)?;
            if node.port(&end.port).is_none() {
                return Err(TopologyError::InvalidLink(
                    link.id.clone(),
                    format!("node `{}` has no port `{}`", end.node, end.port),
                ));
            }
            if self.link_at(end).is_some() {
                return Err(TopologyError::InvalidLink(
                    link.id.clone(),
                    format!("port {end} already carries a link"),
                ));
            }
        }
        self.index(&link);
        self.links.insert(link.id.clone(), link);
        self.bump();
        Ok(())
    }

    pub fn remove_link(&mut self, id: &LinkId) -> Result<FiberLink, TopologyError> {
        let l = self
            .links
            .remove(id)
            .ok_or_else(|| TopologyError::UnknownLink(id.clone()))?;
        self.unindex(&l);
        self.bump();
        Ok(l)
    }

    /// The link attached to a port, if any.
    pub fn link_at(&self, end: &Endpoint) -> Option<&FiberLink> {
        self.incident
            .get(&end.node)?
            .iter()
            .map(|id| &self.links[id])
            .find(|l| &l.a == end || &l.b == end)
    }

    /// Serializes to the topology file format. Occupancy is runtime state and
    /// is not written.
    pub fn to_document(&self) -> String {
        document::to_document(self)
    }
}

/// Signal/idler channel pairs of an EPS: channel k pairs with channel N-1-k.
pub fn eps_channel_pairs(
    eps: &EpsFeatures,
) -> Result<Vec<(WavelengthChannel, WavelengthChannel)>, TopologyError> {
    let n = eps.wavelengths;
    if n < 2 || !n.is_multiple_of(2) {
        return Err(TopologyError::OddWavelengthCount(n));
    }
    Ok((0..n / 2)
        .map(|k| {
            (
                WavelengthChannel::new(eps.band, k),
                WavelengthChannel::new(eps.band, n - 1 - k),
            )
        })
        .collect())
}
