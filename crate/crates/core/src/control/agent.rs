//! SDN agent and the simulated optical controller behind it.

use std::collections::BTreeMap;

use thiserror::Error;
use tracing::warn;

use super::messages::{self, topic_request, Payload, ReqTopic, TagClaim, TopologyDelta};
use super::{Ctx, Timer};
use crate::bus::BusMessage;
use crate::ids::{LinkId, NodeId, RequestId};
use crate::rwa::{path_nodes, RouteAllocation};
use crate::topology::{Endpoint, FiberLink, Node, Topology, WavelengthChannel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeltaError {
    #[error("unknown link `{0}`")]
    UnknownLink(LinkId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("`{0}` already exists")]
    Exists(String),
    #[error("extra loss must be finite and non-negative")]
    BadLoss,
}

/// One wavelength cross-connect installed in a switching node.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossConnect {
    pub node: NodeId,
    pub from: LinkId,
    pub to: LinkId,
    pub channel: WavelengthChannel,
}

/// Inventory of the physical plant as seen by the optical controller: every
/// node with its port tags, and every fiber.
#[derive(Debug, Clone, Default)]
pub struct SimulatedController {
    nodes: BTreeMap<NodeId, Node>,
    links: BTreeMap<LinkId, FiberLink>,
    degraded: BTreeMap<LinkId, f64>,
    connects: BTreeMap<RequestId, Vec<CrossConnect>>,
}

impl SimulatedController {
    pub fn new(nodes: Vec<Node>, links: Vec<FiberLink>) -> Self {
        Self {
            nodes: nodes.into_iter().map(|n| (n.id.clone(), n)).collect(),
            links: links.into_iter().map(|l| (l.id.clone(), l)).collect(),
            ..Self::default()
        }
    }

    fn tag_names(&self, from: &Endpoint, to: &Endpoint) -> bool {
        self.nodes
            .get(&from.node)
            .and_then(|n| n.port(&from.port))
            .and_then(|p| p.tag_endpoint())
            .is_some_and(|e| &e == to)
    }

    /// Links whose existence is backed by a port tag on at least one end.
    pub fn discover_links(&self) -> Vec<FiberLink> {
        self.links
            .values()
            .filter(|l| self.tag_names(&l.a, &l.b) || self.tag_names(&l.b, &l.a))
            .map(|l| {
                let mut l = l.clone();
                l.occupied.clear();
                l
            })
            .collect()
    }

    /// True iff a discovered link joins `node:port` to the tagged endpoint.
    pub fn confirms(&self, node: &NodeId, claim: &TagClaim) -> bool {
        let Some(remote) = Endpoint::parse_tag(&claim.tag) else {
            return false;
        };
        let local = Endpoint {
            node: node.clone(),
            port: claim.port.clone(),
        };
        self.discover_links()
            .iter()
            .any(|l| (l.a == local && l.b == remote) || (l.b == local && l.a == remote))
    }

    pub fn has_link(&self, link: &LinkId) -> bool {
        self.links.contains_key(link)
    }

    pub fn has_node(&self, node: &NodeId) -> bool {
        self.nodes.contains_key(node)
    }

    pub fn extra_loss_db(&self, link: &LinkId) -> f64 {
        self.degraded.get(link).copied().unwrap_or(0.0)
    }

    pub fn validate(&self, delta: &TopologyDelta) -> Result<(), DeltaError> {
        match delta {
            TopologyDelta::LinkDown { link } => self
                .has_link(link)
                .then_some(())
                .ok_or(DeltaError::UnknownLink(link.clone())),
            TopologyDelta::LinkDegraded {
                link,
                extra_loss_db,
            } => {
                if !self.has_link(link) {
                    Err(DeltaError::UnknownLink(link.clone()))
                } else if !(extra_loss_db.is_finite() && *extra_loss_db >= 0.0) {
                    Err(DeltaError::BadLoss)
                } else {
                    Ok(())
                }
            }
            TopologyDelta::NodeDown { node } => self
                .has_node(node)
                .then_some(())
                .ok_or(DeltaError::UnknownNode(node.clone())),
            TopologyDelta::NodeUp { node } => {
                if self.has_node(&node.id) {
                    Err(DeltaError::Exists(node.id.to_string()))
                } else {
                    Ok(())
                }
            }
            TopologyDelta::LinkUp { link } => {
                if self.has_link(&link.id) {
                    return Err(DeltaError::Exists(link.id.to_string()));
                }
                for end in [&link.a, &link.b] {
                    if !self.has_node(&end.node) {
                        return Err(DeltaError::UnknownNode(end.node.clone()));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn apply(&mut self, delta: &TopologyDelta) -> Result<(), DeltaError> {
        self.validate(delta)?;
        match delta {
            TopologyDelta::LinkDown { link } => {
                self.links.remove(link);
                self.degraded.remove(link);
            }
            TopologyDelta::LinkDegraded {
                link,
                extra_loss_db,
            } => {
                *self.degraded.entry(link.clone()).or_insert(0.0) += extra_loss_db;
            }
            TopologyDelta::NodeDown { node } => {
                self.nodes.remove(node);
                self.links.retain(|_, l| !l.touches(node));
            }
            TopologyDelta::NodeUp { node } => {
                self.nodes.insert(node.id.clone(), node.clone());
            }
            TopologyDelta::LinkUp { link } => {
                let mut l = link.clone();
                l.occupied.clear();
                self.links.insert(l.id.clone(), l);
            }
        }
        Ok(())
    }

    /// Installs cross-connects at every transit node of every leg.
    pub fn install(
        &mut self,
        request: RequestId,
        allocation: &RouteAllocation,
        topology: &Topology,
    ) -> bool {
        let mut connects = Vec::new();
        for leg in allocation.legs() {
            if leg.hops.iter().any(|h| !self.has_link(h)) {
                return false;
            }
            let Ok(nodes) = path_nodes(topology, &leg.src, &leg.hops) else {
                return false;
            };
            for (i, pair) in leg.hops.windows(2).enumerate() {
                connects.push(CrossConnect {
                    node: nodes[i + 1].clone(),
                    from: pair[0].clone(),
                    to: pair[1].clone(),
                    channel: leg.channel,
                });
            }
        }
        self.connects.insert(request, connects);
        true
    }

    pub fn remove(&mut self, request: RequestId) -> usize {
        self.connects.remove(&request).map_or(0, |c| c.len())
    }

    pub fn cross_connects(&self) -> usize {
        self.connects.values().map(Vec::len).sum()
    }

    /// The plant as a topology, for routing-side path expansion.
    fn as_topology(&self) -> Topology {
        Topology::from_parts(
            self.nodes.values().cloned().collect(),
            self.links.values().cloned().collect(),
        )
    }
}

/// The SDN agent answers the server's topology and verification queries,
/// programs paths, and reports plant changes.
pub struct Agent {
    pub controller: SimulatedController,
}

impl Agent {
    pub fn new(controller: SimulatedController) -> Self {
        Self { controller }
    }

    pub(crate) fn subscribe(&self, ctx: &mut Ctx) {
        ctx.subscribe(messages::TOPOLOGY_REQUEST);
        ctx.subscribe(messages::VERIFY_REQ);
        ctx.subscribe("qnet/req/+/paths");
    }

    pub(crate) fn discover(&self, ctx: &mut Ctx) {
        let links = self
            .controller
            .discover_links()
            .into_iter()
            .map(|l| l.id)
            .collect();
        ctx.note("discovery", Payload::LinksDiscovered { links });
    }

    pub(crate) fn on_message(&mut self, msg: &BusMessage, ctx: &mut Ctx) {
        match &msg.payload {
            Payload::TopologyRequest => {
                let links = self.controller.discover_links();
                ctx.publish(
                    messages::TOPOLOGY_RESPONSE,
                    msg.correlation_id.clone(),
                    Payload::TopologyResponse { links },
                );
            }
            Payload::VerifyRequest { resource, claims } => {
                let unconfirmed: Vec<String> = claims
                    .iter()
                    .filter(|c| !self.controller.confirms(resource, c))
                    .map(|c| format!("{}:{} -> {}", resource, c.port, c.tag))
                    .collect();
                ctx.publish(
                    messages::VERIFY_RESP,
                    msg.correlation_id.clone(),
                    Payload::VerifyResponse {
                        resource: resource.clone(),
                        verified: unconfirmed.is_empty(),
                        unconfirmed,
                    },
                );
            }
            Payload::PathSetup { allocation } => {
                let Some(request) = topic_request(&msg.topic) else {
                    return;
                };
                let plant = self.controller.as_topology();
                let ok = self.controller.install(request, allocation, &plant);
                ctx.publish(
                    messages::req_topic(request, ReqTopic::Paths),
                    msg.correlation_id.clone(),
                    Payload::PathsEstablished { ok },
                );
            }
            Payload::PathTeardown { .. } => {
                if let Some(request) = topic_request(&msg.topic) {
                    self.controller.remove(request);
                }
            }
            _ => {}
        }
    }

    /// Applies an observed plant change and reports it to the server.
    pub(crate) fn observe(
        &mut self,
        delta: TopologyDelta,
        ctx: &mut Ctx,
    ) -> Result<(), DeltaError> {
        if let Err(e) = self.controller.apply(&delta) {
            warn!(error = %e, "rejected topology delta");
            return Err(e);
        }
        ctx.publish(
            messages::TOPOLOGY_CHANGE,
            "topology",
            Payload::TopologyChange { delta },
        );
        Ok(())
    }

    pub(crate) fn on_timer(&mut self, _timer: Timer, _ctx: &mut Ctx) {}
}
