//! Shortest-path routing and first-fit wavelength assignment (SP-RWA).
//!
//! Path computation is a pure function of a topology snapshot. Allocation
//! goes through [`Topology::occupy_all`], so a multi-leg route is committed
//! atomically or not at all.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{LinkId, NodeId, RequestId};
use crate::topology::{
    eps_channel_pairs, Band, Claim, FiberLink, Node, NodeKind, Topology, TopologyError,
    WavelengthChannel,
};

/// Weights for the polarization terms of the edge metric. Both default to 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightCoefficients {
    pub alpha_pdl: f64,
    pub alpha_pmd: f64,
}

/// dB-equivalent routing cost, never negative.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeWeight(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RwaConfig {
    pub coefficients: WeightCoefficients,
    /// Also allocate one clock channel per leg in the opposite band.
    pub clock_paths: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RwaError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("source and destination are both `{0}`")]
    SameEndpoints(NodeId),
    #[error("no path from `{src}` to `{dst}`")]
    NoPath { src: NodeId, dst: NodeId },
    #[error("no channel free on every hop of {hops:?}")]
    Blocked { hops: Vec<LinkId> },
    #[error("no free channel pair at EPS `{0}`")]
    NoFreePair(NodeId),
    #[error("`{0}` is not an EPS node")]
    NotEps(NodeId),
    #[error("route of request {0} is unknown or already released")]
    NotAllocated(RequestId),
}

pub fn edge_weight(
    link: &FiberLink,
    band: Band,
    endpoints: (&Node, &Node),
    coefficients: &WeightCoefficients,
) -> EdgeWeight {
    let w = link.fiber_loss_db(band)
        + endpoints.0.insertion_loss_db
        + endpoints.1.insertion_loss_db
        + coefficients.alpha_pdl * link.pdl_db
        + coefficients.alpha_pmd * link.pmd_ps_per_sqrt_km * link.length_km.sqrt();
    EdgeWeight(w)
}

fn link_weight(
    topology: &Topology,
    link: &FiberLink,
    band: Band,
    coefficients: &WeightCoefficients,
) -> Result<f64, TopologyError> {
    let a = topology.node(&link.a.node)?;
    let b = topology.node(&link.b.node)?;
    Ok(edge_weight(link, band, (a, b), coefficients).0)
}

#[derive(Debug, Clone, PartialEq)]
struct Label {
    weight: f64,
    path: Vec<LinkId>,
    node: NodeId,
}

impl Label {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.weight
            .total_cmp(&other.weight)
            .then_with(|| self.path.cmp(&other.path))
    }
}

impl Eq for Label {}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Label {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.key_cmp(self).then_with(|| other.node.cmp(&self.node))
    }
}

/// Minimum-weight path as a list of link ids. Among equal-weight paths the
/// lexicographically smallest link-id sequence wins.
pub fn shortest_path(
    topology: &Topology,
    src: &NodeId,
    dst: &NodeId,
    band: Band,
    coefficients: &WeightCoefficients,
) -> Result<Vec<LinkId>, RwaError> {
    shortest_path_through(topology, src, dst, band, coefficients, |_| true)
}

/// Like [`shortest_path`], but intermediate nodes must satisfy `transit`.
fn shortest_path_through(
    topology: &Topology,
    src: &NodeId,
    dst: &NodeId,
    band: Band,
    coefficients: &WeightCoefficients,
    transit: impl Fn(&Node) -> bool,
) -> Result<Vec<LinkId>, RwaError> {
    topology.node(src)?;
    topology.node(dst)?;
    if src == dst {
        return Err(RwaError::SameEndpoints(src.clone()));
    }

    let mut best: BTreeMap<NodeId, Label> = BTreeMap::new();
    let mut settled = std::collections::BTreeSet::new();
    let mut heap = BinaryHeap::new();
    let start = Label {
        weight: 0.0,
        path: Vec::new(),
        node: src.clone(),
    };
    best.insert(src.clone(), start.clone());
    heap.push(start);

    while let Some(label) = heap.pop() {
        if !settled.insert(label.node.clone()) {
            continue;
        }
        if &label.node == dst {
            return Ok(label.path);
        }
        if &label.node != src && !transit(topology.node(&label.node)?) {
            continue;
        }
        for (link, peer) in topology.neighbors(&label.node)? {
            if settled.contains(peer) {
                continue;
            }
            let next = Label {
                weight: label.weight + link_weight(topology, link, band, coefficients)?,
                path: {
                    let mut p = label.path.clone();
                    p.push(link.id.clone());
                    p
                },
                node: peer.clone(),
            };
            let better = best
                .get(peer)
                .is_none_or(|cur| next.key_cmp(cur) == Ordering::Less);
            if better {
                best.insert(peer.clone(), next.clone());
                heap.push(next);
            }
        }
    }
    Err(RwaError::NoPath {
        src: src.clone(),
        dst: dst.clone(),
    })
}

/// Sum of edge weights along `hops`, accumulated in path order.
pub fn path_weight(
    topology: &Topology,
    hops: &[LinkId],
    band: Band,
    coefficients: &WeightCoefficients,
) -> Result<EdgeWeight, RwaError> {
    let mut w = 0.0;
    for h in hops {
        w += link_weight(topology, topology.link(h)?, band, coefficients)?;
    }
    Ok(EdgeWeight(w))
}

/// Nodes visited by `hops` starting at `src`, including both ends.
pub fn path_nodes(
    topology: &Topology,
    src: &NodeId,
    hops: &[LinkId],
) -> Result<Vec<NodeId>, RwaError> {
    let mut nodes = vec![src.clone()];
    let mut at = src.clone();
    for h in hops {
        let l = topology.link(h)?;
        let next = l
            .peer(&at)
            .ok_or_else(|| TopologyError::InvalidLink(h.clone(), format!("does not touch `{at}`")))?
            .clone();
        nodes.push(next.clone());
        at = next;
    }
    Ok(nodes)
}

/// Fiber attenuation plus the insertion loss of every node on the path.
pub fn path_loss_db(
    topology: &Topology,
    src: &NodeId,
    hops: &[LinkId],
    band: Band,
) -> Result<f64, RwaError> {
    let mut loss = 0.0;
    for h in hops {
        loss += topology.link(h)?.fiber_loss_db(band);
    }
    for n in path_nodes(topology, src, hops)? {
        loss += topology.node(&n)?.insertion_loss_db;
    }
    Ok(loss)
}

fn free_with(
    topology: &Topology,
    pending: &[Claim],
    link: &LinkId,
    channel: WavelengthChannel,
) -> bool {
    topology.link(link).is_ok_and(|l| l.is_free(channel))
        && !pending
            .iter()
            .any(|c| &c.link == link && c.channel == channel)
}

fn first_fit_with(
    topology: &Topology,
    pending: &[Claim],
    hops: &[LinkId],
    band: Band,
) -> Result<WavelengthChannel, RwaError> {
    let mut grid = u32::MAX;
    for h in hops {
        grid = grid.min(topology.link(h)?.total_wavelengths);
    }
    if hops.is_empty() {
        grid = 0;
    }
    (0..grid)
        .map(|i| WavelengthChannel::new(band, i))
        .find(|&ch| hops.iter().all(|h| free_with(topology, pending, h, ch)))
        .ok_or_else(|| RwaError::Blocked {
            hops: hops.to_vec(),
        })
}

/// Smallest channel of `band`, in first-fit order, free on every hop.
pub fn assign_first_fit(
    topology: &Topology,
    hops: &[LinkId],
    band: Band,
) -> Result<WavelengthChannel, RwaError> {
    first_fit_with(topology, &[], hops, band)
}

/// A lit path on one wavelength from `src` to `dst`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightPath {
    pub request_id: RequestId,
    pub src: NodeId,
    pub dst: NodeId,
    pub hops: Vec<LinkId>,
    pub channel: WavelengthChannel,
    pub total_weight: EdgeWeight,
    pub total_loss_db: f64,
}

impl LightPath {
    pub fn claims(&self) -> impl Iterator<Item = Claim> + '_ {
        self.hops.iter().map(|h| Claim {
            link: h.clone(),
            channel: self.channel,
            owner: self.request_id,
        })
    }
}

/// Signal and idler legs from one EPS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntanglementRoute {
    pub eps: NodeId,
    pub leg_a: LightPath,
    pub leg_b: LightPath,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clock_paths: Vec<LightPath>,
}

impl EntanglementRoute {
    pub fn claims(&self) -> Vec<Claim> {
        self.leg_a
            .claims()
            .chain(self.leg_b.claims())
            .chain(self.clock_paths.iter().flat_map(|p| p.claims()))
            .collect()
    }

    pub fn uses_link(&self, link: &LinkId) -> bool {
        self.legs().any(|p| p.hops.contains(link))
            || self.clock_paths.iter().any(|p| p.hops.contains(link))
    }

    pub fn legs(&self) -> impl Iterator<Item = &LightPath> {
        [&self.leg_a, &self.leg_b].into_iter()
    }

    pub fn total_loss_db(&self) -> f64 {
        self.leg_a.total_loss_db + self.leg_b.total_loss_db
    }
}

/// Everything a request holds: either one EPS feeding both Q-nodes, or two
/// EPSs whose idlers meet at a BSM node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RouteAllocation {
    Direct(EntanglementRoute),
    Swap {
        bsm: NodeId,
        first: EntanglementRoute,
        second: EntanglementRoute,
    },
}

impl RouteAllocation {
    pub fn routes(&self) -> Vec<&EntanglementRoute> {
        match self {
            RouteAllocation::Direct(r) => vec![r],
            RouteAllocation::Swap { first, second, .. } => vec![first, second],
        }
    }

    pub fn claims(&self) -> Vec<Claim> {
        self.routes().into_iter().flat_map(|r| r.claims()).collect()
    }

    pub fn legs(&self) -> Vec<&LightPath> {
        self.routes().into_iter().flat_map(|r| r.legs()).collect()
    }

    pub fn uses_link(&self, link: &LinkId) -> bool {
        self.routes().iter().any(|r| r.uses_link(link))
    }

    pub fn touches_node(&self, topology_nodes: &NodeId) -> bool {
        self.routes().iter().any(|r| {
            &r.eps == topology_nodes
                || r.legs()
                    .any(|l| &l.src == topology_nodes || &l.dst == topology_nodes)
        })
    }

    pub fn eps_nodes(&self) -> Vec<NodeId> {
        self.routes().iter().map(|r| r.eps.clone()).collect()
    }

    pub fn bsm(&self) -> Option<&NodeId> {
        match self {
            RouteAllocation::Direct(_) => None,
            RouteAllocation::Swap { bsm, .. } => Some(bsm),
        }
    }

    pub fn total_loss_db(&self) -> f64 {
        self.routes().iter().map(|r| r.total_loss_db()).sum()
    }
}

fn eps_features(
    topology: &Topology,
    eps: &NodeId,
) -> Result<crate::topology::EpsFeatures, RwaError> {
    let node = topology.node(eps)?;
    match (&node.kind, &node.features.eps) {
        (NodeKind::Eps, Some(f)) => Ok(f.clone()),
        _ => Err(RwaError::NotEps(eps.clone())),
    }
}

struct LegPlan {
    dst: NodeId,
    hops: Vec<LinkId>,
}

fn plan_leg(
    topology: &Topology,
    eps: &NodeId,
    dst: &NodeId,
    band: Band,
    cfg: &RwaConfig,
) -> Result<LegPlan, RwaError> {
    // Photons only pass through optical switches on their way.
    let hops = shortest_path_through(topology, eps, dst, band, &cfg.coefficients, |n| {
        n.kind == NodeKind::OpticalSwitch
    })?;
    Ok(LegPlan {
        dst: dst.clone(),
        hops,
    })
}

fn build_path(
    topology: &Topology,
    request: RequestId,
    src: &NodeId,
    plan: &LegPlan,
    channel: WavelengthChannel,
    cfg: &RwaConfig,
) -> Result<LightPath, RwaError> {
    Ok(LightPath {
        request_id: request,
        src: src.clone(),
        dst: plan.dst.clone(),
        hops: plan.hops.clone(),
        channel,
        total_weight: path_weight(topology, &plan.hops, channel.band, &cfg.coefficients)?,
        total_loss_db: path_loss_db(topology, src, &plan.hops, channel.band)?,
    })
}

/// Tries every channel pair of `eps` in order, skipping pairs that collide
/// with `pending` or existing occupancy. On success the new claims are
/// appended to `pending`.
fn plan_pair(
    topology: &Topology,
    request: RequestId,
    eps: &NodeId,
    (dst_a, dst_b): (&NodeId, &NodeId),
    cfg: &RwaConfig,
    pending: &mut Vec<Claim>,
) -> Result<EntanglementRoute, RwaError> {
    let features = eps_features(topology, eps)?;
    let pairs = eps_channel_pairs(&features)?;
    let leg_a = plan_leg(topology, eps, dst_a, features.band, cfg)?;
    let leg_b = plan_leg(topology, eps, dst_b, features.band, cfg)?;

    let mut clock_blocked = false;
    for (signal, idler) in pairs {
        let mut trial = pending.clone();
        let ok_a = leg_a
            .hops
            .iter()
            .all(|h| free_with(topology, &trial, h, signal));
        trial.extend(leg_a.hops.iter().map(|h| Claim {
            link: h.clone(),
            channel: signal,
            owner: request,
        }));
        let ok_b = leg_b
            .hops
            .iter()
            .all(|h| free_with(topology, &trial, h, idler));
        trial.extend(leg_b.hops.iter().map(|h| Claim {
            link: h.clone(),
            channel: idler,
            owner: request,
        }));
        if !(ok_a && ok_b) {
            continue;
        }
        clock_blocked = true;
        let mut route = EntanglementRoute {
            eps: eps.clone(),
            leg_a: build_path(topology, request, eps, &leg_a, signal, cfg)?,
            leg_b: build_path(topology, request, eps, &leg_b, idler, cfg)?,
            clock_paths: Vec::new(),
        };
        if cfg.clock_paths {
            let clock_band = features.band.other();
            let mut clocks = Vec::new();
            let mut clock_ok = true;
            for plan in [&leg_a, &leg_b] {
                match first_fit_with(topology, &trial, &plan.hops, clock_band) {
                    Ok(ch) => {
                        trial.extend(plan.hops.iter().map(|h| Claim {
                            link: h.clone(),
                            channel: ch,
                            owner: request,
                        }));
                        clocks.push(build_path(topology, request, eps, plan, ch, cfg)?);
                    }
                    Err(_) => {
                        clock_ok = false;
                        break;
                    }
                }
            }
            if !clock_ok {
                continue;
            }
            route.clock_paths = clocks;
        }
        *pending = trial;
        return Ok(route);
    }
    if clock_blocked {
        Err(RwaError::Blocked { hops: leg_a.hops })
    } else {
        Err(RwaError::NoFreePair(eps.clone()))
    }
}

/// Computes an entanglement route without touching occupancy.
pub fn plan_entanglement(
    topology: &Topology,
    request: RequestId,
    eps: &NodeId,
    qnode_a: &NodeId,
    qnode_b: &NodeId,
    cfg: &RwaConfig,
) -> Result<EntanglementRoute, RwaError> {
    topology.node(qnode_a)?;
    topology.node(qnode_b)?;
    let mut pending = Vec::new();
    plan_pair(
        topology,
        request,
        eps,
        (qnode_a, qnode_b),
        cfg,
        &mut pending,
    )
}

/// Routes signal to `qnode_a` and idler to `qnode_b` from `eps` on one
/// channel pair, and commits both legs (and clock paths) atomically.
pub fn route_entanglement(
    topology: &mut Topology,
    request: RequestId,
    eps: &NodeId,
    qnode_a: &NodeId,
    qnode_b: &NodeId,
    cfg: &RwaConfig,
) -> Result<EntanglementRoute, RwaError> {
    let route = plan_entanglement(topology, request, eps, qnode_a, qnode_b, cfg)?;
    topology.occupy_all(&route.claims())?;
    Ok(route)
}

/// Plans two EPS routes whose idlers both terminate at `bsm`, searching
/// pair combinations in order so that shared fibers get distinct channels.
#[allow(clippy::too_many_arguments)]
pub fn plan_bsm(
    topology: &Topology,
    request: RequestId,
    eps1: &NodeId,
    eps2: &NodeId,
    bsm: &NodeId,
    qnode1: &NodeId,
    qnode2: &NodeId,
    cfg: &RwaConfig,
) -> Result<(EntanglementRoute, EntanglementRoute), RwaError> {
    for n in [bsm, qnode1, qnode2] {
        topology.node(n)?;
    }
    let f1 = eps_features(topology, eps1)?;
    let pairs1 = eps_channel_pairs(&f1)?;
    let mut last_err = RwaError::NoFreePair(eps1.clone());
    for pair in pairs1 {
        let mut pending = Vec::new();
        let first = match plan_pinned(
            topology,
            request,
            eps1,
            (qnode1, bsm),
            pair,
            cfg,
            &mut pending,
        ) {
            Ok(r) => r,
            Err(e) => {
                last_err = e;
                continue;
            }
        };
        match plan_pair(topology, request, eps2, (qnode2, bsm), cfg, &mut pending) {
            Ok(second) => return Ok((first, second)),
            Err(e) => last_err = e,
        }
    }
    Err(last_err)
}

fn plan_pinned(
    topology: &Topology,
    request: RequestId,
    eps: &NodeId,
    (dst_a, dst_b): (&NodeId, &NodeId),
    (signal, idler): (WavelengthChannel, WavelengthChannel),
    cfg: &RwaConfig,
    pending: &mut Vec<Claim>,
) -> Result<EntanglementRoute, RwaError> {
    let features = eps_features(topology, eps)?;
    let leg_a = plan_leg(topology, eps, dst_a, features.band, cfg)?;
    let leg_b = plan_leg(topology, eps, dst_b, features.band, cfg)?;
    let mut trial = pending.clone();
    if !leg_a
        .hops
        .iter()
        .all(|h| free_with(topology, &trial, h, signal))
    {
        return Err(RwaError::Blocked { hops: leg_a.hops });
    }
    trial.extend(leg_a.hops.iter().map(|h| Claim {
        link: h.clone(),
        channel: signal,
        owner: request,
    }));
    if !leg_b
        .hops
        .iter()
        .all(|h| free_with(topology, &trial, h, idler))
    {
        return Err(RwaError::Blocked { hops: leg_b.hops });
    }
    trial.extend(leg_b.hops.iter().map(|h| Claim {
        link: h.clone(),
        channel: idler,
        owner: request,
    }));
    let mut route = EntanglementRoute {
        eps: eps.clone(),
        leg_a: build_path(topology, request, eps, &leg_a, signal, cfg)?,
        leg_b: build_path(topology, request, eps, &leg_b, idler, cfg)?,
        clock_paths: Vec::new(),
    };
    if cfg.clock_paths {
        for plan in [&leg_a, &leg_b] {
            let ch = first_fit_with(topology, &trial, &plan.hops, features.band.other())?;
            trial.extend(plan.hops.iter().map(|h| Claim {
                link: h.clone(),
                channel: ch,
                owner: request,
            }));
            route
                .clock_paths
                .push(build_path(topology, request, eps, plan, ch, cfg)?);
        }
    }
    *pending = trial;
    Ok(route)
}

/// BSM-mediated routing: `eps1` feeds `qnode1` and the BSM, `eps2` feeds
/// `qnode2` and the BSM. All four legs commit together or not at all.
#[allow(clippy::too_many_arguments)]
pub fn route_bsm(
    topology: &mut Topology,
    request: RequestId,
    eps1: &NodeId,
    eps2: &NodeId,
    bsm: &NodeId,
    qnode1: &NodeId,
    qnode2: &NodeId,
    cfg: &RwaConfig,
) -> Result<(EntanglementRoute, EntanglementRoute), RwaError> {
    let (first, second) = plan_bsm(topology, request, eps1, eps2, bsm, qnode1, qnode2, cfg)?;
    let mut claims = first.claims();
    claims.extend(second.claims());
    topology.occupy_all(&claims)?;
    Ok((first, second))
}

/// Frees every channel held by `route`. Releasing twice is an error.
pub fn release_route(topology: &mut Topology, route: &EntanglementRoute) -> Result<(), RwaError> {
    release_claims(topology, route.leg_a.request_id, &route.claims())
}

pub fn release_allocation(
    topology: &mut Topology,
    allocation: &RouteAllocation,
) -> Result<(), RwaError> {
    let owner = allocation.routes()[0].leg_a.request_id;
    release_claims(topology, owner, &allocation.claims())
}

fn release_claims(
    topology: &mut Topology,
    owner: RequestId,
    claims: &[Claim],
) -> Result<(), RwaError> {
    topology.release_all(claims).map_err(|e| match e {
        TopologyError::NotHeld { .. } => RwaError::NotAllocated(owner),
        other => other.into(),
    })
}
