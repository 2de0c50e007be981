//! TOML topology documents: parsing with located diagnostics, and writing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Spanned;

use super::{
    BandAttenuation, Endpoint, EpsFeatures, FeatureSet, FiberLink, Node, NodeKind, Port,
    QNodeFeatures, SwitchFeatures, Topology,
};
use crate::ids::{LinkId, NodeId, PortId};

/// A problem found in a topology document.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    /// Path into the document, e.g. `links[2].a.node`.
    pub path: String,
    /// 1-based line, when known.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}: {}", self.path, self.message),
            None => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub struct LoadError {
    pub diagnostics: Vec<Diagnostic>,
}

impl fmt::Display for LoadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.diagnostics.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyDoc {
    #[serde(default)]
    nodes: Vec<NodeDoc>,
    #[serde(default)]
    links: Vec<LinkDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: Spanned<String>,
    kind: NodeKind,
    site: String,
    #[serde(default)]
    insertion_loss_db: f64,
    #[serde(default)]
    ports: Vec<PortDoc>,
    eps: Option<EpsFeatures>,
    qnode: Option<QNodeFeatures>,
    switch: Option<SwitchFeatures>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PortDoc {
    id: Spanned<String>,
    tag: Option<Spanned<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EndpointDoc {
    node: Spanned<String>,
    port: Spanned<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkDoc {
    id: Spanned<String>,
    a: EndpointDoc,
    b: EndpointDoc,
    length_km: Spanned<f64>,
    attenuation_db_per_km: BandAttenuation,
    total_wavelengths: u32,
    #[serde(default)]
    pdl_db: f64,
    #[serde(default)]
    pmd_ps_per_sqrt_km: f64,
}

struct Lines<'a> {
    starts: Vec<usize>,
    _src: &'a str,
}

impl<'a> Lines<'a> {
    fn new(src: &'a str) -> Self {
        let mut starts = vec![0];
        starts.extend(src.match_indices('\n').map(|(i, _)| i + 1));
        Self { starts, _src: src }
    }

    fn line_of(&self, offset: usize) -> usize {
        match self.starts.binary_search(&offset) {
            Ok(i) => i + 1,
            Err(i) => i,
        }
    }
}

struct Collector<'a> {
    lines: Lines<'a>,
    out: Vec<Diagnostic>,
}

impl Collector<'_> {
    fn at<T>(&mut self, path: impl Into<String>, span: &Spanned<T>, message: impl Into<String>) {
        let line = self.lines.line_of(span.span().start);
        self.out.push(Diagnostic {
            path: path.into(),
            line: Some(line),
            message: message.into(),
        });
    }

    fn plain(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.out.push(Diagnostic {
            path: path.into(),
            line: None,
            message: message.into(),
        });
    }
}

fn valid_ident(s: &str) -> bool {
    !s.is_empty() && !s.contains(':') && !s.chars().any(char::is_whitespace)
}

fn non_negative(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

/// Parses and validates a topology document. The result has version 1 and
/// no occupied channels.
pub fn load_topology(text: &str) -> Result<Topology, LoadError> {
    let lines = Lines::new(text);
    let doc: TopologyDoc = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| lines.line_of(s.start));
        LoadError {
            diagnostics: vec![Diagnostic {
                path: "document".into(),
                line,
                message: e.message().trim().to_string(),
            }],
        }
    })?;
    let mut c = Collector {
        lines,
        out: Vec::new(),
    };

    // ids and ports
    let mut node_ports: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (i, n) in doc.nodes.iter().enumerate() {
        let path = format!("nodes[{i}]");
        if !valid_ident(n.id.get_ref()) {
            c.at(
                format!("{path}.id"),
                &n.id,
                format!("invalid node id `{}`", n.id.get_ref()),
            );
        }
        if node_ports.contains_key(n.id.get_ref()) {
            c.at(
                format!("{path}.id"),
                &n.id,
                format!("duplicate node id `{}`", n.id.get_ref()),
            );
            continue;
        }
        let mut ports = BTreeSet::new();
        for (j, p) in n.ports.iter().enumerate() {
            if !valid_ident(p.id.get_ref()) {
                c.at(
                    format!("{path}.ports[{j}].id"),
                    &p.id,
                    format!("invalid port id `{}`", p.id.get_ref()),
                );
            }
            if !ports.insert(p.id.get_ref().clone()) {
                c.at(
                    format!("{path}.ports[{j}].id"),
                    &p.id,
                    format!(
                        "duplicate port id `{}` on node `{}`",
                        p.id.get_ref(),
                        n.id.get_ref()
                    ),
                );
            }
        }
        node_ports.insert(n.id.get_ref().clone(), ports);

        if !non_negative(n.insertion_loss_db) {
            c.at(
                format!("{path}.insertion_loss_db"),
                &n.id,
                "insertion loss must be a finite value >= 0",
            );
        }
        match (n.kind, &n.eps) {
            (NodeKind::Eps, None) => c.at(
                format!("{path}.eps"),
                &n.id,
                "EPS node requires an `eps` feature table",
            ),
            (NodeKind::Eps, Some(f)) => {
                if f.wavelengths < 2 || f.wavelengths % 2 != 0 {
                    c.at(
                        format!("{path}.eps.wavelengths"),
                        &n.id,
                        format!(
                            "EPS wavelength count must be even and >= 2, got {}",
                            f.wavelengths
                        ),
                    );
                }
                if !non_negative(f.pair_rate_cps) {
                    c.at(
                        format!("{path}.eps.pair_rate_cps"),
                        &n.id,
                        "pair rate must be >= 0",
                    );
                }
            }
            (_, Some(_)) => c.at(
                format!("{path}.eps"),
                &n.id,
                format!("`eps` features on a {} node", n.kind),
            ),
            _ => {}
        }
        if n.qnode.is_some() && n.kind != NodeKind::QNode {
            c.at(
                format!("{path}.qnode"),
                &n.id,
                format!("`qnode` features on a {} node", n.kind),
            );
        }
        if n.switch.is_some() && n.kind != NodeKind::OpticalSwitch {
            c.at(
                format!("{path}.switch"),
                &n.id,
                format!("`switch` features on a {} node", n.kind),
            );
        }
    }

    // tags reference existing (node, port)
    for (i, n) in doc.nodes.iter().enumerate() {
        for (j, p) in n.ports.iter().enumerate() {
            let Some(tag) = &p.tag else { continue };
            if tag.get_ref().is_empty() {
                continue;
            }
            let path = format!("nodes[{i}].ports[{j}].tag");
            match Endpoint::parse_tag(tag.get_ref()) {
                None => c.at(
                    path,
                    tag,
                    format!("malformed tag `{}`, expected `node:port`", tag.get_ref()),
                ),
                Some(ep) => match node_ports.get(ep.node.as_str()) {
                    None => c.at(
                        path,
                        tag,
                        format!("dangling tag: unknown node `{}`", ep.node),
                    ),
                    Some(ports) if !ports.contains(ep.port.as_str()) => c.at(
                        path,
                        tag,
                        format!("dangling tag: node `{}` has no port `{}`", ep.node, ep.port),
                    ),
                    Some(_) => {}
                },
            }
        }
    }

    // links
    let mut link_ids = BTreeSet::new();
    let mut used_ports: BTreeMap<(String, String), String> = BTreeMap::new();
    for (i, l) in doc.links.iter().enumerate() {
        let path = format!("links[{i}]");
        if !valid_ident(l.id.get_ref()) {
            c.at(
                format!("{path}.id"),
                &l.id,
                format!("invalid link id `{}`", l.id.get_ref()),
            );
        }
        if !link_ids.insert(l.id.get_ref().clone()) {
            c.at(
                format!("{path}.id"),
                &l.id,
                format!("duplicate link id `{}`", l.id.get_ref()),
            );
        }
        for (side, ep) in [("a", &l.a), ("b", &l.b)] {
            match node_ports.get(ep.node.get_ref()) {
                None => c.at(
                    format!("{path}.{side}.node"),
                    &ep.node,
                    format!("unknown node `{}`", ep.node.get_ref()),
                ),
                Some(ports) if !ports.contains(ep.port.get_ref()) => c.at(
                    format!("{path}.{side}.port"),
                    &ep.port,
                    format!(
                        "node `{}` has no port `{}`",
                        ep.node.get_ref(),
                        ep.port.get_ref()
                    ),
                ),
                Some(_) => {
                    let key = (ep.node.get_ref().clone(), ep.port.get_ref().clone());
                    if let Some(other) = used_ports.insert(key, l.id.get_ref().clone()) {
                        c.at(
                            format!("{path}.{side}"),
                            &ep.port,
                            format!(
                                "port {}:{} already used by link `{other}`",
                                ep.node.get_ref(),
                                ep.port.get_ref()
                            ),
                        );
                    }
                }
            }
        }
        if l.a.node.get_ref() == l.b.node.get_ref() {
            c.at(
                format!("{path}.b.node"),
                &l.b.node,
                "self-loop: both ends on the same node",
            );
        }
        let len = *l.length_km.get_ref();
        if !(len.is_finite() && len > 0.0) {
            c.at(
                format!("{path}.length_km"),
                &l.length_km,
                "length_km must be > 0",
            );
        }
        let att = l.attenuation_db_per_km;
        if !non_negative(att.o) || !non_negative(att.c) {
            c.at(
                format!("{path}.attenuation_db_per_km"),
                &l.id,
                "attenuation must be >= 0",
            );
        }
        if !non_negative(l.pdl_db) {
            c.at(format!("{path}.pdl_db"), &l.id, "pdl_db must be >= 0");
        }
        if !non_negative(l.pmd_ps_per_sqrt_km) {
            c.at(
                format!("{path}.pmd_ps_per_sqrt_km"),
                &l.id,
                "pmd must be >= 0",
            );
        }
    }

    if !c.out.is_empty() {
        return Err(LoadError { diagnostics: c.out });
    }
    if doc.nodes.is_empty() && !doc.links.is_empty() {
        c.plain("links", "links present without nodes");
        return Err(LoadError { diagnostics: c.out });
    }

    let nodes = doc
        .nodes
        .into_iter()
        .map(|n| Node {
            id: NodeId::new(n.id.into_inner()),
            kind: n.kind,
            site: n.site,
            insertion_loss_db: n.insertion_loss_db,
            ports: n
                .ports
                .into_iter()
                .map(|p| Port {
                    id: PortId::new(p.id.into_inner()),
                    tag: p.tag.map(Spanned::into_inner).unwrap_or_default(),
                })
                .collect(),
            features: FeatureSet {
                eps: n.eps,
                qnode: n.qnode,
                switch: n.switch,
            },
        })
        .collect();
    let links = doc
        .links
        .into_iter()
        .map(|l| FiberLink {
            id: LinkId::new(l.id.into_inner()),
            a: Endpoint::new(l.a.node.into_inner(), l.a.port.into_inner()),
            b: Endpoint::new(l.b.node.into_inner(), l.b.port.into_inner()),
            length_km: l.length_km.into_inner(),
            attenuation_db_per_km: l.attenuation_db_per_km,
            total_wavelengths: l.total_wavelengths,
            pdl_db: l.pdl_db,
            pmd_ps_per_sqrt_km: l.pmd_ps_per_sqrt_km,
            occupied: BTreeMap::new(),
        })
        .collect();
    Ok(Topology::from_parts(nodes, links))
}

#[derive(Serialize)]
struct TopologyOut<'a> {
    nodes: Vec<&'a Node>,
    links: Vec<&'a FiberLink>,
}

pub(super) fn to_document(t: &Topology) -> String {
    let out = TopologyOut {
        nodes: t.nodes().collect(),
        links: t.links().collect(),
    };
    toml::to_string(&out).expect("topology is always representable as TOML")
}
