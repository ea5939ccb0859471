//! Network graphs, session paths and the routing matrix.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::utility::UtilityKind;

/// Default photon source repetition rate (attempts per second).
pub const DEFAULT_CHI: f64 = 1.0e5;

/// Attenuation length (km) in the link efficiency model.
const ATTENUATION_KM: f64 = 22.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("link length must be positive, got {0}")]
    NonPositiveLength(f64),
    #[error("link length must be non-negative, got {0}")]
    NegativeLength(f64),
    #[error("attempt rate chi must be positive, got {0}")]
    NonPositiveChi(f64),
    #[error("downscale factor must be positive, got {0}")]
    NonPositiveDownscale(f64),
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("link {0} does not exist")]
    UnknownLink(usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate link between {0} and {1}")]
    DuplicateLink(usize, usize),
    #[error("topology is not connected")]
    Disconnected,
    #[error("no path between {0} and {1}")]
    NoPath(usize, usize),
    #[error("source and destination coincide ({0})")]
    SameEndpoints(usize),
    #[error("session {session}: {reason}")]
    InvalidSession { session: usize, reason: String },
}

/// A physical link: an undirected edge with its fiber length and attempt rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub a: NodeId,
    pub b: NodeId,
    pub length_km: f64,
    pub chi: f64,
}

impl Link {
    /// The endpoint opposite to `node`, if `node` is an endpoint.
    pub fn other(&self, node: NodeId) -> Option<NodeId> {
        if node == self.a {
            Some(self.b)
        } else if node == self.b {
            Some(self.a)
        } else {
            None
        }
    }

    /// Rate parameter `d_l` of this link.
    pub fn rate_param(&self) -> f64 {
        // Validated at construction.
        link_rate_param(self.length_km, self.chi).expect("validated link")
    }
}

/// Undirected, simple, connected graph of nodes and physical links.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n_nodes: usize,
    links: Vec<Link>,
    adjacency: Vec<Vec<(NodeId, LinkId)>>,
}

impl Topology {
    /// Builds a topology from `(a, b, length_km, chi)` tuples. Link ids follow
    /// input order.
    pub fn new(
        n_nodes: usize,
        links: impl IntoIterator<Item = (usize, usize, f64, f64)>,
    ) -> Result<Self, TopologyError> {
        let mut adjacency = vec![Vec::new(); n_nodes];
        let mut out = Vec::new();
        for (i, (a, b, length_km, chi)) in links.into_iter().enumerate() {
            if a >= n_nodes {
                return Err(TopologyError::UnknownNode(a));
            }
            if b >= n_nodes {
                return Err(TopologyError::UnknownNode(b));
            }
            if a == b {
                return Err(TopologyError::SelfLoop(a));
            }
            if !(length_km >= 0.0) || !length_km.is_finite() {
                return Err(TopologyError::NegativeLength(length_km));
            }
            if !(chi > 0.0) || !chi.is_finite() {
                return Err(TopologyError::NonPositiveChi(chi));
            }
            if adjacency[a].iter().any(|&(n, _)| n == NodeId(b)) {
                return Err(TopologyError::DuplicateLink(a.min(b), a.max(b)));
            }
            let id = LinkId(i);
            adjacency[a].push((NodeId(b), id));
            adjacency[b].push((NodeId(a), id));
            out.push(Link { id, a: NodeId(a), b: NodeId(b), length_km, chi });
        }
        for adj in &mut adjacency {
            adj.sort_by_key(|&(_, l)| l);
        }
        let topo = Self { n_nodes, links: out, adjacency };
        if !topo.is_connected() {
            return Err(TopologyError::Disconnected);
        }
        Ok(topo)
    }

    pub fn node_count(&self) -> usize {
        self.n_nodes
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.n_nodes).map(NodeId)
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn link(&self, id: LinkId) -> Result<&Link, TopologyError> {
        self.links.get(id.0).ok_or(TopologyError::UnknownLink(id.0))
    }

    /// Neighbours of `node` with the connecting link, sorted by link id.
    pub fn neighbors(&self, node: NodeId) -> &[(NodeId, LinkId)] {
        &self.adjacency[node.0]
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.adjacency[node.0].len()
    }

    pub fn link_between(&self, a: NodeId, b: NodeId) -> Option<LinkId> {
        self.adjacency
            .get(a.0)?
            .iter()
            .find(|&&(n, _)| n == b)
            .map(|&(_, l)| l)
    }

    /// Per-link rate parameters `d_l`.
    pub fn rate_params(&self) -> Vec<f64> {
        self.links.iter().map(Link::rate_param).collect()
    }

    /// Returns a copy with every link length replaced by `length_km`.
    pub fn with_uniform_length(&self, length_km: f64) -> Result<Self, TopologyError> {
        Self::new(
            self.n_nodes,
            self.links.iter().map(|l| (l.a.0, l.b.0, length_km, l.chi)),
        )
    }

    /// Returns a copy with every attempt rate replaced by `chi`.
    pub fn with_chi(&self, chi: f64) -> Result<Self, TopologyError> {
        Self::new(
            self.n_nodes,
            self.links.iter().map(|l| (l.a.0, l.b.0, l.length_km, chi)),
        )
    }

    fn is_connected(&self) -> bool {
        if self.n_nodes == 0 {
            return true;
        }
        self.hop_distances(NodeId(0)).iter().all(Option::is_some)
    }

    /// Breadth-first hop distances from `from`.
    pub fn hop_distances(&self, from: NodeId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_nodes];
        let mut queue = VecDeque::new();
        dist[from.0] = Some(0);
        queue.push_back(from);
        while let Some(u) = queue.pop_front() {
            let du = dist[u.0].unwrap_or(0);
            for &(v, _) in &self.adjacency[u.0] {
                if dist[v.0].is_none() {
                    dist[v.0] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Minimum-hop path from `src` to `dst` as an ordered link list. Among
    /// equal-hop paths the lexicographically least link-id sequence wins.
    pub fn shortest_path(&self, src: NodeId, dst: NodeId) -> Result<Vec<LinkId>, TopologyError> {
        if src.0 >= self.n_nodes {
            return Err(TopologyError::UnknownNode(src.0));
        }
        if dst.0 >= self.n_nodes {
            return Err(TopologyError::UnknownNode(dst.0));
        }
        if src == dst {
            return Err(TopologyError::SameEndpoints(src.0));
        }
        let to_dst = self.hop_distances(dst);
        let Some(mut remaining) = to_dst[src.0] else {
            return Err(TopologyError::NoPath(src.0, dst.0));
        };
        // Greedy descent on the distance-to-sink field: picking the smallest
        // link id at every step yields the lexicographically least sequence.
        let mut path = Vec::with_capacity(remaining);
        let mut at = src;
        while remaining > 0 {
            let (next, link) = self.adjacency[at.0]
                .iter()
                .copied()
                .filter(|&(v, _)| to_dst[v.0] == Some(remaining - 1))
                .min_by_key(|&(_, l)| l)
                .expect("BFS distance field is consistent");
            path.push(link);
            at = next;
            remaining -= 1;
        }
        Ok(path)
    }

    /// Walks `path` from `src`, returning the visited nodes (including both
    /// endpoints) or an error if consecutive links are not adjacent.
    pub fn walk(&self, src: NodeId, path: &[LinkId]) -> Result<Vec<NodeId>, TopologyError> {
        let mut nodes = Vec::with_capacity(path.len() + 1);
        nodes.push(src);
        let mut at = src;
        for &l in path {
            let link = self.link(l)?;
            at = link.other(at).ok_or_else(|| TopologyError::InvalidSession {
                session: usize::MAX,
                reason: format!("link {l} is not attached to node {at}"),
            })?;
            nodes.push(at);
        }
        Ok(nodes)
    }
}

/// Eight nodes: leaves 0, 1, 2 on hub 3; hub 3 to hub 4; leaves 5, 6, 7 on
/// hub 4. Link ids: 0..=2 left leaves, 3 the bottleneck, 4..=6 right leaves.
pub fn build_dumbbell(link_length_km: f64) -> Result<Topology, TopologyError> {
    build_dumbbell_with_chi(link_length_km, DEFAULT_CHI)
}

pub fn build_dumbbell_with_chi(link_length_km: f64, chi: f64) -> Result<Topology, TopologyError> {
    if !(link_length_km > 0.0) {
        return Err(TopologyError::NonPositiveLength(link_length_km));
    }
    let edges = [(0, 3), (1, 3), (2, 3), (3, 4), (4, 5), (4, 6), (4, 7)];
    Topology::new(8, edges.iter().map(|&(a, b)| (a, b, link_length_km, chi)))
}

/// NSFNet (14 nodes, 21 links) with published span lengths in km, nodes
/// renumbered from zero.
///
/// Source: the 14-node NSFNET T1 backbone distance table as used throughout
/// the optical routing and wavelength assignment literature (e.g. the
/// NSFNET instance distributed with common RWA benchmark sets).
pub const NSFNET_LINKS_KM: [(usize, usize, f64); 21] = [
    (0, 1, 2100.0),
    (0, 2, 3000.0),
    (0, 7, 4800.0),
    (1, 2, 1200.0),
    (1, 3, 1500.0),
    (2, 5, 3600.0),
    (3, 4, 1200.0),
    (3, 10, 3900.0),
    (4, 5, 2400.0),
    (4, 6, 1200.0),
    (5, 9, 2100.0),
    (5, 13, 3600.0),
    (6, 7, 1500.0),
    (7, 8, 1500.0),
    (8, 9, 1500.0),
    (8, 11, 600.0),
    (8, 12, 600.0),
    (10, 11, 1200.0),
    (10, 12, 1500.0),
    (11, 13, 600.0),
    (12, 13, 300.0),
];

pub const NSFNET_NODES: usize = 14;

/// NSFNet with every canonical length divided by `downscale`.
pub fn build_nsfnet(downscale: f64) -> Result<Topology, TopologyError> {
    build_nsfnet_with_chi(downscale, DEFAULT_CHI)
}

pub fn build_nsfnet_with_chi(downscale: f64, chi: f64) -> Result<Topology, TopologyError> {
    if !(downscale > 0.0) || !downscale.is_finite() {
        return Err(TopologyError::NonPositiveDownscale(downscale));
    }
    Topology::new(
        NSFNET_NODES,
        NSFNET_LINKS_KM.iter().map(|&(a, b, len)| (a, b, len / downscale, chi)),
    )
}

/// Link rate parameter `d_l = (3/2) chi eta_l` with
/// `eta_l = 0.25 exp(-(L/2)/22)`; capacity is `d_l (1 - w_l)`.
pub fn link_rate_param(length_km: f64, chi: f64) -> Result<f64, TopologyError> {
    if !(length_km >= 0.0) {
        return Err(TopologyError::NegativeLength(length_km));
    }
    if !(chi > 0.0) {
        return Err(TopologyError::NonPositiveChi(chi));
    }
    let eta = 0.25 * (-(length_km / 2.0) / ATTENUATION_KM).exp();
    Ok(1.5 * chi * eta)
}

/// A session: an ordered source/sink pair with a fixed path and utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub id: usize,
    pub src: NodeId,
    pub dst: NodeId,
    pub path: Vec<LinkId>,
    pub utility: UtilityKind,
    pub f_min: f64,
    /// Per-path-link weights for [`UtilityKind::LogProd`]; ignored otherwise.
    #[serde(default)]
    pub logprod_weights: Option<Vec<f64>>,
}

impl SessionSpec {
    /// Session over the shortest path between `src` and `dst`.
    pub fn shortest(
        topo: &Topology,
        id: usize,
        src: usize,
        dst: usize,
        utility: UtilityKind,
        f_min: f64,
    ) -> Result<Self, TopologyError> {
        let path = topo.shortest_path(NodeId(src), NodeId(dst))?;
        let s = Self {
            id,
            src: NodeId(src),
            dst: NodeId(dst),
            path,
            utility,
            f_min,
            logprod_weights: None,
        };
        s.validate(topo)?;
        Ok(s)
    }

    pub fn validate(&self, topo: &Topology) -> Result<(), TopologyError> {
        let invalid = |reason: String| TopologyError::InvalidSession { session: self.id, reason };
        if self.src == self.dst {
            return Err(invalid("source equals sink".into()));
        }
        if self.path.is_empty() {
            return Err(invalid("empty path".into()));
        }
        if !(self.f_min > 0.25 && self.f_min <= 1.0) {
            return Err(invalid(format!("F_min {} outside (1/4, 1]", self.f_min)));
        }
        let nodes = topo.walk(self.src, &self.path).map_err(|e| invalid(e.to_string()))?;
        if nodes.last() != Some(&self.dst) {
            return Err(invalid(format!("path does not end at sink {}", self.dst)));
        }
        let mut seen = self.path.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.path.len() {
            return Err(invalid("path repeats a link".into()));
        }
        if let (UtilityKind::LogProd, Some(w)) = (self.utility, &self.logprod_weights) {
            if w.len() != self.path.len() || w.iter().any(|&a| !(a > 0.0)) {
                return Err(invalid("logprod weights must be positive, one per path link".into()));
            }
        }
        Ok(())
    }

    /// Nodes visited along the path, source first.
    pub fn nodes(&self, topo: &Topology) -> Vec<NodeId> {
        topo.walk(self.src, &self.path).expect("validated session")
    }
}

/// Dense 0/1 link-by-session incidence matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingMatrix {
    links: usize,
    sessions: usize,
    entries: Vec<u8>,
}

/// Rank diagnostic of a routing matrix. Rank deficiency is reported, never an
/// error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankReport {
    pub rank: usize,
    pub columns: usize,
    pub full_column_rank: bool,
}

impl RoutingMatrix {
    pub fn new(link_count: usize, sessions: &[SessionSpec]) -> Self {
        let mut entries = vec![0u8; link_count * sessions.len()];
        for (r, s) in sessions.iter().enumerate() {
            for l in &s.path {
                entries[l.0 * sessions.len() + r] = 1;
            }
        }
        Self { links: link_count, sessions: sessions.len(), entries }
    }

    pub fn rows(&self) -> usize {
        self.links
    }

    pub fn cols(&self) -> usize {
        self.sessions
    }

    pub fn get(&self, link: usize, session: usize) -> u8 {
        self.entries[link * self.sessions + session]
    }

    pub fn column_sum(&self, session: usize) -> usize {
        (0..self.links).map(|l| self.get(l, session) as usize).sum()
    }

    /// Column rank by Gaussian elimination with partial pivoting.
    pub fn rank(&self) -> usize {
        let mut m: Vec<Vec<f64>> = (0..self.links)
            .map(|l| (0..self.sessions).map(|r| self.get(l, r) as f64).collect())
            .collect();
        let mut rank = 0;
        for col in 0..self.sessions {
            let pivot = (rank..self.links)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()));
            let Some(p) = pivot else { break };
            if m[p][col].abs() < 1e-9 {
                continue;
            }
            m.swap(rank, p);
            for i in 0..self.links {
                if i != rank {
                    let f = m[i][col] / m[rank][col];
                    if f != 0.0 {
                        for c in col..self.sessions {
                            m[i][c] -= f * m[rank][c];
                        }
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    pub fn rank_report(&self) -> RankReport {
        let rank = self.rank();
        RankReport { rank, columns: self.sessions, full_column_rank: rank == self.sessions }
    }
}

/// Routing matrix of `sessions` over `topo`, with its rank report.
pub fn routing_matrix(
    topo: &Topology,
    sessions: &[SessionSpec],
) -> Result<(RoutingMatrix, RankReport), TopologyError> {
    for s in sessions {
        s.validate(topo)?;
    }
    let m = RoutingMatrix::new(topo.link_count(), sessions);
    let report = m.rank_report();
    Ok((m, report))
}

/// The six-session dumbbell workload: one session in each direction between
/// leaf `i` and leaf `i + 5`, so every session crosses the bottleneck.
pub fn dumbbell_sessions(
    topo: &Topology,
    utility: UtilityKind,
    f_min: f64,
) -> Result<Vec<SessionSpec>, TopologyError> {
    let mut out = Vec::with_capacity(6);
    for i in 0..3 {
        for (src, dst) in [(i, i + 5), (i + 5, i)] {
            let id = out.len();
            out.push(SessionSpec::shortest(topo, id, src, dst, utility, f_min)?);
        }
    }
    Ok(out)
}
