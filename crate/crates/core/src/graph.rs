//! Navigation connectivity graphs.
//!
//! A [`Scene`] is immutable once built. Node identifiers are interned in
//! sorted order, so `NodeId` ordering coincides with the lexicographic order
//! of the original string ids and neighbor iteration is independent of the
//! order in which nodes and edges were supplied.
//!
//! Edge removal is never done in place. A [`SceneView`] layers a small set of
//! removed edges over a borrowed scene; every query is available on both.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used when comparing accumulated path lengths.
pub const LENGTH_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("no path from {from} to {to}")]
    NoPath { from: String, to: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown edge ({0}, {1})")]
    UnknownEdge(String, String),
    #[error("invalid path: {0} and {1} are not adjacent")]
    InvalidPath(String, String),
    #[error("path is empty")]
    EmptyPath,
    #[error("scene has no edges")]
    EmptyScene,
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("self loop on `{0}`")]
    SelfLoop(String),
    #[error("node `{0}` has a non-finite position")]
    NonFinitePosition(String),
    #[error("edge ({0}, {1}) has zero length")]
    ZeroLengthEdge(String, String),
}

/// Dense index of a node within its scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        let (dx, dy, dz) = (other.x - self.x, other.y - self.y, other.z - self.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Undirected edge with endpoints stored in ascending order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    lo: NodeId,
    hi: NodeId,
}

impl Edge {
    pub fn new(a: NodeId, b: NodeId) -> Self {
        if a <= b {
            Self { lo: a, hi: b }
        } else {
            Self { lo: b, hi: a }
        }
    }

    pub fn endpoints(&self) -> (NodeId, NodeId) {
        (self.lo, self.hi)
    }

    pub fn touches(&self, n: NodeId) -> bool {
        self.lo == n || self.hi == n
    }
}

/// Ordered node sequence. Validity is always relative to a scene or view.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Path(pub Vec<NodeId>);

impl Path {
    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> Option<NodeId> {
        self.0.first().copied()
    }

    pub fn last(&self) -> Option<NodeId> {
        self.0.last().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.0.windows(2).map(|w| Edge::new(w[0], w[1]))
    }

    pub fn hops(&self) -> usize {
        self.0.len().saturating_sub(1)
    }
}

/// On-disk scene form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneJson {
    pub scan: String,
    pub nodes: Vec<NodeJson>,
    pub edges: Vec<[String; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeJson {
    pub id: String,
    pub pos: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark: Option<u32>,
}

#[derive(Clone)]
pub struct Scene {
    scan: String,
    ids: Vec<String>,
    index: HashMap<String, NodeId>,
    positions: Vec<Position>,
    adjacency: Vec<Vec<(NodeId, f64)>>,
    landmarks: Vec<Option<u32>>,
    edge_count: usize,
    mean_edge_length: Option<f64>,
}

impl fmt::Debug for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scene")
            .field("scan", &self.scan)
            .field("nodes", &self.ids.len())
            .field("edges", &self.edge_count)
            .finish()
    }
}

impl Scene {
    /// Builds a scene from string-keyed nodes and edges. Duplicate edges are
    /// merged; edge weights are the Euclidean distance between endpoints.
    pub fn new<S: Into<String>>(
        scan: S,
        nodes: Vec<(String, Position)>,
        edges: &[(String, String)],
    ) -> Result<Self, GraphError> {
        let mut nodes = nodes;
        nodes.sort_by(|a, b| a.0.cmp(&b.0));
        for w in nodes.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(GraphError::DuplicateNode(w[0].0.clone()));
            }
        }
        for (id, p) in &nodes {
            if !p.is_finite() {
                return Err(GraphError::NonFinitePosition(id.clone()));
            }
        }
        let index: HashMap<String, NodeId> = nodes
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id.clone(), NodeId(i as u32)))
            .collect();
        let positions: Vec<Position> = nodes.iter().map(|(_, p)| *p).collect();
        let ids: Vec<String> = nodes.into_iter().map(|(id, _)| id).collect();

        let mut adjacency: Vec<Vec<(NodeId, f64)>> = vec![Vec::new(); ids.len()];
        for (a, b) in edges {
            let ia = *index.get(a).ok_or_else(|| GraphError::UnknownNode(a.clone()))?;
            let ib = *index.get(b).ok_or_else(|| GraphError::UnknownNode(b.clone()))?;
            if ia == ib {
                return Err(GraphError::SelfLoop(a.clone()));
            }
            let w = positions[ia.index()].distance(&positions[ib.index()]);
            if w <= 0.0 {
                return Err(GraphError::ZeroLengthEdge(a.clone(), b.clone()));
            }
            adjacency[ia.index()].push((ib, w));
            adjacency[ib.index()].push((ia, w));
        }
        let mut edge_count = 0;
        let mut total = 0.0;
        for (u, list) in adjacency.iter_mut().enumerate() {
            list.sort_by(|x, y| x.0.cmp(&y.0));
            list.dedup_by(|x, y| x.0 == y.0);
            for &(v, w) in list.iter() {
                if v.index() > u {
                    edge_count += 1;
                    total += w;
                }
            }
        }
        let mean_edge_length = (edge_count > 0).then(|| total / edge_count as f64);
        Ok(Self {
            scan: scan.into(),
            landmarks: vec![None; ids.len()],
            ids,
            index,
            positions,
            adjacency,
            edge_count,
            mean_edge_length,
        })
    }

    pub fn from_json(json: &SceneJson) -> Result<Self, GraphError> {
        let nodes = json
            .nodes
            .iter()
            .map(|n| (n.id.clone(), Position::new(n.pos[0], n.pos[1], n.pos[2])))
            .collect();
        let edges: Vec<(String, String)> =
            json.edges.iter().map(|[a, b]| (a.clone(), b.clone())).collect();
        let mut scene = Self::new(json.scan.clone(), nodes, &edges)?;
        for n in &json.nodes {
            let id = scene.lookup(&n.id)?;
            scene.landmarks[id.index()] = n.landmark;
        }
        Ok(scene)
    }

    /// Attaches one landmark label per node, indexed by `NodeId`.
    pub fn with_landmarks(mut self, labels: Vec<u32>) -> Self {
        assert_eq!(labels.len(), self.ids.len(), "one landmark per node");
        self.landmarks = labels.into_iter().map(Some).collect();
        self
    }

    pub fn landmark(&self, n: NodeId) -> Option<u32> {
        self.landmarks[n.index()]
    }

    /// Canonical JSON form: nodes sorted by id, edges sorted with the smaller
    /// id first.
    pub fn to_json(&self) -> SceneJson {
        let nodes = self
            .ids
            .iter()
            .zip(&self.positions)
            .zip(&self.landmarks)
            .map(|((id, p), lm)| NodeJson { id: id.clone(), pos: [p.x, p.y, p.z], landmark: *lm })
            .collect();
        let edges = self
            .edges()
            .map(|e| {
                let (a, b) = e.endpoints();
                [self.ids[a.index()].clone(), self.ids[b.index()].clone()]
            })
            .collect();
        SceneJson { scan: self.scan.clone(), nodes, edges }
    }

    pub fn scan(&self) -> &str {
        &self.scan
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.ids.len() as u32).map(NodeId)
    }

    /// All edges in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(u, list)| {
            list.iter()
                .filter(move |(v, _)| v.index() > u)
                .map(move |(v, _)| Edge::new(NodeId(u as u32), *v))
        })
    }

    pub fn id(&self, n: NodeId) -> &str {
        &self.ids[n.index()]
    }

    pub fn lookup(&self, id: &str) -> Result<NodeId, GraphError> {
        self.index.get(id).copied().ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    pub fn position(&self, n: NodeId) -> Position {
        self.positions[n.index()]
    }

    pub fn straight_distance(&self, a: NodeId, b: NodeId) -> f64 {
        self.positions[a.index()].distance(&self.positions[b.index()])
    }

    pub fn neighbors(&self, n: NodeId) -> &[(NodeId, f64)] {
        &self.adjacency[n.index()]
    }

    pub fn weight(&self, a: NodeId, b: NodeId) -> Option<f64> {
        let list = &self.adjacency[a.index()];
        list.binary_search_by(|(v, _)| v.cmp(&b)).ok().map(|i| list[i].1)
    }

    pub fn has_edge(&self, e: Edge) -> bool {
        let (a, b) = e.endpoints();
        self.weight(a, b).is_some()
    }

    pub fn edge(&self, a: NodeId, b: NodeId) -> Result<Edge, GraphError> {
        if self.weight(a, b).is_some() {
            Ok(Edge::new(a, b))
        } else {
            Err(GraphError::UnknownEdge(self.id(a).into(), self.id(b).into()))
        }
    }

    /// Mean length of all distinct edges.
    pub fn avg_neighbor_distance(&self) -> Result<f64, GraphError> {
        self.mean_edge_length.ok_or(GraphError::EmptyScene)
    }

    pub fn path_from_ids<S: AsRef<str>>(&self, ids: &[S]) -> Result<Path, GraphError> {
        ids.iter().map(|s| self.lookup(s.as_ref())).collect::<Result<Vec<_>, _>>().map(Path)
    }

    pub fn path_ids(&self, path: &Path) -> Vec<String> {
        path.nodes().iter().map(|n| self.id(*n).to_string()).collect()
    }

    pub fn view(&self) -> SceneView<'_> {
        SceneView { scene: self, removed: Vec::new() }
    }

    pub fn without(&self, edge: Edge) -> Result<SceneView<'_>, GraphError> {
        self.view().without(edge)
    }

    pub fn shortest_path(
        &self,
        a: NodeId,
        b: NodeId,
        excluded: Option<Edge>,
    ) -> Result<Path, GraphError> {
        let view = match excluded {
            Some(e) => self.without(e)?,
            None => self.view(),
        };
        view.shortest_path(a, b)
    }

    pub fn geodesic_distance(&self, a: NodeId, b: NodeId) -> Result<f64, GraphError> {
        self.view().geodesic_distance(a, b)
    }

    /// Whether `dst` is reachable from `src` once `edge` is removed.
    pub fn connected_after_deletion(
        &self,
        edge: Edge,
        src: NodeId,
        dst: NodeId,
    ) -> Result<bool, GraphError> {
        Ok(self.without(edge)?.reachable(src, dst))
    }

    pub fn path_length(&self, path: &Path) -> Result<f64, GraphError> {
        self.view().path_length(path)
    }

    pub fn is_connected(&self) -> bool {
        match self.nodes().next() {
            None => true,
            Some(root) => self.view().reachable_set(root).iter().all(|&r| r),
        }
    }
}

/// Read-only overlay of a scene with some edges removed.
#[derive(Debug, Clone)]
pub struct SceneView<'a> {
    scene: &'a Scene,
    removed: Vec<Edge>,
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: NodeId,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<'a> SceneView<'a> {
    pub fn scene(&self) -> &'a Scene {
        self.scene
    }

    pub fn removed(&self) -> &[Edge] {
        &self.removed
    }

    /// Removes one more edge. Removing an already removed edge is a no-op.
    pub fn without(mut self, edge: Edge) -> Result<Self, GraphError> {
        if !self.scene.has_edge(edge) {
            let (a, b) = edge.endpoints();
            return Err(GraphError::UnknownEdge(self.scene.id(a).into(), self.scene.id(b).into()));
        }
        if !self.removed.contains(&edge) {
            self.removed.push(edge);
        }
        Ok(self)
    }

    pub fn is_removed(&self, a: NodeId, b: NodeId) -> bool {
        !self.removed.is_empty() && self.removed.contains(&Edge::new(a, b))
    }

    pub fn neighbors(&self, n: NodeId) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        self.scene
            .neighbors(n)
            .iter()
            .copied()
            .filter(move |(v, _)| !self.is_removed(n, *v))
    }

    pub fn weight(&self, a: NodeId, b: NodeId) -> Option<f64> {
        if self.is_removed(a, b) {
            None
        } else {
            self.scene.weight(a, b)
        }
    }

    pub fn reachable_set(&self, src: NodeId) -> Vec<bool> {
        let mut seen = vec![false; self.scene.node_count()];
        let mut queue = VecDeque::from([src]);
        seen[src.index()] = true;
        while let Some(u) = queue.pop_front() {
            for (v, _) in self.neighbors(u) {
                if !seen[v.index()] {
                    seen[v.index()] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    pub fn reachable(&self, src: NodeId, dst: NodeId) -> bool {
        src == dst || self.reachable_set(src)[dst.index()]
    }

    /// Shortest-path distance from every node to `target` (infinite when
    /// unreachable).
    pub fn distances_to(&self, target: NodeId) -> Vec<f64> {
        let n = self.scene.node_count();
        let mut dist = vec![f64::INFINITY; n];
        let mut heap = BinaryHeap::new();
        dist[target.index()] = 0.0;
        heap.push(HeapEntry { dist: 0.0, node: target });
        while let Some(HeapEntry { dist: d, node: u }) = heap.pop() {
            if d > dist[u.index()] {
                continue;
            }
            for (v, w) in self.neighbors(u) {
                let nd = d + w;
                if nd < dist[v.index()] {
                    dist[v.index()] = nd;
                    heap.push(HeapEntry { dist: nd, node: v });
                }
            }
        }
        dist
    }

    /// Minimum-weight path from `a` to `b`; among equal-length paths the
    /// lexicographically smallest node sequence wins.
    pub fn shortest_path(&self, a: NodeId, b: NodeId) -> Result<Path, GraphError> {
        let dist = self.distances_to(b);
        self.trace_shortest(a, b, &dist)
    }

    /// Walks greedily from `a` using a precomputed distance-to-`b` table,
    /// always taking the smallest neighbor that stays on a shortest path.
    pub fn trace_shortest(&self, a: NodeId, b: NodeId, dist: &[f64]) -> Result<Path, GraphError> {
        if !dist[a.index()].is_finite() {
            return Err(GraphError::NoPath {
                from: self.scene.id(a).into(),
                to: self.scene.id(b).into(),
            });
        }
        let mut path = vec![a];
        let mut u = a;
        while u != b {
            let du = dist[u.index()];
            let next = self
                .neighbors(u)
                .find(|&(v, w)| {
                    let dv = dist[v.index()];
                    dv < du && (w + dv - du).abs() <= LENGTH_EPS * du.max(1.0)
                })
                .map(|(v, _)| v)
                .expect("distance table is consistent with the view");
            path.push(next);
            u = next;
        }
        Ok(Path(path))
    }

    pub fn geodesic_distance(&self, a: NodeId, b: NodeId) -> Result<f64, GraphError> {
        let d = self.distances_to(b)[a.index()];
        if d.is_finite() {
            Ok(d)
        } else {
            Err(GraphError::NoPath { from: self.scene.id(a).into(), to: self.scene.id(b).into() })
        }
    }

    pub fn path_length(&self, path: &Path) -> Result<f64, GraphError> {
        if path.is_empty() {
            return Err(GraphError::EmptyPath);
        }
        path.nodes().windows(2).try_fold(0.0, |acc, w| {
            self.weight(w[0], w[1]).map(|x| acc + x).ok_or_else(|| {
                GraphError::InvalidPath(self.scene.id(w[0]).into(), self.scene.id(w[1]).into())
            })
        })
    }
}
