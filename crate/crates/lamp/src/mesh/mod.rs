//! Editable simplicial meshes: 1D chains and 2D triangulations.
//!
//! Conventions:
//! - ids are monotone per mesh lineage and never reused, so surviving nodes
//!   keep their ids across any edit sequence;
//! - iteration over nodes/edges/faces is always in ascending id order
//!   (BTreeMap), which keeps downstream f32 reductions reproducible;
//! - mesh coordinates `u` drive every geometric predicate; world coordinates
//!   `x` are carried as features only;
//! - 1D chains are kept sorted by `u` with no wraparound edge; the two ends
//!   are the boundary nodes;
//! - 2D faces are stored counterclockwise.

mod action;
mod one_d;
mod two_d;

pub use action::{
    apply_action, filter_conflicts, ActionRecord, ActionRecordEntry, DropReason, FilteredAction,
    OpKind, OpOutcome, RemeshAction,
};
pub use one_d::{coarsen_edge_1d, remove_chain_node, split_edge_1d};
pub use two_d::{
    coarsen_edge_2d, edge_wants_flip, flip_all_2d, is_coarsenable_2d, split_edge_2d, FlipSummary,
};

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Faces below this area are degenerate; any edit that would create one is
/// dropped.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Slack on the Delaunay angle test so exactly-cocircular quads do not flip.
pub const FLIP_ANGLE_EPS: f64 = 1e-9;

macro_rules! id_type {
    ($name:ident) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u32);

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(NodeId);
id_type!(EdgeId);
id_type!(FaceId);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshDim {
    One,
    Two,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    /// Mesh coordinates. 1D uses `u[0]` only.
    pub u: [f64; 2],
    /// Optional world coordinates (deforming 2D domains).
    pub x: Option<[f64; 3]>,
    /// Feature bundle attached to the node (f32, matches the tensor core).
    pub q: Vec<f32>,
    pub boundary: bool,
}

#[derive(Clone, Debug)]
pub struct Edge {
    pub id: EdgeId,
    /// 1D: (left, right) ordered by `u`. 2D: construction order; lookups go
    /// through the canonical (min, max) key.
    pub nodes: (NodeId, NodeId),
}

#[derive(Clone, Debug)]
pub struct Face {
    pub id: FaceId,
    /// Counterclockwise vertex triple.
    pub nodes: (NodeId, NodeId, NodeId),
}

/// Domain metadata. 1D uses `length` (periodic extent) and `vertex_cap`;
/// 2D uses the edge-length bounds.
#[derive(Clone, Debug)]
pub struct Domain {
    pub length: f64,
    pub vertex_cap: Option<usize>,
    pub min_len: f64,
    pub max_len: f64,
}

impl Domain {
    pub fn one_d(length: f64, vertex_cap: Option<usize>) -> Self {
        Domain {
            length,
            vertex_cap,
            min_len: 0.0,
            max_len: f64::INFINITY,
        }
    }

    pub fn two_d(min_len: f64, max_len: f64) -> Self {
        Domain {
            length: 0.0,
            vertex_cap: None,
            min_len,
            max_len,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub dim: MeshDim,
    pub domain: Domain,
    nodes: BTreeMap<NodeId, Node>,
    edges: BTreeMap<EdgeId, Edge>,
    faces: BTreeMap<FaceId, Face>,
    edge_by_pair: BTreeMap<(NodeId, NodeId), EdgeId>,
    edge_faces: BTreeMap<EdgeId, Vec<FaceId>>,
    node_edges: BTreeMap<NodeId, Vec<EdgeId>>,
    next_node: u32,
    next_edge: u32,
    next_face: u32,
}

fn pair_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Mesh {
    pub fn empty(dim: MeshDim, domain: Domain) -> Self {
        Mesh {
            dim,
            domain,
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
            faces: BTreeMap::new(),
            edge_by_pair: BTreeMap::new(),
            edge_faces: BTreeMap::new(),
            node_edges: BTreeMap::new(),
            next_node: 0,
            next_edge: 0,
            next_face: 0,
        }
    }

    /// Uniform 1D chain: nodes at i*length/n_x for i in 0..n_x, consecutive
    /// edges, no wraparound. Feature bundles start as zeros of `q_width`.
    pub fn uniform_1d(
        n_x: usize,
        length: f64,
        q_width: usize,
        vertex_cap: Option<usize>,
    ) -> Result<Self> {
        if n_x < 2 {
            return Err(Error::invalid("uniform_1d needs at least 2 nodes"));
        }
        if let Some(cap) = vertex_cap {
            if n_x > cap {
                return Err(Error::invalid(format!(
                    "uniform_1d: {} nodes exceeds vertex cap {}",
                    n_x, cap
                )));
            }
        }
        let mut m = Mesh::empty(MeshDim::One, Domain::one_d(length, vertex_cap));
        let mut prev = None;
        for i in 0..n_x {
            let u = i as f64 * length / n_x as f64;
            let id = m.add_node([u, 0.0], None, vec![0.0; q_width], i == 0 || i == n_x - 1);
            if let Some(p) = prev {
                m.add_edge(p, id)?;
            }
            prev = Some(id);
        }
        Ok(m)
    }

    /// 2D mesh from vertex coordinates and triangle index triples. Triangles
    /// given clockwise are reoriented. Boundary flags are derived from edge
    /// incidence.
    pub fn from_triangles(
        coords: &[[f64; 2]],
        tris: &[[usize; 3]],
        q_width: usize,
        domain: Domain,
    ) -> Result<Self> {
        let mut m = Mesh::empty(MeshDim::Two, domain);
        let ids: Vec<NodeId> = coords
            .iter()
            .map(|&[x, y]| m.add_node([x, y], None, vec![0.0; q_width], false))
            .collect();
        for t in tris {
            if t.iter().any(|&i| i >= coords.len()) {
                return Err(Error::invalid("triangle index out of range"));
            }
            let (mut a, mut b, c) = (ids[t[0]], ids[t[1]], ids[t[2]]);
            if signed_area(m.node(a)?.u, m.node(b)?.u, m.node(c)?.u) < 0.0 {
                std::mem::swap(&mut a, &mut b);
            }
            for (p, q) in [(a, b), (b, c), (c, a)] {
                if m.edge_between(p, q).is_none() {
                    m.add_edge(p, q)?;
                }
            }
            m.add_face(a, b, c)?;
        }
        m.refresh_boundary_flags();
        Ok(m)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(&id)
            .ok_or_else(|| Error::mesh(format!("no node {}", id)))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut Node> {
        self.nodes
            .get_mut(&id)
            .ok_or_else(|| Error::mesh(format!("no node {}", id)))
    }

    pub fn edge(&self, id: EdgeId) -> Result<&Edge> {
        self.edges
            .get(&id)
            .ok_or_else(|| Error::mesh(format!("no edge {}", id)))
    }

    pub fn face(&self, id: FaceId) -> Result<&Face> {
        self.faces
            .get(&id)
            .ok_or_else(|| Error::mesh(format!("no face {}", id)))
    }

    pub fn has_edge(&self, id: EdgeId) -> bool {
        self.edges.contains_key(&id)
    }

    /// Ascending id.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.values()
    }

    pub fn faces(&self) -> impl Iterator<Item = &Face> {
        self.faces.values()
    }

    pub fn edge_between(&self, a: NodeId, b: NodeId) -> Option<EdgeId> {
        self.edge_by_pair.get(&pair_key(a, b)).copied()
    }

    /// Incident faces, ascending id; length 1 marks a boundary edge.
    pub fn faces_of_edge(&self, e: EdgeId) -> &[FaceId] {
        self.edge_faces.get(&e).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Incident edges, ascending id.
    pub fn edges_of_node(&self, n: NodeId) -> &[EdgeId] {
        self.node_edges.get(&n).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn degree(&self, n: NodeId) -> usize {
        self.edges_of_node(n).len()
    }

    /// Faces incident to a node, ascending id.
    pub fn faces_of_node(&self, n: NodeId) -> Vec<FaceId> {
        let mut out: Vec<FaceId> = Vec::new();
        for &e in self.edges_of_node(n) {
            for &f in self.faces_of_edge(e) {
                if !out.contains(&f) {
                    out.push(f);
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn add_node(
        &mut self,
        u: [f64; 2],
        x: Option<[f64; 3]>,
        q: Vec<f32>,
        boundary: bool,
    ) -> NodeId {
        let id = NodeId(self.next_node);
        self.next_node += 1;
        self.nodes.insert(
            id,
            Node {
                id,
                u,
                x,
                q,
                boundary,
            },
        );
        self.node_edges.insert(id, Vec::new());
        id
    }

    pub fn add_edge(&mut self, a: NodeId, b: NodeId) -> Result<EdgeId> {
        if a == b {
            return Err(Error::mesh("self-loop edge"));
        }
        if !self.nodes.contains_key(&a) || !self.nodes.contains_key(&b) {
            return Err(Error::mesh("edge endpoint does not exist"));
        }
        if self.edge_between(a, b).is_some() {
            return Err(Error::mesh(format!("duplicate edge {}-{}", a, b)));
        }
        // 1D edges are stored (left, right) by mesh coordinate.
        let (a, b) = if self.dim == MeshDim::One && self.nodes[&a].u[0] > self.nodes[&b].u[0] {
            (b, a)
        } else {
            (a, b)
        };
        let id = EdgeId(self.next_edge);
        self.next_edge += 1;
        self.edges.insert(id, Edge { id, nodes: (a, b) });
        self.edge_by_pair.insert(pair_key(a, b), id);
        self.edge_faces.insert(id, Vec::new());
        for n in [a, b] {
            let v = self.node_edges.get_mut(&n).unwrap();
            v.push(id);
            v.sort_unstable();
        }
        Ok(id)
    }

    pub fn add_face(&mut self, a: NodeId, b: NodeId, c: NodeId) -> Result<FaceId> {
        let id = FaceId(self.next_face);
        for (p, q) in [(a, b), (b, c), (c, a)] {
            let e = self
                .edge_between(p, q)
                .ok_or_else(|| Error::mesh(format!("face edge {}-{} missing", p, q)))?;
            let fs = self.edge_faces.get_mut(&e).unwrap();
            if fs.len() >= 2 {
                return Err(Error::mesh(format!("edge {} already has two faces", e)));
            }
            fs.push(id);
            fs.sort_unstable();
        }
        self.next_face += 1;
        self.faces.insert(id, Face { id, nodes: (a, b, c) });
        Ok(id)
    }

    pub fn remove_face(&mut self, id: FaceId) -> Result<Face> {
        let f = self
            .faces
            .remove(&id)
            .ok_or_else(|| Error::mesh(format!("no face {}", id)))?;
        let (a, b, c) = f.nodes;
        for (p, q) in [(a, b), (b, c), (c, a)] {
            if let Some(e) = self.edge_between(p, q) {
                self.edge_faces.get_mut(&e).unwrap().retain(|&x| x != id);
            }
        }
        Ok(f)
    }

    pub fn remove_edge(&mut self, id: EdgeId) -> Result<Edge> {
        if !self.faces_of_edge(id).is_empty() {
            return Err(Error::mesh(format!("edge {} still has faces", id)));
        }
        let e = self
            .edges
            .remove(&id)
            .ok_or_else(|| Error::mesh(format!("no edge {}", id)))?;
        self.edge_by_pair.remove(&pair_key(e.nodes.0, e.nodes.1));
        self.edge_faces.remove(&id);
        for n in [e.nodes.0, e.nodes.1] {
            if let Some(v) = self.node_edges.get_mut(&n) {
                v.retain(|&x| x != id);
            }
        }
        Ok(e)
    }

    pub fn remove_node(&mut self, id: NodeId) -> Result<Node> {
        if !self.edges_of_node(id).is_empty() {
            return Err(Error::mesh(format!("node {} still has edges", id)));
        }
        self.node_edges.remove(&id);
        self.nodes
            .remove(&id)
            .ok_or_else(|| Error::mesh(format!("no node {}", id)))
    }

    /// Recomputes 2D boundary flags from edge incidence.
    pub fn refresh_boundary_flags(&mut self) {
        if self.dim != MeshDim::Two {
            return;
        }
        let mut on_boundary: Vec<NodeId> = Vec::new();
        for (e, fs) in &self.edge_faces {
            if fs.len() == 1 {
                let edge = &self.edges[e];
                on_boundary.push(edge.nodes.0);
                on_boundary.push(edge.nodes.1);
            }
        }
        for n in self.nodes.values_mut() {
            n.boundary = false;
        }
        for id in on_boundary {
            self.nodes.get_mut(&id).unwrap().boundary = true;
        }
    }

    /// 1D nodes ordered left to right.
    pub fn chain_order(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        ids.sort_by(|a, b| {
            self.nodes[a].u[0]
                .partial_cmp(&self.nodes[b].u[0])
                .unwrap()
                .then(a.cmp(b))
        });
        ids
    }

    /// Fresh copies of every feature bundle, ascending node id.
    pub fn bundles(&self) -> Vec<(NodeId, Vec<f32>)> {
        self.nodes
            .values()
            .map(|n| (n.id, n.q.clone()))
            .collect()
    }
}

pub fn edge_length(m: &Mesh, e: EdgeId) -> Result<f64> {
    let edge = m.edge(e)?;
    let (a, b) = (m.node(edge.nodes.0)?, m.node(edge.nodes.1)?);
    Ok(dist(a.u, b.u))
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Twice the signed area of triangle (a, b, c); positive when CCW.
pub fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

pub fn face_area(m: &Mesh, f: FaceId) -> Result<f64> {
    let face = m.face(f)?;
    let (a, b, c) = (
        m.node(face.nodes.0)?.u,
        m.node(face.nodes.1)?.u,
        m.node(face.nodes.2)?.u,
    );
    Ok(0.5 * signed_area(a, b, c))
}

/// Interior angle at `at` formed by rays to `p` and `q`.
pub fn angle_at(at: [f64; 2], p: [f64; 2], q: [f64; 2]) -> f64 {
    let v = [p[0] - at[0], p[1] - at[1]];
    let w = [q[0] - at[0], q[1] - at[1]];
    let cross = v[0] * w[1] - v[1] * w[0];
    let dot = v[0] * w[0] + v[1] * w[1];
    cross.abs().atan2(dot)
}

/// Structural and geometric well-formedness check.
///
/// 1D: strictly increasing chain inside [0, length], edges exactly the
/// consecutive pairs, boundary flags only at the two ends, equal bundle
/// widths, optional vertex cap respected.
///
/// 2D: CCW non-degenerate faces, every edge on 1..=2 faces with opposite
/// orientations, edge lengths within bounds, boundary flags matching edge
/// incidence, equal bundle widths.
pub fn validate(m: &Mesh) -> Result<()> {
    let widths: Vec<usize> = m.nodes().map(|n| n.q.len()).collect();
    if let Some(&w0) = widths.first() {
        if widths.iter().any(|&w| w != w0) {
            return Err(Error::mesh("inconsistent feature widths"));
        }
    }
    for e in m.edges() {
        m.node(e.nodes.0)?;
        m.node(e.nodes.1)?;
    }
    match m.dim {
        MeshDim::One => validate_1d(m),
        MeshDim::Two => validate_2d(m),
    }
}

fn validate_1d(m: &Mesh) -> Result<()> {
    if m.n_nodes() < 2 {
        return Err(Error::mesh("1D mesh needs at least 2 nodes"));
    }
    if !m.faces.is_empty() {
        return Err(Error::mesh("1D mesh has faces"));
    }
    if let Some(cap) = m.domain.vertex_cap {
        if m.n_nodes() > cap {
            return Err(Error::mesh(format!(
                "{} nodes over cap {}",
                m.n_nodes(),
                cap
            )));
        }
    }
    let order = m.chain_order();
    for w in order.windows(2) {
        let (a, b) = (m.node(w[0])?, m.node(w[1])?);
        if a.u[0] >= b.u[0] {
            return Err(Error::mesh(format!(
                "chain positions not strictly increasing at {} / {}",
                a.id, b.id
            )));
        }
    }
    let first = *order.first().unwrap();
    let last = *order.last().unwrap();
    for n in m.nodes() {
        if n.u[0] < 0.0 || n.u[0] > m.domain.length {
            return Err(Error::mesh(format!("node {} outside [0, L]", n.id)));
        }
        let should = n.id == first || n.id == last;
        if n.boundary != should {
            return Err(Error::mesh(format!(
                "node {} boundary flag {} (expected {})",
                n.id, n.boundary, should
            )));
        }
    }
    if m.n_edges() != m.n_nodes() - 1 {
        return Err(Error::mesh(format!(
            "chain of {} nodes has {} edges",
            m.n_nodes(),
            m.n_edges()
        )));
    }
    for w in order.windows(2) {
        match m.edge_between(w[0], w[1]) {
            Some(e) => {
                let edge = m.edge(e)?;
                if edge.nodes != (w[0], w[1]) {
                    return Err(Error::mesh(format!(
                        "edge {} not stored left-to-right",
                        e
                    )));
                }
            }
            None => {
                return Err(Error::mesh(format!(
                    "consecutive nodes {} {} not connected",
                    w[0], w[1]
                )))
            }
        }
    }
    Ok(())
}

fn validate_2d(m: &Mesh) -> Result<()> {
    for f in m.faces() {
        let (a, b, c) = f.nodes;
        if a == b || b == c || a == c {
            return Err(Error::mesh(format!("face {} repeats a vertex", f.id)));
        }
        let area = 0.5 * signed_area(m.node(a)?.u, m.node(b)?.u, m.node(c)?.u);
        if area <= 0.0 {
            return Err(Error::mesh(format!("face {} not CCW", f.id)));
        }
        if area < DEGENERATE_AREA {
            return Err(Error::mesh(format!("face {} degenerate", f.id)));
        }
        for (p, q) in [(a, b), (b, c), (c, a)] {
            let e = m
                .edge_between(p, q)
                .ok_or_else(|| Error::mesh(format!("face {} edge {}-{} missing", f.id, p, q)))?;
            if !m.faces_of_edge(e).contains(&f.id) {
                return Err(Error::mesh(format!(
                    "edge {} missing incidence with face {}",
                    e, f.id
                )));
            }
        }
    }
    for e in m.edges() {
        let fs = m.faces_of_edge(e.id);
        if fs.is_empty() || fs.len() > 2 {
            return Err(Error::mesh(format!("edge {} on {} faces", e.id, fs.len())));
        }
        let len = edge_length(m, e.id)?;
        if len < m.domain.min_len || len > m.domain.max_len {
            return Err(Error::mesh(format!(
                "edge {} length {:.6} outside [{}, {}]",
                e.id, len, m.domain.min_len, m.domain.max_len
            )));
        }
        if fs.len() == 2 {
            // Manifold orientation: the shared edge must run in opposite
            // directions in its two faces.
            let dir0 = directed_in_face(m.face(fs[0])?, e.nodes.0, e.nodes.1);
            let dir1 = directed_in_face(m.face(fs[1])?, e.nodes.0, e.nodes.1);
            match (dir0, dir1) {
                (Some(d0), Some(d1)) if d0 != d1 => {}
                _ => {
                    return Err(Error::mesh(format!(
                        "edge {} orientation inconsistent between faces",
                        e.id
                    )))
                }
            }
        }
        for n in [e.nodes.0, e.nodes.1] {
            if !m.edges_of_node(n).contains(&e.id) {
                return Err(Error::mesh(format!(
                    "node {} missing incidence with edge {}",
                    n, e.id
                )));
            }
        }
    }
    for n in m.nodes() {
        let on_bdy = m
            .edges_of_node(n.id)
            .iter()
            .any(|&e| m.faces_of_edge(e).len() == 1);
        if n.boundary != on_bdy {
            return Err(Error::mesh(format!(
                "node {} boundary flag {} (expected {})",
                n.id, n.boundary, on_bdy
            )));
        }
    }
    Ok(())
}

/// True if (a, b) appears in the face's cyclic order as written, false if
/// reversed, None if absent.
pub(crate) fn directed_in_face(f: &Face, a: NodeId, b: NodeId) -> Option<bool> {
    let (x, y, z) = f.nodes;
    for (p, q) in [(x, y), (y, z), (z, x)] {
        if (p, q) == (a, b) {
            return Some(true);
        }
        if (p, q) == (b, a) {
            return Some(false);
        }
    }
    None
}

/// The vertex of `f` that is not on edge (a, b).
pub(crate) fn opposite_vertex(f: &Face, a: NodeId, b: NodeId) -> Option<NodeId> {
    let (x, y, z) = f.nodes;
    let mut other = None;
    let mut seen = 0;
    for v in [x, y, z] {
        if v == a || v == b {
            seen += 1;
        } else {
            other = Some(v);
        }
    }
    if seen == 2 {
        other
    } else {
        None
    }
}
