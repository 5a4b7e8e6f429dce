//! 2D triangulation edits: edge splits, Delaunay flips, edge collapses.
//!
//! Every edit validates its outcome before mutating: new edges must respect
//! the domain length bounds and new faces must be CCW with area at least
//! `DEGENERATE_AREA`, otherwise the edit is dropped or skipped.

use super::action::{DropReason, OpOutcome};
use super::{
    angle_at, directed_in_face, dist, opposite_vertex, signed_area, EdgeId, Mesh, MeshDim, NodeId,
    DEGENERATE_AREA, FLIP_ANGLE_EPS,
};
use crate::error::{Error, Result};

fn len_ok(m: &Mesh, a: [f64; 2], b: [f64; 2]) -> bool {
    let len = dist(a, b);
    len >= m.domain.min_len && len <= m.domain.max_len
}

fn area_ok(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    0.5 * signed_area(a, b, c) >= DEGENERATE_AREA
}

/// Splits an edge at its midpoint. An interior edge nets +1 node, +3 edges,
/// +2 faces; a boundary edge nets +1 node, +2 edges, +1 face. The new node
/// averages the endpoint features (and world coordinates when present).
pub fn split_edge_2d(m: &mut Mesh, e: EdgeId) -> Result<OpOutcome> {
    if m.dim != MeshDim::Two {
        return Err(Error::invalid("split_edge_2d on a 1D mesh"));
    }
    if !m.has_edge(e) {
        return Ok(OpOutcome::Dropped(DropReason::MissingEdge));
    }
    if let Some(cap) = m.domain.vertex_cap {
        if m.n_nodes() >= cap {
            return Ok(OpOutcome::Dropped(DropReason::VertexCap));
        }
    }
    let (a, b) = m.edge(e)?.nodes;
    let (ua, ub) = (m.node(a)?.u, m.node(b)?.u);
    let mid_u = [0.5 * (ua[0] + ub[0]), 0.5 * (ua[1] + ub[1])];
    // Both halves and every spoke to an opposite vertex must stay in bounds.
    if !len_ok(m, ua, mid_u) || !len_ok(m, mid_u, ub) {
        return Ok(OpOutcome::Dropped(DropReason::LengthBound));
    }
    let face_ids: Vec<super::FaceId> = m.faces_of_edge(e).to_vec();
    if face_ids.is_empty() || face_ids.len() > 2 {
        return Err(Error::mesh(format!("edge {} on {} faces", e, face_ids.len())));
    }
    // (opposite vertex, directed a->b in this face).
    let mut opposites: Vec<(NodeId, bool)> = Vec::with_capacity(2);
    for &f in &face_ids {
        let face = m.face(f)?;
        let opp = opposite_vertex(face, a, b)
            .ok_or_else(|| Error::mesh(format!("face {} does not span edge {}", f, e)))?;
        let forward = directed_in_face(face, a, b)
            .ok_or_else(|| Error::mesh(format!("face {} missing edge {}", f, e)))?;
        if !len_ok(m, mid_u, m.node(opp)?.u) {
            return Ok(OpOutcome::Dropped(DropReason::LengthBound));
        }
        opposites.push((opp, forward));
    }
    for &(opp, forward) in &opposites {
        let uo = m.node(opp)?.u;
        let (first, second) = if forward { (ua, ub) } else { (ub, ua) };
        if !area_ok(first, mid_u, uo) || !area_ok(mid_u, second, uo) {
            return Ok(OpOutcome::Dropped(DropReason::Degenerate));
        }
    }
    let q: Vec<f32> = {
        let (qa, qb) = (&m.node(a)?.q, &m.node(b)?.q);
        qa.iter().zip(qb.iter()).map(|(x, y)| 0.5 * (x + y)).collect()
    };
    let x = match (m.node(a)?.x, m.node(b)?.x) {
        (Some(xa), Some(xb)) => Some([
            0.5 * (xa[0] + xb[0]),
            0.5 * (xa[1] + xb[1]),
            0.5 * (xa[2] + xb[2]),
        ]),
        _ => None,
    };
    let on_boundary = face_ids.len() == 1;

    for &f in &face_ids {
        m.remove_face(f)?;
    }
    m.remove_edge(e)?;
    let mid = m.add_node(mid_u, x, q, on_boundary);
    m.add_edge(a, mid)?;
    m.add_edge(mid, b)?;
    for &(opp, _) in &opposites {
        m.add_edge(mid, opp)?;
    }
    for &(opp, forward) in &opposites {
        let (first, second) = if forward { (a, b) } else { (b, a) };
        m.add_face(first, mid, opp)?;
        m.add_face(mid, second, opp)?;
    }
    Ok(OpOutcome::Applied {
        new_node: Some(mid),
    })
}

pub struct FlipSummary {
    pub flips: usize,
    pub sweeps: usize,
}

/// Flips every interior edge whose two opposite angles sum past a straight
/// angle, sweeping in ascending edge id until a fixpoint (at most 20
/// sweeps). Flips that would break length bounds or create degenerate faces
/// are skipped.
pub fn flip_all_2d(m: &mut Mesh) -> Result<FlipSummary> {
    const MAX_SWEEPS: usize = 20;
    if m.dim != MeshDim::Two {
        return Err(Error::invalid("flip_all_2d on a 1D mesh"));
    }
    let mut total = 0;
    for sweep in 0..MAX_SWEEPS {
        let ids: Vec<EdgeId> = m.edges().map(|e| e.id).collect();
        let mut flipped = 0;
        for e in ids {
            if m.has_edge(e) && try_flip(m, e)? {
                flipped += 1;
            }
        }
        total += flipped;
        if flipped == 0 {
            return Ok(FlipSummary {
                flips: total,
                sweeps: sweep + 1,
            });
        }
    }
    Ok(FlipSummary {
        flips: total,
        sweeps: MAX_SWEEPS,
    })
}

/// True when the edge violates the opposite-angle criterion (the local
/// Delaunay test) and can legally flip.
pub fn edge_wants_flip(m: &Mesh, e: EdgeId) -> Result<bool> {
    let fs = m.faces_of_edge(e);
    if fs.len() != 2 {
        return Ok(false);
    }
    let (a, b) = m.edge(e)?.nodes;
    let (ua, ub) = (m.node(a)?.u, m.node(b)?.u);
    let mut sum = 0.0;
    for &f in fs {
        let opp = opposite_vertex(m.face(f)?, a, b)
            .ok_or_else(|| Error::mesh(format!("face {} does not span edge {}", f, e)))?;
        sum += angle_at(m.node(opp)?.u, ua, ub);
    }
    Ok(sum > std::f64::consts::PI + FLIP_ANGLE_EPS)
}

fn try_flip(m: &mut Mesh, e: EdgeId) -> Result<bool> {
    if !edge_wants_flip(m, e)? {
        return Ok(false);
    }
    let fs: Vec<super::FaceId> = m.faces_of_edge(e).to_vec();
    let (a, b) = m.edge(e)?.nodes;
    // left: opposite vertex of the face traversing a->b; right: the other.
    let mut left = None;
    let mut right = None;
    for &f in &fs {
        let face = m.face(f)?;
        let opp = opposite_vertex(face, a, b).unwrap();
        match directed_in_face(face, a, b) {
            Some(true) => left = Some(opp),
            Some(false) => right = Some(opp),
            None => return Err(Error::mesh(format!("face {} missing edge {}", f, e))),
        }
    }
    let (left, right) = match (left, right) {
        (Some(l), Some(r)) => (l, r),
        _ => return Err(Error::mesh(format!("edge {} faces share orientation", e))),
    };
    if m.edge_between(left, right).is_some() {
        return Ok(false);
    }
    let (ua, ub) = (m.node(a)?.u, m.node(b)?.u);
    let (ul, ur) = (m.node(left)?.u, m.node(right)?.u);
    if !len_ok(m, ul, ur) {
        return Ok(false);
    }
    // Replacement triangles around the new diagonal right-left.
    if !area_ok(ua, ur, ul) || !area_ok(ur, ub, ul) {
        return Ok(false);
    }
    for f in fs {
        m.remove_face(f)?;
    }
    m.remove_edge(e)?;
    m.add_edge(right, left)?;
    m.add_face(a, right, left)?;
    m.add_face(right, b, left)?;
    Ok(true)
}

/// Picks the endpoint of `e` that may collapse onto the other: interior,
/// degree exactly 4, and every incident-face angle away from it strictly
/// acute. Prefers the edge's first endpoint.
pub fn is_coarsenable_2d(m: &Mesh, e: EdgeId) -> Result<Option<NodeId>> {
    if !m.has_edge(e) {
        return Ok(None);
    }
    let (a, b) = m.edge(e)?.nodes;
    for v in [a, b] {
        if node_collapsible(m, v)? {
            return Ok(Some(v));
        }
    }
    Ok(None)
}

fn node_collapsible(m: &Mesh, v: NodeId) -> Result<bool> {
    if m.node(v)?.boundary || m.degree(v) != 4 {
        return Ok(false);
    }
    for f in m.faces_of_node(v) {
        let (x, y, z) = m.face(f)?.nodes;
        for at in [x, y, z] {
            if at == v {
                continue;
            }
            let (p, q) = match at {
                _ if at == x => (y, z),
                _ if at == y => (z, x),
                _ => (x, y),
            };
            let angle = angle_at(m.node(at)?.u, m.node(p)?.u, m.node(q)?.u);
            if angle >= std::f64::consts::FRAC_PI_2 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Collapses one endpoint of `e` onto the other: -1 node, -3 edges,
/// -2 faces. The two faces spanning the edge vanish; the victim's two other
/// faces substitute the survivor for the victim; one new edge connects the
/// survivor to the ring vertex opposite it.
pub fn coarsen_edge_2d(m: &mut Mesh, e: EdgeId) -> Result<OpOutcome> {
    if m.dim != MeshDim::Two {
        return Err(Error::invalid("coarsen_edge_2d on a 1D mesh"));
    }
    if !m.has_edge(e) {
        return Ok(OpOutcome::Dropped(DropReason::MissingEdge));
    }
    let victim = match is_coarsenable_2d(m, e)? {
        Some(v) => v,
        None => return Ok(OpOutcome::Dropped(DropReason::NotCoarsenable)),
    };
    let (a, b) = m.edge(e)?.nodes;
    let survivor = if victim == a { b } else { a };

    let v_faces = m.faces_of_node(victim);
    if v_faces.len() != 4 {
        return Ok(OpOutcome::Dropped(DropReason::NotCoarsenable));
    }
    let mut spanning = Vec::new();
    let mut substituted = Vec::new();
    for f in v_faces {
        let face = m.face(f)?;
        let (x, y, z) = face.nodes;
        if [x, y, z].contains(&survivor) {
            spanning.push(f);
        } else {
            substituted.push(f);
        }
    }
    if spanning.len() != 2 || substituted.len() != 2 {
        return Ok(OpOutcome::Dropped(DropReason::NotCoarsenable));
    }
    // The ring vertex opposite the survivor: the one victim neighbor not
    // already connected to the survivor.
    let mut far = None;
    for &ve in m.edges_of_node(victim) {
        let (p, q) = m.edge(ve)?.nodes;
        let n = if p == victim { q } else { p };
        if n != survivor && m.edge_between(survivor, n).is_none() {
            if far.is_some() {
                return Ok(OpOutcome::Dropped(DropReason::NotCoarsenable));
            }
            far = Some(n);
        }
    }
    let far = match far {
        Some(n) => n,
        None => return Ok(OpOutcome::Dropped(DropReason::NotCoarsenable)),
    };
    let us = m.node(survivor)?.u;
    if !len_ok(m, us, m.node(far)?.u) {
        return Ok(OpOutcome::Dropped(DropReason::LengthBound));
    }
    // Substituted faces keep their cyclic order with the survivor in the
    // victim's slot; they must stay CCW and non-degenerate.
    let mut new_faces = Vec::with_capacity(2);
    for &f in &substituted {
        let (x, y, z) = m.face(f)?.nodes;
        let tri: Vec<NodeId> = [x, y, z]
            .iter()
            .map(|&n| if n == victim { survivor } else { n })
            .collect();
        if !area_ok(
            m.node(tri[0])?.u,
            m.node(tri[1])?.u,
            m.node(tri[2])?.u,
        ) {
            return Ok(OpOutcome::Dropped(DropReason::Degenerate));
        }
        new_faces.push((tri[0], tri[1], tri[2]));
    }

    for f in spanning.into_iter().chain(substituted.into_iter()) {
        m.remove_face(f)?;
    }
    for ve in m.edges_of_node(victim).to_vec() {
        m.remove_edge(ve)?;
    }
    m.remove_node(victim)?;
    m.add_edge(survivor, far)?;
    for (x, y, z) in new_faces {
        m.add_face(x, y, z)?;
    }
    Ok(OpOutcome::Applied { new_node: None })
}
